"""
corpus splitting, sharding and the contiguous TBTT minibatch iterator.

rows of consecutive minibatches continue each other inside one shard, so
the hidden state carried from one window to the next stays meaningful.
"""

import io
import logging
import os

import numpy as np

from charscale.errors import InsufficientDataError, ContractViolation

logger = logging.getLogger(__name__)

SPLIT_RATIO = (1000, 1, 1)
RECORD_DELIMITER = "\n"


class Corpus(object):
    """
    ordered list of text records.

    arguments:
    records -- list of UTF-8 strings (reviews, documents)
    rng_seed -- seed of the split shuffle
    """
    def __init__(self, records, rng_seed=0):
        self.records = list(records)
        self.rng_seed = rng_seed

    def __len__(self):
        return len(self.records)


def load_corpus(path, data_format="lines", rng_seed=0):
    """
    read a corpus from disk.

    arguments:
    path -- a newline-delimited text file ("lines") or a directory holding
            one document per file ("directory")
    data_format -- "lines" or "directory"

    return:
    Corpus
    """
    if data_format == "lines":
        with io.open(path, "r", encoding="utf-8", errors="replace") as corpusFile:
            records = [line.rstrip("\n") for line in corpusFile]
        records = [record for record in records if record.strip()]
    elif data_format == "directory":
        records = []
        for name in sorted(os.listdir(path)):
            filename = os.path.join(path, name)
            if not os.path.isfile(filename):
                continue
            with io.open(filename, "r", encoding="utf-8", errors="replace") as documentFile:
                text = documentFile.read()
            if text.strip():
                records.append(text)
    else:
        raise ContractViolation("unknown corpus format {!r}".format(data_format))
    if not records:
        raise InsufficientDataError("no records found in {}".format(path))
    logger.info("corpus: {} records from {}".format(len(records), path))
    return Corpus(records, rng_seed)


def split_corpus(corpus):
    """
    shuffle and split 1000:1:1 into train, validation and test records.

    small corpora keep at least one record in every split.

    return:
    (train, val, test) lists of records
    """
    count = len(corpus.records)
    if count < 3:
        raise InsufficientDataError("need at least 3 records to split, got {}".format(count))
    order = np.random.default_rng(corpus.rng_seed).permutation(count)
    eval_count = max(1, int(round(count * SPLIT_RATIO[1] / float(sum(SPLIT_RATIO)))))
    train_count = count - 2 * eval_count
    shuffled = [corpus.records[i] for i in order]
    train = shuffled[:train_count]
    val = shuffled[train_count:train_count + eval_count]
    test = shuffled[train_count + eval_count:]
    logger.info("split: train {}, val {}, test {}".format(len(train), len(val), len(test)))
    return train, val, test


class Shard(object):
    """
    concatenated records read front to back.

    arguments:
    data -- uint8 byte array of the shard
    cursor -- current read offset in bytes
    """
    def __init__(self, data, cursor=0):
        self.data = np.frombuffer(data, dtype=np.uint8) if isinstance(data, bytes) \
                else np.asarray(data, dtype=np.uint8)
        if not 0 <= cursor <= len(self.data):
            raise ContractViolation("cursor {} outside shard of {} bytes".format(
                cursor, len(self.data)))
        self.cursor = cursor

    @classmethod
    def from_records(cls, records):
        return cls(RECORD_DELIMITER.join(records).encode("utf-8"))

    @property
    def text(self):
        return self.data.tobytes().decode("utf-8", errors="replace")

    def __len__(self):
        return len(self.data)


def shard_count(batch_size, kind, min_train_shards=1000):
    if kind == "eval":
        return batch_size
    elif kind == "train":
        return max(min_train_shards, batch_size)
    raise ContractViolation("shard kind must be 'train' or 'eval', got {!r}".format(kind))


def make_shards(records, batch_size, kind, seed=0, min_train_shards=1000):
    """
    cut a split into shards.

    records are shuffled once with the seed and dealt round-robin, the
    shards are then used for every epoch without further shuffling.

    arguments:
    records -- list of record strings of one split
    batch_size -- B
    kind -- "eval" makes B shards, "train" max(1000, B)
    min_train_shards -- the 1000 of max(1000, B)

    return:
    list of Shard
    """
    if not records:
        raise InsufficientDataError("cannot shard an empty split")
    count = shard_count(batch_size, kind, min_train_shards)
    if len(records) < count:
        raise InsufficientDataError("{} records cannot fill {} {} shards, lower the "
                "batch size (or min_train_shards) or supply more records".format(
                    len(records), count, kind))
    order = np.random.default_rng(seed).permutation(len(records))
    shards = [Shard.from_records([records[i] for i in order[k::count]])
              for k in range(count)]
    logger.info("{} shards for {}: {} bytes".format(count, kind, n_tokens(shards)))
    return shards


def n_tokens(shards):
    return int(sum(len(shard) for shard in shards))


class Minibatch(object):
    """
    one TBTT window for every batch row.

    arguments:
    inputs -- [B x seq_len] byte ids
    targets -- inputs shifted one byte inside the shard
    reset_mask -- rows starting a new shard, their state must be zeroed
    active -- rows holding data; rows whose shard queue ran dry are padding
    shard_ids -- shard index per row, -1 for inactive rows
    """
    def __init__(self, inputs, targets, reset_mask, active, shard_ids):
        self.inputs = inputs
        self.targets = targets
        self.reset_mask = reset_mask
        self.active = active
        self.shard_ids = shard_ids

    @property
    def batch_size(self):
        return self.inputs.shape[0]

    def rows(self, index):
        return Minibatch(self.inputs[index], self.targets[index],
                self.reset_mask[index], self.active[index], self.shard_ids[index])


class MinibatchIterator(object):
    """
    deals contiguous windows of B shards.

    every row reads its shard front to back in windows of seq_len; a row
    finishing its shard takes the next one from the queue and raises its
    reset flag. Trailing bytes shorter than seq_len + 1 are dropped. The
    epoch ends when every row is out of data.

    arguments:
    shards -- list of Shard
    batch_size -- number of rows B
    seq_len -- window length
    """
    def __init__(self, shards, batch_size, seq_len):
        if batch_size < 1 or seq_len < 1:
            raise ContractViolation("batch size and seq_len must be positive")
        self.shards = shards
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.epoch = 0
        self.restart(advance_epoch=False)

    def restart(self, advance_epoch=True):
        """start over with the same shard order"""
        if advance_epoch:
            self.epoch += 1
        self.row_shard = [-1] * self.batch_size
        self.row_cursor = [0] * self.batch_size
        self.row_fresh = [False] * self.batch_size
        self.next_shard = 0
        self.finished = False
        for row in range(self.batch_size):
            self._assign(row)

    def _assign(self, row):
        if self.next_shard < len(self.shards):
            self.row_shard[row] = self.next_shard
            self.next_shard += 1
        else:
            self.row_shard[row] = -1
        self.row_cursor[row] = 0
        self.row_fresh[row] = True

    def _has_window(self, row):
        shard = self.row_shard[row]
        if shard < 0:
            return False
        return len(self.shards[shard]) - self.row_cursor[row] >= self.seq_len + 1

    def _advance(self):
        """
        move every row on by one window.

        return:
        list of (row, shard, cursor, fresh) for the rows that hold a window
        """
        windows = []
        for row in range(self.batch_size):
            while self.row_shard[row] >= 0 and not self._has_window(row):
                self._assign(row)
            shard = self.row_shard[row]
            if shard < 0:
                continue
            cursor = self.row_cursor[row]
            windows.append((row, shard, cursor, self.row_fresh[row]))
            self.row_cursor[row] = cursor + self.seq_len
            self.row_fresh[row] = False
        return windows

    def next_minibatch(self):
        """
        return:
        the next Minibatch, or None at the end of the epoch
        """
        if self.finished:
            return None
        windows = self._advance()
        if not windows:
            self.finished = True
            logger.info("epoch {} finished".format(self.epoch))
            return None
        size, steps = self.batch_size, self.seq_len
        inputs = np.zeros((size, steps), dtype=np.int64)
        targets = np.zeros((size, steps), dtype=np.int64)
        reset_mask = np.zeros(size, dtype=bool)
        active = np.zeros(size, dtype=bool)
        shard_ids = np.full(size, -1, dtype=np.int64)
        for row, shard, cursor, fresh in windows:
            window = self.shards[shard].data[cursor:cursor + steps + 1]
            inputs[row] = window[:-1]
            targets[row] = window[1:]
            reset_mask[row] = fresh
            active[row] = True
            shard_ids[row] = shard
        return Minibatch(inputs, targets, reset_mask, active, shard_ids)

    def epoch_length(self):
        """number of minibatches in one full epoch over these shards"""
        counter = MinibatchIterator(self.shards, self.batch_size, self.seq_len)
        count = 0
        while counter._advance():
            count += 1
        return count

    def __iter__(self):
        return self

    def __next__(self):
        batch = self.next_minibatch()
        if batch is None:
            raise StopIteration
        return batch

    def state_dict(self):
        return {"epoch": self.epoch, "next_shard": self.next_shard,
                "finished": self.finished,
                "rows": [(self.row_shard[row], self.row_cursor[row], self.row_fresh[row])
                         for row in range(self.batch_size)]}

    def load_state_dict(self, state):
        rows = state["rows"]
        if len(rows) != self.batch_size:
            raise ContractViolation("iterator state holds {} rows, batch size is {}".format(
                len(rows), self.batch_size))
        self.epoch = int(state["epoch"])
        self.next_shard = int(state["next_shard"])
        self.finished = bool(state["finished"])
        self.row_shard = [int(row[0]) for row in rows]
        self.row_cursor = [int(row[1]) for row in rows]
        self.row_fresh = [bool(row[2]) for row in rows]


def next_minibatch(iterator):
    return iterator.next_minibatch()
