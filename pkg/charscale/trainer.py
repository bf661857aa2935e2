"""
the training loop: data, forward and backward with the loss scale, the
overflow gate, the all-reduce, Adam and the metrics log.
"""

import csv
import io
import logging
import math
import os
import time

import numpy as np

from charscale.checkpoint import Checkpoint, save_checkpoint
from charscale.data import (load_corpus, split_corpus, make_shards, n_tokens,
        MinibatchIterator)
from charscale.ddp import WorkerGroup, parallel_train_step
from charscale.errors import TrainingDivergedError, InsufficientDataError
from charscale.evaluation import bpc_from_nats, evaluate
from charscale.model import MlstmConfig, MlstmParams
from charscale.numerics import Precision
from charscale.optimizer import LrPolicy, scale_lr, stop_iteration, check_large_batch_regime

logger = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "epoch", "lr", "alpha", "skipped", "loss_nats", "bpc",
        "val_bpc", "wall_seconds")


def metrics_row(row):
    """format one metrics dict as the CSV fields of METRICS_HEADER"""
    val_bpc = row.get("val_bpc")
    return [str(row["iter"]), str(row["epoch"]), "{:.6e}".format(row["lr"]),
            "{:g}".format(row["alpha"]), str(int(row["skipped"])),
            "{:.6f}".format(row["loss_nats"]), "{:.6f}".format(row["bpc"]),
            "" if val_bpc is None else "{:.6f}".format(val_bpc),
            "{:.3f}".format(row["wall_seconds"])]


def read_metrics(filename):
    """
    return:
    dict of numpy columns keyed by METRICS_HEADER, empty val_bpc cells are nan
    """
    table = np.genfromtxt(filename, delimiter=",", names=True, dtype=np.float64,
            missing_values="", filling_values=np.nan)
    table = np.atleast_1d(table)
    return {name: table[name] for name in METRICS_HEADER}


class Trainer(object):
    """
    arguments:
    config -- validated RunConfig
    train_records -- training split
    val_records -- validation split, used every eval_interval iterations
    checkpoint -- Checkpoint to continue from, or None for a fresh run
    """
    def __init__(self, config, train_records, val_records=None, checkpoint=None):
        if checkpoint is not None:
            config = checkpoint.config
        self.config = config.validate()
        self.val_records = val_records
        self.precision = Precision(config.precision, config.gemm_order)
        self.model_config = MlstmConfig(config.hidden_dim, config.embed_dim, config.seq_len)

        shards = make_shards(train_records, config.batch_size, "train",
                seed=config.data_seed, min_train_shards=config.min_train_shards)
        self.iterator = MinibatchIterator(shards, config.batch_size, config.seq_len)
        tokens = n_tokens(shards)
        check_large_batch_regime(config.batch_size, max(1, tokens // config.seq_len),
                config.regime_threshold)

        self.policy = LrPolicy(config.base_lr, config.lr_rule, config.batch_size,
                config.decay_iters, config.max_epochs)
        self.initial_lr = scale_lr(self.policy)
        self.epoch_iterations = self.iterator.epoch_length()
        if self.epoch_iterations == 0:
            raise InsufficientDataError("no training shard holds a window of {} bytes".format(
                config.seq_len + 1))
        self.stop = stop_iteration(self.policy, self.epoch_iterations)

        if checkpoint is None:
            params = MlstmParams.init(self.model_config, config.init_seed, self.precision)
            self.group = WorkerGroup(params, config.n_workers, config.batch_size,
                    config.scaler_state(), self.policy, self.initial_lr,
                    betas=(config.beta1, config.beta2), eps=config.adam_eps)
            self.iteration = 0
            self.streak = 0
        else:
            params = checkpoint.params.with_precision(self.precision)
            self.group = WorkerGroup(params, config.n_workers, config.batch_size,
                    checkpoint.scaler, self.policy, self.initial_lr, adam=checkpoint.adam)
            self.group.set_state(checkpoint.hidden)
            self.iterator.load_state_dict(checkpoint.iterator_state)
            self.iteration = checkpoint.iteration
            self.streak = checkpoint.divergence_streak
        self.resumed = checkpoint is not None
        self.history = []
        logger.info("training {} for up to {} iterations ({} per epoch), initial lr {:.4g}, "
                "{} workers, {} precision".format(self.model_config, self.stop,
                    self.epoch_iterations, self.initial_lr, config.n_workers, config.precision))

    def checkpoint(self):
        return Checkpoint(self.config, self.group.params, self.group.adam, self.group.scaler,
                self.iteration, self.iterator.state_dict(), self.group.state(), self.streak)

    def save(self, filename=None):
        return save_checkpoint(filename or self.config.checkpoint_path, self.checkpoint())

    def _next_batch(self):
        batch = self.iterator.next_minibatch()
        if batch is not None:
            return batch
        if self.iterator.epoch + 1 >= self.config.max_epochs:
            return None
        self.iterator.restart()
        logger.info("epoch {} starts at iteration {}".format(self.iterator.epoch,
            self.iteration))
        return self.iterator.next_minibatch()

    def _check_divergence(self, loss):
        """
        count consecutive out of range iterations and stop the run after
        divergence_patience of them.

        the streak is broader than counting non-finite losses of applied
        updates only: every iteration counts, skipped ones included, and a
        finite loss above divergence_threshold counts as well. A single
        in-range iteration clears it.
        """
        if not math.isfinite(loss) or loss > self.config.divergence_threshold:
            self.streak += 1
            if self.streak == max(1, self.config.divergence_patience // 2):
                logger.warning("loss {:.4g} out of range for {} iterations".format(
                    loss, self.streak))
        else:
            self.streak = 0
        if self.streak >= self.config.divergence_patience:
            raise TrainingDivergedError("training diverged: loss out of range for {} "
                    "consecutive iterations at iteration {}".format(self.streak, self.iteration),
                    iteration=self.iteration, streak=self.streak)

    def step(self):
        """
        run one iteration.

        return:
        the metrics dict, or None when training is complete
        """
        if self.iteration >= self.stop:
            return None
        batch = self._next_batch()
        if batch is None:
            return None
        started = time.perf_counter()
        result = parallel_train_step(self.group, batch, self.iteration)
        wall = time.perf_counter() - started if self.config.log_wall_time else 0.0
        loss = result["loss"]
        row = {"iter": self.iteration, "epoch": self.iterator.epoch, "lr": result["lr"],
               "alpha": result["alpha"], "skipped": result["skipped"], "loss_nats": loss,
               "bpc": bpc_from_nats(loss),
               "val_bpc": None, "wall_seconds": wall}
        self.iteration += 1
        interval = self.config.eval_interval
        if interval and self.val_records and self.iteration % interval == 0:
            report = evaluate(self.group.params, self.val_records,
                    self.config.eval_batch_size, self.config.seq_len, seed=self.config.data_seed)
            row["val_bpc"] = report.mean_bpc
            logger.info("validation at iteration {}: {mean_bpc} bpc, {tokens} tokens in "
                    "{shards} shards".format(self.iteration, **report.as_row()))
        logger.debug("iteration {iter}: loss {loss_nats:.4f} alpha {alpha:g} "
                "skipped {skipped}".format(**row))
        self.history.append(row)
        self._check_divergence(loss)
        return row

    def run(self, until=None):
        """
        train to the stop iteration, or to iteration `until` when given, and
        write the final checkpoint.

        return:
        list of metrics dicts of this call
        """
        config = self.config
        append = self.resumed and os.path.exists(config.metrics_path)
        rows = []
        with io.open(config.metrics_path, "a" if append else "w", newline="",
                encoding="utf-8") as metricsFile:
            writer = csv.writer(metricsFile, lineterminator="\n")
            if not append:
                writer.writerow(METRICS_HEADER)
            try:
                while until is None or self.iteration < until:
                    row = self.step()
                    if row is None:
                        break
                    writer.writerow(metrics_row(row))
                    metricsFile.flush()
                    rows.append(row)
                    if row["iter"] % config.log_interval == 0:
                        logger.info("iter {} epoch {} loss {:.4f} bpc {:.4f} lr {:.3g} "
                                "alpha {:g}".format(row["iter"], row["epoch"], row["loss_nats"],
                                    row["bpc"], row["lr"], row["alpha"]))
                    if config.checkpoint_interval and \
                            self.iteration % config.checkpoint_interval == 0:
                        self.save()
            finally:
                self.group.close()
        self.save()
        logger.info("training stopped at iteration {}".format(self.iteration))
        return rows


def train(config, train_records=None, val_records=None, checkpoint=None, until=None):
    """
    train from a config, reading and splitting the corpus when no records
    are passed.

    return:
    the Trainer after its run
    """
    if train_records is None:
        corpus = load_corpus(config.train_path, config.data_format, config.seed)
        train_records, val_records, _ = split_corpus(corpus)
    trainer = Trainer(config, train_records, val_records, checkpoint)
    trainer.run(until)
    return trainer
