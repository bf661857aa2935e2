"""
simulated synchronous data parallel training.

N replicas run in one process. Every iteration each worker runs forward
and backward on its slice of the global batch, the gradients travel
around a logical ring as FP16 payloads, received chunks are accumulated in
FP32 and every worker applies the same Adam update. There is no parameter
server.
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from charscale.errors import ShapeError, ReplicaDivergenceError, ReportError
from charscale.model import (HiddenState, SequenceGrads, forward_sequence,
        loss_and_backward)
from charscale.optimizer import AdamState, adam_apply, lr_at
from charscale.scaler import scaler_step, unscale_master_grads, APPLY_UPDATE

logger = logging.getLogger(__name__)


class RingStats(object):
    """
    payload accounting of one all-reduce.

    arguments:
    n_workers -- ring size
    buffer_bytes -- size of one worker's gradient buffer on the wire
    """
    def __init__(self, n_workers=0, buffer_bytes=0):
        self.n_workers = n_workers
        self.buffer_bytes = buffer_bytes
        self.bytes_sent = [0] * n_workers
        self.steps = 0

    def expected_bytes(self):
        """2 (N - 1) / N of the buffer, per worker"""
        if self.n_workers == 0:
            return 0.0
        return 2.0 * (self.n_workers - 1) / self.n_workers * self.buffer_bytes


def _chunk_bounds(length, parts):
    sizes = [len(chunk) for chunk in np.array_split(np.arange(length), parts)]
    bounds = []
    start = 0
    for size in sizes:
        bounds.append((start, start + size))
        start += size
    return bounds


def ring_allreduce(buffers, wire_dtype=np.float16, stats=None):
    """
    average equal-length gradient buffers around a ring.

    the buffers are cut into N chunks. N - 1 scatter-reduce steps leave
    every worker owning one fully summed chunk; the sender of every hop
    rounds its partial sum to the wire type and the receiver adds its own
    contribution in FP32, so chunk c is summed in ring order c, c+1, ...
    The owner divides by N and N - 1 all-gather steps hand the wire-typed
    means to everybody, so all workers end with identical bytes.

    arguments:
    buffers -- one flat gradient buffer per worker
    wire_dtype -- payload type, FP16 for mixed precision
    stats -- optional RingStats filled with the payload accounting

    return:
    list of FP32 averaged buffers, one per worker
    """
    n = len(buffers)
    if n == 0:
        raise ShapeError("ring all-reduce needs at least one buffer")
    wire = [np.ravel(np.asarray(buffer)) for buffer in buffers]
    length = wire[0].size
    if any(buffer.size != length for buffer in wire):
        raise ShapeError("buffer lengths differ: {}".format([b.size for b in wire]))
    with np.errstate(over="ignore", invalid="ignore"):
        wire = [buffer.astype(wire_dtype) for buffer in wire]
    accum = [buffer.astype(np.float32) for buffer in wire]
    bounds = _chunk_bounds(length, n)
    if stats is not None:
        stats.__init__(n, length * np.dtype(wire_dtype).itemsize)

    def send(rank, payload):
        if stats is not None:
            stats.bytes_sent[rank] += payload.nbytes

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n - 1):
            messages = []
            for rank in range(n):
                start, stop = bounds[(rank - step) % n]
                payload = accum[rank][start:stop].astype(wire_dtype)
                send(rank, payload)
                messages.append(((rank + 1) % n, start, stop, payload))
            for destination, start, stop, payload in messages:
                accum[destination][start:stop] = (payload.astype(np.float32)
                        + accum[destination][start:stop])
            if stats is not None:
                stats.steps += 1

        results = [np.empty(length, dtype=np.float32) for _ in range(n)]
        means = []
        for rank in range(n):
            start, stop = bounds[(rank + 1) % n]
            mean = (accum[rank][start:stop] / np.float32(n)).astype(wire_dtype)
            results[rank][start:stop] = mean.astype(np.float32)
            means.append(mean)
        for step in range(n - 1):
            messages = []
            for rank in range(n):
                chunk = (rank + 1 - step) % n
                start, stop = bounds[chunk]
                payload = means[(chunk - 1) % n]
                send(rank, payload)
                messages.append(((rank + 1) % n, start, stop, payload))
            for destination, start, stop, payload in messages:
                results[destination][start:stop] = payload.astype(np.float32)
            if stats is not None:
                stats.steps += 1
    return results


class Worker(object):
    """
    one data parallel replica.

    arguments:
    rank -- ring position
    params -- its own MlstmParams replica
    adam -- its own AdamState, identical on every worker
    rows -- slice of the global batch rows it owns
    """
    def __init__(self, rank, params, adam, rows):
        self.rank = rank
        self.params = params
        self.adam = adam
        self.rows = rows
        self.state = HiddenState.zeros(rows.stop - rows.start,
                params.config.hidden_dim, params.precision)


class WorkerGroup(object):
    """
    N simulated workers plus the coordinator state.

    arguments:
    params -- MlstmParams cloned into every replica
    n_workers -- N, must divide the batch size
    batch_size -- global batch size B
    scaler -- LossScaleState owned by the coordinator
    policy -- LrPolicy
    initial_lr -- scaled initial learning rate
    adam -- AdamState cloned into every worker, fresh if None
    """
    def __init__(self, params, n_workers, batch_size, scaler, policy, initial_lr,
            adam=None, betas=(0.9, 0.999), eps=1e-8):
        if n_workers < 1 or batch_size % n_workers != 0:
            raise ShapeError("batch size {} is not divisible by {} workers".format(
                batch_size, n_workers))
        self.n_workers = n_workers
        self.batch_size = batch_size
        self.scaler = scaler
        self.policy = policy
        self.initial_lr = initial_lr
        if adam is None:
            adam = AdamState.for_params(params, betas[0], betas[1], eps)
        local = batch_size // n_workers
        self.workers = [Worker(rank, params.clone(), adam.copy(),
                slice(rank * local, (rank + 1) * local)) for rank in range(n_workers)]
        self.executor = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
        self.last_ring = RingStats()

    @property
    def params(self):
        return self.workers[0].params

    @property
    def adam(self):
        return self.workers[0].adam

    def state(self):
        """global hidden state, rows in batch order"""
        return HiddenState.concat([worker.state for worker in self.workers])

    def set_state(self, state):
        for worker in self.workers:
            worker.state = state.rows(worker.rows)

    def fingerprints(self):
        return [worker.params.fingerprint() for worker in self.workers]

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()
            self.executor = None

    def _map(self, function, items):
        if self.executor is None:
            return [function(item) for item in items]
        return list(self.executor.map(function, items))


def _local_step(worker, batch, alpha, normalizer):
    local = batch.rows(worker.rows)
    state = worker.state.reset_rows(local.reset_mask)
    logits, state, cache = forward_sequence(local.inputs, state, worker.params)
    loss, grads, overflow = loss_and_backward(logits, local.targets, cache, alpha,
            worker.params, active=local.active, normalizer=normalizer)
    worker.state = state
    return loss, grads, overflow


def parallel_train_step(group, batch, iteration, inject_overflow=None):
    """
    one synchronous data parallel iteration.

    arguments:
    group -- WorkerGroup
    batch -- the global Minibatch
    iteration -- schedule clock, advances on skipped updates too
    inject_overflow -- optional rank forced to report an overflow

    return:
    dict with loss, lr, alpha, skipped and the new alpha
    """
    n = group.n_workers
    alpha = group.scaler.alpha
    lr = lr_at(group.policy, group.initial_lr, iteration)
    positions = int(batch.active.sum()) * batch.inputs.shape[1]
    normalizer = max(positions, 1) / float(n)

    outputs = group._map(lambda worker: _local_step(worker, batch, alpha, normalizer),
            group.workers)
    losses = [output[0] for output in outputs]
    overflow = any(output[2] for output in outputs)
    if inject_overflow is not None:
        overflow = True
        logger.debug("overflow injected on worker {}".format(inject_overflow))

    reduced = None
    if not overflow:
        precision = group.params.precision
        wire_dtype = np.float16 if precision.is_mixed else np.float32
        stats = RingStats()
        reduced = ring_allreduce([output[1].flat() for output in outputs],
                wire_dtype=wire_dtype, stats=stats)
        group.last_ring = stats
        if not all(np.all(np.isfinite(buffer)) for buffer in reduced):
            logger.info("all-reduced gradient overflowed in transport")
            overflow = True

    decision, group.scaler = scaler_step(group.scaler, overflow)
    if decision == APPLY_UPDATE:
        config = group.params.config

        def update(worker):
            grads = SequenceGrads.from_flat(reduced[worker.rank], config)
            grads = unscale_master_grads(grads, alpha)
            adam_apply(worker.params, grads, worker.adam, lr)

        group._map(update, group.workers)

    fingerprints = group.fingerprints()
    if len(set(fingerprints)) != 1:
        raise ReplicaDivergenceError("replica parameters differ after iteration {}: {}"
                .format(iteration, [f[:12] for f in fingerprints]))

    loss = np.cumsum(np.asarray(losses, dtype=np.float32), dtype=np.float32)[-1] / np.float32(n)
    return {"loss": float(loss), "lr": lr, "alpha": alpha,
            "skipped": decision != APPLY_UPDATE, "next_alpha": group.scaler.alpha}


class IterationTiming(object):
    """
    measured seconds per iteration of one configuration.

    arguments:
    n_gpus -- number of workers
    seconds_per_iter -- mean iteration time
    label -- configuration name, rows with the same label share a baseline
    """
    def __init__(self, n_gpus, seconds_per_iter, label=""):
        if int(n_gpus) < 1 or not float(seconds_per_iter) > 0:
            raise ReportError("timings must be positive: {} gpus, {} s".format(
                n_gpus, seconds_per_iter))
        self.n_gpus = int(n_gpus)
        self.seconds_per_iter = float(seconds_per_iter)
        self.label = label


class SpeedupRow(object):
    def __init__(self, label, n_gpus, seconds_per_iter, speedup, efficiency):
        self.label = label
        self.n_gpus = n_gpus
        self.seconds_per_iter = seconds_per_iter
        self.speedup = speedup
        self.efficiency = efficiency


def speedup_report(timings, baseline=None):
    """
    relative speedup n t_1 / t_n and parallel efficiency speedup / n.

    arguments:
    timings -- list of IterationTiming
    baseline -- the single worker IterationTiming; when omitted the 1-gpu
                row of each label is used

    return:
    list of SpeedupRow in input order
    """
    baselines = {}
    for timing in timings:
        if timing.n_gpus == 1:
            baselines.setdefault(timing.label, timing)
    rows = []
    for timing in timings:
        base = baseline if baseline is not None else baselines.get(timing.label)
        if base is None:
            raise ReportError("no 1-gpu baseline for configuration {!r}".format(timing.label))
        speedup = timing.n_gpus * base.seconds_per_iter / timing.seconds_per_iter
        rows.append(SpeedupRow(timing.label, timing.n_gpus, timing.seconds_per_iter,
                speedup, speedup / timing.n_gpus))
    return rows


def read_timings(filename):
    """CSV with columns n_gpus, seconds_per_iter, label"""
    table = np.genfromtxt(filename, delimiter=",", names=True, dtype=None,
            encoding="utf-8", autostrip=True)
    table = np.atleast_1d(table)
    return [IterationTiming(row["n_gpus"], row["seconds_per_iter"], str(row["label"]))
            for row in table]


def write_speedup_report(filename, rows):
    with io.open(filename, "w", newline="", encoding="utf-8") as reportFile:
        writer = csv.writer(reportFile)
        writer.writerow(["label", "n_gpus", "seconds_per_iter", "speedup", "efficiency"])
        for row in rows:
            writer.writerow([row.label, row.n_gpus, "{:.4g}".format(row.seconds_per_iter),
                    "{:.1f}".format(row.speedup), "{:.3f}".format(row.efficiency)])
