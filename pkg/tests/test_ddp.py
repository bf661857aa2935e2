import numpy as np
import pytest

from charscale.errors import ShapeError, ReplicaDivergenceError, ReportError
from charscale.data import make_shards, MinibatchIterator
from charscale.ddp import (RingStats, ring_allreduce, WorkerGroup, parallel_train_step,
        IterationTiming, speedup_report, read_timings, write_speedup_report)
from charscale.model import (MlstmConfig, MlstmParams, HiddenState, SequenceGrads,
        forward_sequence, loss_and_backward)
from charscale.numerics import Precision
from charscale.optimizer import LrPolicy, AdamState, adam_apply
from charscale.scaler import LossScaleState, scaler_step, unscale_master_grads, APPLY_UPDATE

from conftest import make_records


def batches(batch_size, seq_len, count, seed=0):
    shards = make_shards(make_records(40, seed=seed), batch_size, "train", seed, 8)
    iterator = MinibatchIterator(shards, batch_size, seq_len)
    return [iterator.next_minibatch() for _ in range(count)]


def make_group(params, n_workers, batch_size=4, lr=1e-3):
    return WorkerGroup(params, n_workers, batch_size, LossScaleState(alpha=2.0 ** 10),
            LrPolicy(lr, "none", batch_size, decay_iters=1000), lr)


def test_single_worker_is_identity():
    values = np.array([1.5, -2.25, 3.0, 0.0], dtype=np.float32)
    result = ring_allreduce([values])
    assert len(result) == 1
    assert result[0].dtype == np.float32
    np.testing.assert_array_equal(result[0], values)


def test_four_worker_mean():
    buffers = [np.array([1, 2]), np.array([3, 4]), np.array([5, 6]), np.array([7, 8])]
    for result in ring_allreduce(buffers):
        np.testing.assert_array_equal(result, [4.0, 5.0])


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_ring_matches_float64_mean(n):
    rng = np.random.default_rng(n)
    buffers = [rng.normal(size=1001).astype(np.float32) for _ in range(n)]
    stats = RingStats()
    results = ring_allreduce(buffers, stats=stats)
    expected = np.mean([b.astype(np.float16).astype(np.float64) for b in buffers], axis=0)
    np.testing.assert_allclose(results[0], expected, rtol=1e-3, atol=5e-3)
    for other in results[1:]:
        assert other.tobytes() == results[0].tobytes()
    assert stats.steps == 2 * (n - 1)
    assert stats.buffer_bytes == 1001 * 2
    for sent in stats.bytes_sent:
        assert sent == pytest.approx(stats.expected_bytes(), rel=0.02)


def test_ring_payload_in_fp32():
    buffers = [np.full(6, 1.0 + 2.0 ** -20, dtype=np.float32) for _ in range(3)]
    stats = RingStats()
    results = ring_allreduce(buffers, wire_dtype=np.float32, stats=stats)
    assert results[0][0] == np.float32(1.0 + 2.0 ** -20)
    assert stats.bytes_sent == [32, 32, 32]


def test_ring_shape_mismatch():
    with pytest.raises(ShapeError):
        ring_allreduce([np.zeros(4), np.zeros(5)])
    with pytest.raises(ShapeError):
        ring_allreduce([])


def test_group_rejects_uneven_split(tiny_params):
    with pytest.raises(ShapeError):
        make_group(tiny_params, 3, batch_size=4)


def serial_step(params, adam, state, scaler, batch, lr):
    state = state.reset_rows(batch.reset_mask)
    logits, state, cache = forward_sequence(batch.inputs, state, params)
    positions = float(batch.active.sum() * batch.inputs.shape[1])
    loss, grads, overflow = loss_and_backward(logits, batch.targets, cache, scaler.alpha,
            params, active=batch.active, normalizer=positions)
    flat = grads.flat().astype(np.float16).astype(np.float32)
    overflow = overflow or not np.all(np.isfinite(flat))
    alpha = scaler.alpha
    decision, scaler = scaler_step(scaler, overflow)
    if decision == APPLY_UPDATE:
        grads = unscale_master_grads(SequenceGrads.from_flat(flat, params.config), alpha)
        adam_apply(params, grads, adam, lr)
    return state, scaler, loss


def test_one_worker_equals_serial_step(tiny_params):
    stream = batches(4, 6, 6)
    group = make_group(tiny_params, 1)
    params = tiny_params.clone()
    adam = AdamState.for_params(params)
    state = HiddenState.zeros(4, params.config.hidden_dim, params.precision)
    scaler = LossScaleState(alpha=2.0 ** 10)
    for iteration, batch in enumerate(stream):
        result = parallel_train_step(group, batch, iteration)
        state, scaler, loss = serial_step(params, adam, state, scaler, batch, result["lr"])
        assert result["loss"] == float(np.float32(loss))
        assert group.params.fingerprint() == params.fingerprint()
        assert group.state().h.tobytes() == state.h.tobytes()
        assert group.scaler == scaler


def long_stream(batch_size, seq_len, count, seed=0):
    shards = make_shards(make_records(200, seed=seed, words=12), batch_size, "train", seed, 8)
    iterator = MinibatchIterator(shards, batch_size, seq_len)
    stream = []
    while len(stream) < count:
        batch = iterator.next_minibatch()
        if batch is None:
            iterator.restart()
            continue
        stream.append(batch)
    return stream


@pytest.mark.parametrize("n", [2, 4, 8])
def test_workers_track_single_worker(n):
    params = MlstmParams.init(MlstmConfig(16, 8, 8), seed=5, precision=Precision("mixed", "blas"))
    single = make_group(params, 1, batch_size=8)
    multi = make_group(params, n, batch_size=8)
    try:
        for iteration, batch in enumerate(long_stream(8, 8, 100)):
            a = parallel_train_step(single, batch, iteration)
            b = parallel_train_step(multi, batch, iteration)
            assert not a["skipped"] and not b["skipped"]
            assert len(set(multi.fingerprints())) == 1
        assert multi.last_ring.n_workers == n
        assert multi.adam.t == single.adam.t == 100
        for name, tensor in single.params.masters.items():
            difference = np.linalg.norm(multi.params.masters[name] - tensor)
            assert difference <= 1e-3 * np.linalg.norm(tensor), name
    finally:
        single.close()
        multi.close()


def test_injected_overflow_skips_everywhere(tiny_params):
    group = make_group(tiny_params, 2)
    before = group.fingerprints()
    result = parallel_train_step(group, batches(4, 6, 1)[0], 0, inject_overflow=1)
    group.close()
    assert result["skipped"]
    assert result["next_alpha"] == result["alpha"] / 2
    assert group.fingerprints() == before
    assert all(worker.adam.t == 0 for worker in group.workers)


def test_corrupted_replica_detected(tiny_params):
    group = make_group(tiny_params, 2)
    group.workers[1].params.masters["dec_b"][0] += 1.0
    with pytest.raises(ReplicaDivergenceError):
        parallel_train_step(group, batches(4, 6, 1)[0], 0)
    group.close()


def published_timings():
    rows = [(1, 0.81, "4096"), (8, 0.85, "4096"), (32, 1.11, "4096"),
            (128, 1.12, "4096"), (1, 2.01, "8192"), (8, 2.02, "8192"),
            (16, 2.08, "8192"), (32, 2.05, "8192"), (64, 2.10, "8192"),
            (128, 2.13, "8192")]
    return [IterationTiming(n, t, label) for n, t, label in rows]


def test_speedup_rows():
    rows = speedup_report(published_timings())
    speedups = [round(row.speedup, 2) for row in rows]
    assert speedups == [1.0, 7.62, 23.35, 92.57, 1.0, 7.96, 15.46, 31.38, 61.26, 120.79]
    assert rows[3].efficiency == pytest.approx(92.57 / 128, abs=1e-4)


def test_speedup_with_infiniband_times():
    timings = [IterationTiming(1, 0.81), IterationTiming(64, 0.93),
               IterationTiming(128, 0.91)]
    rows = speedup_report(timings)
    assert rows[1].speedup == pytest.approx(55.7, abs=0.5)
    assert rows[2].speedup == pytest.approx(113.9, abs=0.1)


def test_speedup_needs_baseline():
    with pytest.raises(ReportError):
        speedup_report([IterationTiming(8, 0.85, "a")])
    rows = speedup_report([IterationTiming(8, 0.85, "a")], baseline=IterationTiming(1, 0.81))
    assert rows[0].speedup == pytest.approx(7.62, abs=0.01)
    with pytest.raises(ReportError):
        IterationTiming(4, 0.0)


def test_timing_csv_round_trip(tmp_path):
    source = tmp_path / "timings.csv"
    source.write_text(u"n_gpus,seconds_per_iter,label\n1,0.81,ib\n64,0.93,ib\n",
            encoding="utf-8")
    timings = read_timings(str(source))
    assert [(t.n_gpus, t.seconds_per_iter, t.label) for t in timings] == [
            (1, 0.81, "ib"), (64, 0.93, "ib")]
    report = tmp_path / "speedup.csv"
    write_speedup_report(str(report), speedup_report(timings))
    lines = report.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "label,n_gpus,seconds_per_iter,speedup,efficiency"
    assert lines[2] == "ib,64,0.93,55.7,0.871"
