import logging

import numpy as np
import pytest

from charscale.errors import ConfigError, ContractViolation
from charscale.model import SequenceGrads, PARAM_NAMES
from charscale.optimizer import (LrPolicy, scale_lr, lr_at, lr_table,
        stop_iteration, check_large_batch_regime, AdamState, adam_apply)


@pytest.mark.parametrize("batch, linear, sqrt", [
    (2048, 8e-3, 2e-3),
    (4096, 1.6e-2, 2.8e-3),
    (8192, 3.2e-2, 4e-3),
    (16384, 6.4e-2, 5.8e-3),
    (32768, 1.3e-1, 8e-3),
])
def test_scaled_rates_match_published_table(batch, linear, sqrt):
    assert scale_lr(LrPolicy(5e-4, "linear", batch)) == pytest.approx(linear, rel=0.03)
    assert scale_lr(LrPolicy(5e-4, "sqrt", batch)) == pytest.approx(sqrt, rel=0.03)


def test_scaled_rates_exact_values():
    assert scale_lr(LrPolicy(5e-4, "linear", 2048)) == pytest.approx(8e-3, rel=1e-12)
    assert scale_lr(LrPolicy(5e-4, "sqrt", 2048)) == pytest.approx(2e-3, rel=1e-12)
    assert scale_lr(LrPolicy(5e-4, "linear", 32768)) == pytest.approx(0.128, rel=1e-12)
    assert scale_lr(LrPolicy(5e-4, "none", 32768)) == 5e-4


def test_lr_table_rows():
    rows = lr_table(5e-4, [128, 2048])
    assert rows[0] == (128, "linear", pytest.approx(5e-4))
    assert [row[:2] for row in rows] == [(128, "linear"), (128, "sqrt"),
            (2048, "linear"), (2048, "sqrt")]


@pytest.mark.parametrize("iteration, expected", [
    (0, 3e-3), (50000, 1.5e-3), (100000, 0.0), (150000, 0.0)])
def test_linear_decay(iteration, expected):
    policy = LrPolicy(3e-3, "none", 128, decay_iters=100000)
    assert lr_at(policy, 3e-3, iteration) == pytest.approx(expected)


def test_decay_rejects_negative_iteration():
    with pytest.raises(ContractViolation):
        lr_at(LrPolicy(), 1e-3, -1)


@pytest.mark.parametrize("kwargs", [
    {"base_lr": 0.0}, {"rule": "cubic"}, {"batch_size": 0}, {"decay_iters": 0}])
def test_policy_validation(kwargs):
    with pytest.raises(ConfigError):
        LrPolicy(**kwargs)


def test_stop_at_decay_or_epochs():
    policy = LrPolicy(3e-3, "none", 128, decay_iters=100000, max_epochs=3)
    assert stop_iteration(policy, 20000) == 60000
    assert stop_iteration(policy, 50000) == 100000
    assert stop_iteration(LrPolicy(3e-3, "none", 128, 100000, max_epochs=1.5), 7) == 10
    assert stop_iteration(LrPolicy(3e-3, "none", 128, 100000, max_epochs=None), 7) == 100000


def test_large_batch_regime_advisory(caplog):
    with caplog.at_level(logging.WARNING):
        assert not check_large_batch_regime(128, 10 ** 7)
        assert not caplog.records
        assert check_large_batch_regime(32768, 900 * 32768)
        assert check_large_batch_regime(32768, 4999 * 32768, threshold=5000)
        assert not check_large_batch_regime(32768, 5000 * 32768, threshold=5000)
        assert check_large_batch_regime(500, 500)
    assert "N >> B" in caplog.text


def constant_grads(params, value):
    return SequenceGrads({name: np.full_like(t, value) for name, t in params.masters.items()})


def test_adam_first_step_closed_form(tiny_params):
    before = {name: t.copy() for name, t in tiny_params.masters.items()}
    state = AdamState.for_params(tiny_params)
    adam_apply(tiny_params, constant_grads(tiny_params, 0.5), state, 1e-3)
    assert state.t == 1
    for name in PARAM_NAMES:
        np.testing.assert_allclose(before[name] - tiny_params.masters[name], 1e-3,
                rtol=1e-3)
    assert tiny_params.check_row_norms() < 1e-2


def test_adam_zero_rate_keeps_masters(tiny_params):
    before = tiny_params.fingerprint()
    adam_apply(tiny_params, constant_grads(tiny_params, 0.5), AdamState.for_params(tiny_params),
            0.0)
    assert tiny_params.fingerprint() == before


def test_adam_rejects_non_finite(tiny_params):
    grads = constant_grads(tiny_params, 0.5)
    grads["dec_w"][0, 0] = np.nan
    with pytest.raises(ContractViolation):
        adam_apply(tiny_params, grads, AdamState.for_params(tiny_params), 1e-3)


def reference_adam(x, target, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = x - target
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g ** 2
        x = x - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    return x


def test_adam_matches_reference_on_quadratic_bowl(tiny_params):
    rng = np.random.default_rng(0)
    targets = {name: rng.normal(size=t.shape) for name, t in tiny_params.masters.items()}
    start = {name: t.astype(np.float64) for name, t in tiny_params.masters.items()}
    state = AdamState.for_params(tiny_params)
    for _ in range(10):
        grads = SequenceGrads({name: tiny_params.masters[name] - targets[name]
                for name in PARAM_NAMES})
        adam_apply(tiny_params, grads, state, 1e-2)
    for name in PARAM_NAMES:
        expected = reference_adam(start[name], targets[name], 10, 1e-2)
        np.testing.assert_allclose(tiny_params.masters[name], expected, atol=1e-5)
