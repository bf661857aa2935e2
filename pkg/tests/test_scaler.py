import math

import numpy as np
import pytest

from charscale.errors import ConfigError, ContractViolation
from charscale.model import SequenceGrads
from charscale.optimizer import AdamState, adam_apply
from charscale.scaler import (LossScaleState, scaler_step, unscale_master_grads,
        SKIP_UPDATE, APPLY_UPDATE)


def test_overflow_skips_and_halves():
    decision, state = scaler_step(LossScaleState(alpha=2.0 ** 16), True)
    assert decision == SKIP_UPDATE
    assert state.alpha == 2.0 ** 15
    assert state.clean_steps == 0


def test_growth_after_interval():
    state = LossScaleState(alpha=2.0 ** 14, growth_interval=2000, clean_steps=1999)
    decision, state = scaler_step(state, False)
    assert decision == APPLY_UPDATE
    assert state.alpha == 2.0 ** 15
    assert state.clean_steps == 0


def test_alpha_clamped_at_minimum(caplog):
    state = LossScaleState(alpha=1.0, alpha_min=1.0)
    decision, state = scaler_step(state, True)
    assert decision == SKIP_UPDATE
    assert state.alpha == 1.0
    assert "minimum" in caplog.text


def test_step_does_not_mutate_input():
    state = LossScaleState(alpha=2.0 ** 10, clean_steps=5)
    scaler_step(state, True)
    assert state.alpha == 2.0 ** 10 and state.clean_steps == 5


def test_static_scaler_never_moves():
    state = LossScaleState.static(1.0)
    decision, state = scaler_step(state, True)
    assert decision == SKIP_UPDATE and state.alpha == 1.0
    for _ in range(3 * state.growth_interval):
        decision, state = scaler_step(state, False)
    assert decision == APPLY_UPDATE and state.alpha == 1.0


@pytest.mark.parametrize("kwargs", [
    {"alpha": 3.0},
    {"alpha": 2.0 ** 30},
    {"alpha_min": 0.75},
    {"growth_interval": 0},
])
def test_invalid_states_rejected(kwargs):
    with pytest.raises(ConfigError):
        LossScaleState(**kwargs)


def test_state_dict_round_trip():
    state = LossScaleState(alpha=2.0 ** 12, growth_interval=7, clean_steps=3)
    assert LossScaleState.from_state_dict(state.state_dict()) == state


def test_random_event_sequences():
    """model check against a plain restatement of the rules"""
    rng = np.random.default_rng(0)
    for _ in range(100000 // 50):
        interval = int(rng.integers(1, 6))
        alpha_min = 2.0 ** int(rng.integers(0, 4))
        alpha_max = 2.0 ** int(rng.integers(10, 14))
        state = LossScaleState(alpha=2.0 ** 8, growth_interval=interval,
                alpha_min=alpha_min, alpha_max=alpha_max)
        alpha, clean = 2.0 ** 8, 0
        for overflow in (rng.random(50) < rng.random()).tolist():
            decision, state = scaler_step(state, overflow)
            if overflow:
                alpha, clean = max(alpha / 2, alpha_min), 0
                assert decision == SKIP_UPDATE
            else:
                clean += 1
                if clean == interval:
                    alpha, clean = min(alpha * 2, alpha_max), 0
                assert decision == APPLY_UPDATE
            assert state.alpha == alpha and state.clean_steps == clean
            assert alpha_min <= state.alpha <= alpha_max
            mantissa, _ = math.frexp(state.alpha)
            assert mantissa == 0.5


def test_skipped_update_leaves_masters_unchanged(tiny_params):
    before = tiny_params.fingerprint()
    adam = AdamState.for_params(tiny_params)
    decision, _ = scaler_step(LossScaleState(), True)
    if decision == APPLY_UPDATE:
        adam_apply(tiny_params, SequenceGrads.zeros_like(tiny_params), adam, 1e-3)
    assert tiny_params.fingerprint() == before
    assert adam.t == 0


def test_unscale(tiny_params):
    grads = SequenceGrads({name: np.full_like(t, 2.0) for name, t in tiny_params.masters.items()})
    halved = unscale_master_grads(grads, 2.0)
    assert all(np.all(t == 1.0) for _, t in halved.items())
    same = unscale_master_grads(grads, 1.0)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(same.items(), grads.items()))


def test_unscale_rejects_non_finite(tiny_params):
    grads = SequenceGrads.zeros_like(tiny_params)
    grads["b"][0] = np.inf
    with pytest.raises(ContractViolation):
        unscale_master_grads(grads, 2.0)
    with pytest.raises(ContractViolation):
        unscale_master_grads(SequenceGrads.zeros_like(tiny_params), 0.0)
