"""
automatic loss scaling.

the loss is multiplied by alpha before backpropagation. An overflow in the
weight gradients skips the update and halves alpha, a run of
growth_interval clean updates doubles it.
"""

import logging
import math

import numpy as np

from charscale.errors import ContractViolation, ConfigError

logger = logging.getLogger(__name__)

SKIP_UPDATE = "SkipUpdate"
APPLY_UPDATE = "ApplyUpdate"


def _is_power_of_two(value):
    mantissa, _ = math.frexp(value)
    return value > 0 and mantissa == 0.5


class LossScaleState(object):
    """
    state of the loss scale state machine.

    arguments:
    alpha -- current scale, a power of two
    growth_interval -- clean updates needed before alpha grows
    alpha_min, alpha_max -- clamps, powers of two
    dynamic -- False keeps alpha fixed (overflow still skips the update)
    """
    backoff_factor = 2.0
    growth_factor = 2.0

    def __init__(self, alpha=2.0 ** 16, growth_interval=2000, alpha_min=1.0,
            alpha_max=2.0 ** 24, clean_steps=0, dynamic=True):
        alpha, alpha_min, alpha_max = float(alpha), float(alpha_min), float(alpha_max)
        for name, value in (("alpha", alpha), ("alpha_min", alpha_min),
                ("alpha_max", alpha_max)):
            if not _is_power_of_two(value):
                raise ConfigError("{} must be a power of two, got {}".format(name, value))
        if not alpha_min <= alpha <= alpha_max:
            raise ConfigError("alpha {} outside [{}, {}]".format(alpha, alpha_min, alpha_max))
        if int(growth_interval) < 1:
            raise ConfigError("growth_interval must be positive")
        if int(clean_steps) < 0:
            raise ConfigError("clean_steps must be non-negative")
        self.alpha = alpha
        self.growth_interval = int(growth_interval)
        self.alpha_min = alpha_min
        self.alpha_max = alpha_max
        self.clean_steps = int(clean_steps)
        self.dynamic = bool(dynamic)

    @classmethod
    def static(cls, alpha=1.0):
        return cls(alpha=alpha, alpha_min=alpha, alpha_max=alpha, dynamic=False)

    def copy(self):
        return LossScaleState(self.alpha, self.growth_interval, self.alpha_min,
                self.alpha_max, self.clean_steps, self.dynamic)

    def state_dict(self):
        return {"alpha": self.alpha, "growth_interval": self.growth_interval,
                "alpha_min": self.alpha_min, "alpha_max": self.alpha_max,
                "clean_steps": self.clean_steps, "dynamic": self.dynamic}

    @classmethod
    def from_state_dict(cls, state):
        return cls(**state)

    def __eq__(self, other):
        return isinstance(other, LossScaleState) and self.state_dict() == other.state_dict()

    def __repr__(self):
        return "LossScaleState(alpha={:g}, clean_steps={})".format(
            self.alpha, self.clean_steps)


def scaler_step(state, overflow):
    """
    advance the state machine by one iteration.

    arguments:
    state -- LossScaleState, not modified
    overflow -- whether any worker saw a non-finite weight gradient

    return:
    (SKIP_UPDATE or APPLY_UPDATE, the updated LossScaleState)
    """
    new = state.copy()
    if overflow:
        new.clean_steps = 0
        if new.dynamic:
            new.alpha = max(new.alpha / new.backoff_factor, new.alpha_min)
            logger.info("gradient overflow, loss scale {:g} -> {:g}".format(
                state.alpha, new.alpha))
            if new.alpha == new.alpha_min and state.alpha == new.alpha_min:
                logger.warning("loss scale pinned at its minimum {:g}".format(new.alpha_min))
        return SKIP_UPDATE, new

    new.clean_steps += 1
    if new.clean_steps >= new.growth_interval:
        new.clean_steps = 0
        if new.dynamic:
            new.alpha = min(new.alpha * new.growth_factor, new.alpha_max)
            logger.info("loss scale grows {:g} -> {:g}".format(state.alpha, new.alpha))
    return APPLY_UPDATE, new


def unscale_master_grads(grads, alpha):
    """
    divide every FP32 master gradient by alpha.

    arguments:
    grads -- SequenceGrads, finite
    alpha -- loss scale, > 0

    return:
    new SequenceGrads
    """
    if not alpha > 0:
        raise ContractViolation("loss scale must be positive, got {}".format(alpha))
    if not grads.all_finite():
        raise ContractViolation("unscaling non-finite gradients, the overflow "
                "should have been handled by scaler_step")
    scale = np.float32(alpha)
    return type(grads)({name: tensor / scale for name, tensor in grads.items()})
