"""
Adam on FP32 master parameters and the learning rate policy.
"""

import logging

import numpy as np

from charscale.errors import ContractViolation, ConfigError

logger = logging.getLogger(__name__)

REFERENCE_BATCH = 128
LR_RULES = ("none", "linear", "sqrt")


class LrPolicy(object):
    """
    initial learning rate scaling and linear decay to zero.

    arguments:
    base_lr -- learning rate at the reference batch of 128
    rule -- "none", "linear" (lr ~ B) or "sqrt" (lr ~ sqrt(B))
    batch_size -- global batch size B
    decay_iters -- iterations until the rate reaches zero
    max_epochs -- training stops after this many epochs if earlier
    """
    def __init__(self, base_lr=5e-4, rule="none", batch_size=REFERENCE_BATCH,
            decay_iters=100000, max_epochs=3):
        if not base_lr > 0:
            raise ConfigError("base_lr must be positive, got {}".format(base_lr))
        if rule not in LR_RULES:
            raise ConfigError("unknown lr rule {!r}, use one of {}".format(rule, LR_RULES))
        if int(batch_size) < 1:
            raise ConfigError("batch size must be at least 1")
        if int(decay_iters) < 1:
            raise ConfigError("decay_iters must be positive")
        self.base_lr = float(base_lr)
        self.rule = rule
        self.batch_size = int(batch_size)
        self.decay_iters = int(decay_iters)
        self.max_epochs = max_epochs


def scale_lr(policy):
    ratio = policy.batch_size / float(REFERENCE_BATCH)
    if policy.rule == "linear":
        return policy.base_lr * ratio
    elif policy.rule == "sqrt":
        return policy.base_lr * np.sqrt(ratio)
    return policy.base_lr


def lr_at(policy, initial_lr, iteration):
    """initial_lr * max(0, 1 - iteration / decay_iters)"""
    if iteration < 0:
        raise ContractViolation("iteration must be non-negative")
    return initial_lr * max(0.0, 1.0 - iteration / float(policy.decay_iters))


def lr_table(base_lr, batches, rules=("linear", "sqrt")):
    """
    scaled initial rates for a set of batch sizes.

    return:
    list of (batch, rule, lr) rows
    """
    rows = []
    for batch in batches:
        for rule in rules:
            rows.append((batch, rule, scale_lr(LrPolicy(base_lr, rule, batch))))
    return rows


def stop_iteration(policy, epoch_iterations):
    """
    training ends when the rate has decayed or after max_epochs epochs,
    whichever comes first. epoch_iterations is the exact minibatch count
    of one epoch, so a fractional max_epochs ends partway through the
    last epoch.
    """
    if policy.max_epochs is None:
        return policy.decay_iters
    return min(policy.decay_iters, int(policy.max_epochs * epoch_iterations))


def check_large_batch_regime(batch_size, n_sequences, threshold=1000):
    """
    advisory for the B << N condition of learning rate scaling.

    arguments:
    batch_size -- global batch size B
    n_sequences -- dataset size N in sequences
    threshold -- warn when N / B falls below this

    return:
    True when the warning was raised
    """
    if batch_size < 1 or n_sequences < 1:
        raise ContractViolation("batch size and dataset size must be positive")
    ratio = n_sequences / float(batch_size)
    if ratio < threshold:
        logger.warning("dataset holds only {:.0f} batches of {} sequences, "
                "learning rate scaling assumes N >> B".format(ratio, batch_size))
        return True
    return False


class AdamState(object):
    """
    moment estimates for every master tensor.

    arguments:
    shapes -- dict of master shapes
    beta1, beta2, eps -- Adam hyperparameters
    """
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8, t=0):
        self.m = {name: np.zeros(shape, dtype=np.float32) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape, dtype=np.float32) for name, shape in shapes.items()}
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = int(t)

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({name: tensor.shape for name, tensor in params.masters.items()},
                beta1, beta2, eps)

    def copy(self):
        other = AdamState({}, self.beta1, self.beta2, self.eps, self.t)
        other.m = {name: tensor.copy() for name, tensor in self.m.items()}
        other.v = {name: tensor.copy() for name, tensor in self.v.items()}
        return other


def adam_apply(params, grads, state, lr):
    """
    one bias-corrected Adam step on the FP32 masters, then the working
    copies are rebuilt from the updated masters.

    arguments:
    params -- MlstmParams, masters updated in place
    grads -- unscaled SequenceGrads, finite
    state -- AdamState, updated in place
    lr -- learning rate, >= 0
    """
    if lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    if not grads.all_finite():
        raise ContractViolation("adam_apply received non-finite gradients")
    state.t += 1
    beta1 = np.float32(state.beta1)
    beta2 = np.float32(state.beta2)
    correction1 = np.float32(1.0 - state.beta1 ** state.t)
    correction2 = np.float32(1.0 - state.beta2 ** state.t)
    eps = np.float32(state.eps)
    step = np.float32(lr)
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (np.float32(1) - beta1) * grad
        v *= beta2
        v += (np.float32(1) - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        params.masters[name] -= step * m_hat / (np.sqrt(v_hat) + eps)
    params.rebuild()
    return params, state
