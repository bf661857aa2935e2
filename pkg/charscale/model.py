"""
multiplicative LSTM character language model.

    m = (x Wmx^T) * (h_prev Wmh^T)
    z = x Wih^T + m Whm^T + b,   z -> (i, f, o, u)
    c = sigmoid(f) * c_prev + sigmoid(i) * tanh(u)
    h = sigmoid(o) * tanh(c)
    logits = h Wdec^T + bdec

The four matrices Wmx, Wmh, Wih, Whm are weight normalized per output row,
w_i = g_i v_i / |v_i|. Embedding, decoder and biases are not. Inputs and
outputs are rows of a [batch x width] matrix. In mixed precision every
matrix operand is FP16, c and the logits are FP32.
"""

import hashlib
import logging

import numpy as np
from scipy.special import expit, logsumexp

from charscale.errors import (ShapeError, ContractViolation,
        SingularParameterError, NonFiniteStateError, ConfigError)
from charscale.numerics import Precision

logger = logging.getLogger(__name__)

VOCAB_SIZE = 256

NORMALIZED = ("mx", "mh", "ih", "hm")

PARAM_NAMES = ("mx_v", "mx_g", "mh_v", "mh_g", "ih_v", "ih_g", "hm_v", "hm_g",
               "b", "embed", "dec_w", "dec_b")


class MlstmConfig(object):
    """
    dimensions of an mLSTM language model.

    arguments:
    hidden_dim -- width h of the mLSTM
    embed_dim -- width e of the byte embedding
    seq_len -- length of one TBTT window
    vocab_size -- fixed at 256 byte tokens
    """
    def __init__(self, hidden_dim=256, embed_dim=64, seq_len=256,
            vocab_size=VOCAB_SIZE):
        for name, value in (("hidden_dim", hidden_dim), ("embed_dim", embed_dim),
                ("seq_len", seq_len)):
            if int(value) < 1:
                raise ConfigError("{} must be positive, got {}".format(name, value))
        if vocab_size != VOCAB_SIZE:
            raise ConfigError("vocab_size is fixed at {}".format(VOCAB_SIZE))
        self.hidden_dim = int(hidden_dim)
        self.embed_dim = int(embed_dim)
        self.seq_len = int(seq_len)
        self.vocab_size = VOCAB_SIZE

    def shapes(self):
        """master tensor shape of every parameter, in PARAM_NAMES order"""
        h, e, v = self.hidden_dim, self.embed_dim, self.vocab_size
        return {
            "mx_v": (h, e), "mx_g": (h,),
            "mh_v": (h, h), "mh_g": (h,),
            "ih_v": (4 * h, e), "ih_g": (4 * h,),
            "hm_v": (4 * h, h), "hm_g": (4 * h,),
            "b": (4 * h,),
            "embed": (v, e),
            "dec_w": (v, h), "dec_b": (v,),
        }

    def __eq__(self, other):
        return isinstance(other, MlstmConfig) and vars(self) == vars(other)

    def __repr__(self):
        return "MlstmConfig(hidden_dim={}, embed_dim={}, seq_len={})".format(
            self.hidden_dim, self.embed_dim, self.seq_len)


def parameter_count(config):
    return int(sum(np.prod(shape) for shape in config.shapes().values()))


def parameter_bytes(config, precision="mixed"):
    """bytes taken by the working copy of every parameter"""
    storage = Precision(precision).storage
    return parameter_count(config) * np.dtype(storage).itemsize


def weight_norm_build(v, g, precision=None):
    """
    effective weight-normalized matrix w_i = g_i v_i / |v_i|.

    the squared sum of every row is accumulated in FP32 (left to right),
    the norm is rounded to the storage type and the result stored.

    arguments:
    v -- direction matrix, one row per output
    g -- gain vector, one entry per row
    precision -- Precision policy, mixed by default

    return:
    the stored effective matrix (TensorF16 in mixed precision)
    """
    w, _ = _weight_norm(v, g, precision or Precision("mixed"))
    return w


def _weight_norm(v, g, precision):
    v = np.asarray(v)
    g = np.ravel(np.asarray(g))
    if v.ndim != 2 or g.size != v.shape[0]:
        raise ShapeError("need one gain per row: v {} g {}".format(v.shape, g.shape))
    squares = precision.row_sq_norms(v)
    if np.any(squares == 0):
        rows = np.flatnonzero(squares == 0)
        raise SingularParameterError("zero-norm direction rows: {}".format(rows[:8].tolist()))
    norm = precision.widen(precision.store(np.sqrt(squares)))
    stored_v = precision.widen(precision.store(v))
    stored_g = precision.widen(precision.store(g))
    with np.errstate(over="ignore", invalid="ignore"):
        w = precision.store(stored_g[:, None] * stored_v / norm[:, None])
    return w, norm


class MlstmParams(object):
    """
    parameter set with FP32 masters and working copies.

    arguments:
    config -- MlstmConfig
    masters -- dict of FP32 master tensors keyed by PARAM_NAMES
    precision -- Precision policy deciding the working copy type
    """
    def __init__(self, config, masters, precision=None):
        self.config = config
        self.precision = precision or Precision("mixed")
        shapes = config.shapes()
        missing = [name for name in PARAM_NAMES if name not in masters]
        if missing:
            raise ShapeError("missing parameters: {}".format(missing))
        self.masters = {}
        for name in PARAM_NAMES:
            tensor = np.array(masters[name], dtype=np.float32)
            if tensor.shape != shapes[name]:
                raise ShapeError("{} has shape {}, expected {}".format(
                    name, tensor.shape, shapes[name]))
            self.masters[name] = tensor
        self.working = {}
        self.effective = {}
        self.norms = {}
        self.rebuild()

    @classmethod
    def init(cls, config, seed=0, precision=None):
        """
        seeded initialization: directions uniform in +-1/sqrt(fan_in), gains
        equal to the row norms so effective weights start equal to v,
        biases zero.
        """
        rng = np.random.default_rng(seed)
        shapes = config.shapes()
        masters = {}
        for name in NORMALIZED:
            rows, fan_in = shapes[name + "_v"]
            bound = 1.0 / np.sqrt(fan_in)
            v = rng.uniform(-bound, bound, size=(rows, fan_in))
            masters[name + "_v"] = v.astype(np.float32)
            masters[name + "_g"] = np.sqrt(np.sum(v * v, axis=1)).astype(np.float32)
        masters["b"] = np.zeros(shapes["b"], dtype=np.float32)
        bound = 1.0 / np.sqrt(config.embed_dim)
        masters["embed"] = rng.uniform(-bound, bound, size=shapes["embed"]).astype(np.float32)
        bound = 1.0 / np.sqrt(config.hidden_dim)
        masters["dec_w"] = rng.uniform(-bound, bound, size=shapes["dec_w"]).astype(np.float32)
        masters["dec_b"] = np.zeros(shapes["dec_b"], dtype=np.float32)
        return cls(config, masters, precision)

    def rebuild(self):
        """
        recompute working copies and effective weights from the masters.
        only called at synchronization points.
        """
        precision = self.precision
        for name in PARAM_NAMES:
            self.working[name] = precision.store(self.masters[name])
        for name in NORMALIZED:
            self.effective[name], self.norms[name] = _weight_norm(
                self.masters[name + "_v"], self.masters[name + "_g"], precision)

    def check_row_norms(self, rtol=1e-3):
        """
        verify |w_i| = |g_i| on every normalized matrix.

        return:
        the largest relative deviation seen
        """
        worst = 0.0
        for name in NORMALIZED:
            w = self.effective[name].astype(np.float64)
            g = np.abs(self.working[name + "_g"].astype(np.float64))
            norms = np.sqrt(np.sum(w * w, axis=1))
            scale = np.maximum(g, np.finfo(np.float32).tiny)
            worst = max(worst, float(np.max(np.abs(norms - g) / scale)))
        if worst > rtol:
            logger.warning("weight norm rows deviate by {:.3g}".format(worst))
        return worst

    def fingerprint(self):
        """SHA-256 over the master bytes in PARAM_NAMES order"""
        digest = hashlib.sha256()
        for name in PARAM_NAMES:
            digest.update(np.ascontiguousarray(self.masters[name]).tobytes())
        return digest.hexdigest()

    def clone(self):
        return MlstmParams(self.config,
                {name: tensor.copy() for name, tensor in self.masters.items()},
                self.precision)

    def with_precision(self, precision):
        return MlstmParams(self.config, self.masters, precision)


class HiddenState(object):
    """
    recurrent state carried across TBTT windows.

    arguments:
    h -- hidden output [batch x hidden] in the storage type
    c -- cell state [batch x hidden] in the accumulation type
    """
    def __init__(self, h, c):
        if h.shape != c.shape or h.ndim != 2:
            raise ShapeError("h {} and c {} must be matching 2-d tensors".format(
                h.shape, c.shape))
        self.h = h
        self.c = c

    @classmethod
    def zeros(cls, batch, hidden, precision):
        return cls(np.zeros((batch, hidden), dtype=precision.storage),
                   np.zeros((batch, hidden), dtype=precision.accum))

    @property
    def batch(self):
        return self.h.shape[0]

    def reset_rows(self, mask):
        """zero the rows flagged in mask, return a new state"""
        mask = np.asarray(mask, dtype=bool)
        h = self.h.copy()
        c = self.c.copy()
        h[mask] = 0
        c[mask] = 0
        return HiddenState(h, c)

    def rows(self, index):
        return HiddenState(self.h[index].copy(), self.c[index].copy())

    @staticmethod
    def concat(states):
        return HiddenState(np.concatenate([s.h for s in states]),
                           np.concatenate([s.c for s in states]))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.c)))


class SequenceGrads(object):
    """
    one gradient tensor per master parameter, FP32.
    """
    def __init__(self, tensors):
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float32)
                for name in PARAM_NAMES}

    @classmethod
    def zeros_like(cls, params):
        return cls({name: np.zeros_like(params.masters[name]) for name in PARAM_NAMES})

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return [(name, self.tensors[name]) for name in PARAM_NAMES]

    def all_finite(self):
        return all(np.all(np.isfinite(tensor)) for tensor in self.tensors.values())

    def flat(self):
        return np.concatenate([self.tensors[name].ravel() for name in PARAM_NAMES])

    @classmethod
    def from_flat(cls, flat, config):
        shapes = config.shapes()
        expected = parameter_count(config)
        if len(flat) != expected:
            raise ShapeError("flat gradient has {} entries, expected {}".format(
                len(flat), expected))
        tensors = {}
        offset = 0
        for name in PARAM_NAMES:
            size = int(np.prod(shapes[name]))
            tensors[name] = np.asarray(flat[offset:offset + size],
                    dtype=np.float32).reshape(shapes[name])
            offset += size
        return cls(tensors)


class SequenceCache(object):
    """
    activations of one forward_sequence call kept for the backward pass.
    arrays are time major: [seq_len, batch, width].
    """
    def __init__(self, tokens, x, h_prev, c_prev, mx, mh, m, gates, tanh_c, h):
        self.tokens = tokens
        self.x = x
        self.h_prev = h_prev
        self.c_prev = c_prev
        self.mx = mx
        self.mh = mh
        self.m = m
        self.gates = gates
        self.tanh_c = tanh_c
        self.h = h


def _check_state(state, batch, hidden):
    if state.h.shape != (batch, hidden):
        raise ShapeError("state {} does not match batch {} x hidden {}".format(
            state.h.shape, batch, hidden))
    if not state.is_finite():
        bad = np.flatnonzero(~(np.all(np.isfinite(state.h), axis=1)
                               & np.all(np.isfinite(state.c), axis=1)))
        raise NonFiniteStateError("non-finite hidden state in rows {}".format(
            bad[:8].tolist()))


def _step(xm, xz, state, params):
    """
    one recurrence step given the input projections x Wmx^T and x Wih^T.
    """
    precision = params.precision
    hidden = params.config.hidden_dim
    with np.errstate(over="ignore", invalid="ignore"):
        mx = precision.store(xm)
        mh = precision.store(precision.matmul(state.h, params.effective["mh"].T))
        m = precision.store(precision.widen(mx) * precision.widen(mh))
        z = xz + precision.matmul(m, params.effective["hm"].T)
        z = z + precision.widen(params.working["b"])
        i = expit(z[:, :hidden])
        f = expit(z[:, hidden:2 * hidden])
        o = expit(z[:, 2 * hidden:3 * hidden])
        u = np.tanh(z[:, 3 * hidden:])
        c = f * state.c + i * u
        tanh_c = np.tanh(c)
        h = precision.store(o * tanh_c)
    cache = {"mx": mx, "mh": mh, "m": m, "gates": (i, f, o, u), "tanh_c": tanh_c}
    return HiddenState(h, c.astype(precision.accum)), cache


def mlstm_cell(x, state, params):
    """
    one mLSTM step.

    arguments:
    x -- embedded input [batch x embed]
    state -- HiddenState before the step
    params -- MlstmParams

    return:
    (new HiddenState, cache of the pre- and post-activations)
    """
    precision = params.precision
    x = precision.store(x)
    if x.ndim != 2 or x.shape[1] != params.config.embed_dim:
        raise ShapeError("input {} does not match embed_dim {}".format(
            x.shape, params.config.embed_dim))
    _check_state(state, x.shape[0], params.config.hidden_dim)
    xm = precision.matmul(x, params.effective["mx"].T)
    xz = precision.matmul(x, params.effective["ih"].T)
    new_state, cache = _step(xm, xz, state, params)
    cache["x"] = x
    cache["h_prev"] = state.h
    cache["c_prev"] = state.c
    return new_state, cache


def _check_tokens(tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError("tokens must be [batch x seq_len], got {}".format(tokens.shape))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB_SIZE):
        raise ContractViolation("token ids must lie in [0, {})".format(VOCAB_SIZE))
    return tokens.astype(np.int64)


def _decode(h_flat, params):
    precision = params.precision
    logits = precision.matmul(h_flat, params.working["dec_w"].T)
    return (logits + precision.widen(params.working["dec_b"])).astype(
        np.float64 if precision.mode == "fp64" else np.float32)


def forward_sequence(tokens, state, params, keep_cache=True):
    """
    unroll the cell over a window of byte tokens.

    arguments:
    tokens -- [batch x seq_len] byte ids
    state -- HiddenState entering the window
    params -- MlstmParams
    keep_cache -- keep activations for loss_and_backward

    return:
    (logits [batch x seq_len x 256] FP32, final HiddenState, cache or None)
    """
    tokens = _check_tokens(tokens)
    precision = params.precision
    config = params.config
    batch, steps = tokens.shape
    hidden = config.hidden_dim
    _check_state(state, batch, hidden)

    # time major: row t * batch + j is token (j, t)
    x = params.working["embed"][tokens.T.ravel()]
    xm_all = precision.matmul(x, params.effective["mx"].T).reshape(steps, batch, hidden)
    xz_all = precision.matmul(x, params.effective["ih"].T).reshape(steps, batch, 4 * hidden)

    hs = np.empty((steps, batch, hidden), dtype=precision.storage)
    if keep_cache:
        h_prev = np.empty_like(hs)
        c_prev = np.empty((steps, batch, hidden), dtype=precision.accum)
        mx = np.empty_like(hs)
        mh = np.empty_like(hs)
        m = np.empty_like(hs)
        gates = np.empty((steps, 4, batch, hidden), dtype=precision.accum)
        tanh_c = np.empty((steps, batch, hidden), dtype=precision.accum)

    current = HiddenState(state.h.copy(), state.c.copy())
    for t in range(steps):
        following, step_cache = _step(xm_all[t], xz_all[t], current, params)
        if keep_cache:
            h_prev[t] = current.h
            c_prev[t] = current.c
            mx[t] = step_cache["mx"]
            mh[t] = step_cache["mh"]
            m[t] = step_cache["m"]
            gates[t] = np.stack(step_cache["gates"])
            tanh_c[t] = step_cache["tanh_c"]
        hs[t] = following.h
        current = following

    logits = _decode(hs.reshape(steps * batch, hidden), params)
    logits = logits.reshape(steps, batch, VOCAB_SIZE).transpose(1, 0, 2)
    cache = None
    if keep_cache:
        cache = SequenceCache(tokens, x, h_prev, c_prev, mx, mh, m, gates, tanh_c, hs)
    return np.ascontiguousarray(logits), current, cache


def encode(tokens, state, params):
    """
    run the recurrence only, no decoder and no cache.

    return:
    final HiddenState
    """
    tokens = _check_tokens(tokens)
    precision = params.precision
    batch, steps = tokens.shape
    hidden = params.config.hidden_dim
    _check_state(state, batch, hidden)
    x = params.working["embed"][tokens.T.ravel()]
    xm_all = precision.matmul(x, params.effective["mx"].T).reshape(steps, batch, hidden)
    xz_all = precision.matmul(x, params.effective["ih"].T).reshape(steps, batch, 4 * hidden)
    current = state
    for t in range(steps):
        current, _ = _step(xm_all[t], xz_all[t], current, params)
    return current


def token_losses(logits, targets):
    """
    per position softmax cross entropy in nats, computed on FP32 logits.

    arguments:
    logits -- [batch x seq_len x 256]
    targets -- [batch x seq_len] byte ids

    return:
    [batch x seq_len] losses
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:2] != targets.shape:
        raise ShapeError("logits {} and targets {} disagree".format(
            logits.shape, targets.shape))
    normalizer = logsumexp(logits, axis=-1)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return (normalizer - picked).astype(logits.dtype)


def _col_sum(array, dtype):
    """column sums accumulated top to bottom"""
    return np.cumsum(np.asarray(array, dtype=dtype), axis=0, dtype=dtype)[-1]


def _row_dot(a, b, dtype):
    return np.cumsum(a * b, axis=1, dtype=dtype)[:, -1]


def loss_and_backward(logits, targets, cache, alpha, params, active=None,
        normalizer=None):
    """
    mean cross entropy and the alpha-scaled backward pass.

    arguments:
    logits -- FP32 logits from forward_sequence
    targets -- inputs shifted by one byte, [batch x seq_len]
    cache -- SequenceCache from forward_sequence
    alpha -- loss scale, >= 1
    params -- the MlstmParams used in the forward pass
    active -- optional per-row flags; inactive rows do not count
    normalizer -- divisor of the summed loss, the number of active
                  positions by default. A data parallel worker passes the
                  global count divided by the number of workers so the
                  averaged gradient is the global mean.

    return:
    (loss in nats, SequenceGrads scaled by alpha, overflow flag)
    """
    if alpha < 1:
        raise ContractViolation("loss scale must be >= 1, got {}".format(alpha))
    precision = params.precision
    accum = precision.accum
    config = params.config
    hidden = config.hidden_dim
    batch, steps = cache.tokens.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (batch, steps):
        raise ShapeError("targets {} do not match window {}".format(
            targets.shape, (batch, steps)))
    if active is None:
        active = np.ones(batch, dtype=bool)
    active = np.asarray(active, dtype=bool)
    weights = np.repeat(active[:, None], steps, axis=1)
    count = int(weights.sum())

    losses = token_losses(logits, targets)
    if count == 0:
        return accum(0.0), SequenceGrads.zeros_like(params), False
    if normalizer is None:
        normalizer = count
    loss = precision.reduce(losses[weights]) / accum(normalizer)

    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        probs = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        probs[np.arange(batch)[:, None], np.arange(steps)[None, :], targets] -= 1
        scale = accum(alpha) / accum(normalizer)
        dlogits = precision.store(probs * (weights[..., None] * scale))
        # time major to match the cache layout
        dlogits = dlogits.transpose(1, 0, 2).reshape(steps * batch, VOCAB_SIZE)
        h_flat = cache.h.reshape(steps * batch, hidden)

        grads = {}
        grads["dec_w"] = precision.matmul(dlogits.T, h_flat)
        grads["dec_b"] = _col_sum(precision.widen(dlogits), accum)
        dh_out = precision.matmul(dlogits, params.working["dec_w"]).reshape(
            steps, batch, hidden)

        dz_all = np.empty((steps, batch, 4 * hidden), dtype=precision.storage)
        dmx_all = np.empty((steps, batch, hidden), dtype=precision.storage)
        dmh_all = np.empty((steps, batch, hidden), dtype=precision.storage)
        dh_next = np.zeros((batch, hidden), dtype=accum)
        dc_next = np.zeros((batch, hidden), dtype=accum)
        for t in range(steps - 1, -1, -1):
            i, f, o, u = cache.gates[t]
            tanh_c = cache.tanh_c[t]
            dh = dh_out[t] + dh_next
            do = dh * tanh_c
            dc = dc_next + dh * o * (1 - tanh_c * tanh_c)
            di = dc * u
            df = dc * cache.c_prev[t]
            du = dc * i
            dc_next = dc * f
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                                 do * o * (1 - o), du * (1 - u * u)], axis=1)
            dz_all[t] = precision.store(dz)
            dm = precision.matmul(dz_all[t], params.effective["hm"])
            dmx_all[t] = precision.store(dm * precision.widen(cache.mh[t]))
            dmh_all[t] = precision.store(dm * precision.widen(cache.mx[t]))
            dh_next = precision.matmul(dmh_all[t], params.effective["mh"])

        dz_flat = dz_all.reshape(steps * batch, 4 * hidden)
        dmx_flat = dmx_all.reshape(steps * batch, hidden)
        dmh_flat = dmh_all.reshape(steps * batch, hidden)
        effective_grads = {
            "ih": precision.matmul(dz_flat.T, cache.x),
            "hm": precision.matmul(dz_flat.T, cache.m.reshape(steps * batch, hidden)),
            "mx": precision.matmul(dmx_flat.T, cache.x),
            "mh": precision.matmul(dmh_flat.T, cache.h_prev.reshape(steps * batch, hidden)),
        }
        grads["b"] = _col_sum(precision.widen(dz_flat), accum)
        dx = (precision.matmul(dz_flat, params.effective["ih"])
              + precision.matmul(dmx_flat, params.effective["mx"]))
        dembed = np.zeros((VOCAB_SIZE, config.embed_dim), dtype=accum)
        np.add.at(dembed, cache.tokens.T.ravel(), dx)
        grads["embed"] = dembed

        for name in NORMALIZED:
            dw = effective_grads[name]
            norm = params.norms[name]
            v = precision.widen(params.working[name + "_v"])
            g = precision.widen(params.working[name + "_g"])
            unit = v / norm[:, None]
            dg = _row_dot(dw, unit, accum)
            grads[name + "_g"] = dg
            grads[name + "_v"] = (g / norm)[:, None] * (dw - dg[:, None] * unit)

        stored = {}
        for name in PARAM_NAMES:
            stored[name] = precision.widen(precision.store(grads[name]))
    sequence_grads = SequenceGrads(stored)
    overflow = not sequence_grads.all_finite()
    if overflow:
        logger.debug("gradient overflow at loss scale {}".format(alpha))
    return accum(loss), sequence_grads, overflow
