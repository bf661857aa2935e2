"""
binary16 storage emulation and mixed precision linear algebra.

numpy's float16 is a software implementation of IEEE 754 binary16 with
round-to-nearest-even conversion, so a TensorF16 is simply an ndarray of
dtype float16 (its uint16 view holds the bit patterns) and a TensorF32 an
ndarray of dtype float32. Subnormals are honoured, nothing is flushed.
"""

import logging

import numpy as np

from charscale.errors import ShapeError, ContractViolation

logger = logging.getLogger(__name__)

HALF_MAX = 65504.0
HALF_MIN_SUBNORMAL = 2.0 ** -24


class Half(object):
    """
    one binary16 value held as its 16 bit pattern.

    arguments:
    bits -- unsigned integer in [0, 0xffff], 1 sign, 5 exponent and
            10 mantissa bits
    """
    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = int(bits)
        if bits < 0 or bits > 0xFFFF:
            raise ContractViolation("half bit pattern out of range: {}".format(bits))
        self.bits = bits

    def is_nan(self):
        return (self.bits & 0x7C00) == 0x7C00 and (self.bits & 0x03FF) != 0

    def is_inf(self):
        return (self.bits & 0x7FFF) == 0x7C00

    def is_subnormal(self):
        return (self.bits & 0x7C00) == 0 and (self.bits & 0x03FF) != 0

    def __float__(self):
        return float(f16_to_f32(self))

    def __eq__(self, other):
        return isinstance(other, Half) and other.bits == self.bits

    def __ne__(self, other):
        return not self.__eq__(other)

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        return "Half(0x{:04X})".format(self.bits)


def f32_to_f16(x):
    """
    round a FP32 value to binary16, round-to-nearest-even.

    overflow becomes a signed infinity, values below half of the smallest
    subnormal become a signed zero and NaN stays NaN.

    arguments:
    x -- python float or numpy scalar, widened or narrowed to FP32 first

    return:
    a Half
    """
    with np.errstate(over="ignore", invalid="ignore"):
        value = np.array(x, dtype=np.float32).astype(np.float16)
    return Half(value.view(np.uint16))


def f16_to_f32(h):
    """
    exact widening of a binary16 pattern to FP32.

    arguments:
    h -- a Half or a raw 16 bit integer pattern

    return:
    numpy.float32 scalar
    """
    bits = h.bits if isinstance(h, Half) else int(h)
    return np.array(bits, dtype=np.uint16).view(np.float16).astype(np.float32)[()]


def to_half(array):
    """round any array to a TensorF16"""
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(array).astype(np.float16)


def from_half(array):
    return np.asarray(array, dtype=np.float16).astype(np.float32)


def half_bits(array):
    return to_half(array).view(np.uint16)


def _check_dims(dims, data):
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ShapeError("tensor extents must be positive, got {}".format(dims))
    size = int(np.prod(dims))
    flat = np.ravel(np.asarray(data))
    if flat.size != size:
        raise ShapeError("data length {} does not match dims {}".format(
            flat.size, dims))
    return dims, flat


def tensor_f16(dims, data):
    dims, flat = _check_dims(dims, data)
    return to_half(flat).reshape(dims)


def tensor_f32(dims, data):
    dims, flat = _check_dims(dims, data)
    return flat.astype(np.float32).reshape(dims)


def ordered_matmul(a, b, dtype=np.float32):
    """
    matrix product accumulated in `dtype` in ascending inner index order.

    each output element is the sequential sum over k of a[i, k] * b[k, j],
    so the result of one element never depends on the other rows or
    columns of the operands.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul needs 2-d operands, got {} and {}".format(
            a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ShapeError("inner dimensions disagree: {} x {}".format(
            a.shape, b.shape))
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(a.shape[1]):
            out += np.outer(a[:, k], b[k, :])
    return out


def gemm_mixed(a, b):
    """
    FP16 x FP16 -> FP32 matrix product with FP32 accumulation.

    every product term is formed from the widened FP16 operands (exact in
    FP32) and accumulated in FP32 in ascending k, which makes the result
    bitwise reproducible on any host.

    arguments:
    a -- TensorF16 [m x k]
    b -- TensorF16 [k x n]

    return:
    TensorF32 [m x n]
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype != np.float16 or b.dtype != np.float16:
        raise ContractViolation("gemm_mixed expects float16 operands, got {} and {}"
                .format(a.dtype, b.dtype))
    return ordered_matmul(a, b, np.float32)


def reduce_f32(values):
    """
    FP32 sum in fixed left to right order.

    arguments:
    values -- non-empty sequence of numbers

    return:
    numpy.float32 sum
    """
    flat = np.ravel(np.asarray(values, dtype=np.float32))
    if flat.size == 0:
        raise ContractViolation("reduce_f32 needs at least one value")
    with np.errstate(over="ignore", invalid="ignore"):
        return np.cumsum(flat, dtype=np.float32)[-1]


def tensor_to_bytes(array):
    """little-endian raw element bytes, row-major"""
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def tensor_from_bytes(payload, dtype, dims):
    dtype = np.dtype(dtype).newbyteorder("<")
    array = np.frombuffer(payload, dtype=dtype)
    if array.size != int(np.prod(dims)):
        raise ShapeError("payload holds {} elements, dims {} need {}".format(
            array.size, tuple(dims), int(np.prod(dims))))
    return array.astype(dtype.newbyteorder("=")).reshape(dims)


class Precision(object):
    """
    execution policy for storage and accumulation.

    arguments:
    mode -- "mixed": FP16 storage and FP32 accumulation,
            "fp32": FP32 storage and accumulation,
            "fp64": FP64 everywhere, the reference path for gradient checks
    order -- "ordered" (default): ascending-k accumulation, identical on
             every host, "blas": accumulation left to the BLAS kernel,
             faster but only reproducible on the same host and build
    """
    MODES = {
        "mixed": (np.float16, np.float32),
        "fp32": (np.float32, np.float32),
        "fp64": (np.float64, np.float64),
    }
    ORDERS = ("blas", "ordered")

    def __init__(self, mode="mixed", order="ordered"):
        if mode not in self.MODES:
            raise ContractViolation("unknown precision mode: {}".format(mode))
        if order not in self.ORDERS:
            raise ContractViolation("unknown accumulation order: {}".format(order))
        self.mode = mode
        self.order = order
        self.storage, self.accum = self.MODES[mode]

    @property
    def is_mixed(self):
        return self.mode == "mixed"

    def store(self, array):
        """round to the storage type"""
        with np.errstate(over="ignore", invalid="ignore"):
            return np.asarray(array).astype(self.storage)

    def widen(self, array):
        return np.asarray(array).astype(self.accum)

    def matmul(self, a, b):
        """
        product of two stored operands, result in the accumulation type.
        """
        a = self.store(a)
        b = self.store(b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("cannot multiply {} by {}".format(a.shape, b.shape))
        if self.order == "ordered":
            if self.is_mixed:
                return gemm_mixed(a, b)
            return ordered_matmul(a, b, self.accum)
        with np.errstate(over="ignore", invalid="ignore"):
            return np.matmul(a.astype(self.accum), b.astype(self.accum))

    def reduce(self, values):
        if self.accum == np.float32:
            return reduce_f32(values)
        flat = np.ravel(np.asarray(values, dtype=self.accum))
        if flat.size == 0:
            raise ContractViolation("reduction needs at least one value")
        return np.cumsum(flat)[-1]

    def row_sq_norms(self, v):
        """
        squared l2 norm of every row, squares of the stored values summed
        left to right in the accumulation type.
        """
        stored = self.widen(self.store(v))
        with np.errstate(over="ignore", invalid="ignore"):
            return np.cumsum(stored * stored, axis=1, dtype=self.accum)[:, -1]

    def __repr__(self):
        return "Precision({!r}, {!r})".format(self.mode, self.order)
