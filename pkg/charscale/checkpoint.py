"""
binary checkpoint files.

layout, all integers little endian:

    b"MLMF"  u32 version  u64 header length  header (UTF-8 key=value lines)
    u32 record count
    records: u16 name length, name, u8 dtype (0 f16, 1 f32), u8 rank,
             u64 dims..., raw little endian payload
    8 byte blake2b checksum of everything before it
"""

import hashlib
import io
import logging
import os
import struct

import numpy as np

from charscale.config import RunConfig
from charscale.errors import CheckpointError, CheckpointVersionError, ConfigError
from charscale.model import PARAM_NAMES, HiddenState, MlstmConfig, MlstmParams
from charscale.numerics import Precision, tensor_to_bytes, tensor_from_bytes
from charscale.optimizer import AdamState
from charscale.scaler import LossScaleState

logger = logging.getLogger(__name__)

MAGIC = b"MLMF"
VERSION = 1
DTYPE_TAGS = {np.dtype(np.float16): 0, np.dtype(np.float32): 1}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}
CHECKSUM_BYTES = 8


class Checkpoint(object):
    """
    everything needed to continue a run bit for bit.

    arguments:
    config -- RunConfig
    params -- MlstmParams, only the FP32 masters are stored
    adam -- AdamState
    scaler -- LossScaleState
    iteration -- iterations run so far, skipped ones included
    iterator_state -- MinibatchIterator.state_dict()
    hidden -- global HiddenState carried into the next window
    divergence_streak -- consecutive diverged iterations so far
    """
    def __init__(self, config, params, adam, scaler, iteration, iterator_state, hidden,
            divergence_streak=0):
        self.config = config
        self.params = params
        self.adam = adam
        self.scaler = scaler
        self.iteration = int(iteration)
        self.iterator_state = iterator_state
        self.hidden = hidden
        self.divergence_streak = int(divergence_streak)

    @property
    def epoch(self):
        return int(self.iterator_state["epoch"])


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def _header_text(checkpoint):
    lines = [checkpoint.config.to_text().rstrip("\n")]
    state = checkpoint.iterator_state
    scaler = checkpoint.scaler
    adam = checkpoint.adam
    extra = [
        ("state.iteration", checkpoint.iteration),
        ("state.divergence_streak", checkpoint.divergence_streak),
        ("state.epoch", state["epoch"]),
        ("state.next_shard", state["next_shard"]),
        ("state.finished", int(state["finished"])),
        ("state.rows", ",".join("{}:{}:{}".format(shard, cursor, int(fresh))
                for shard, cursor, fresh in state["rows"])),
        ("scaler.alpha", repr(scaler.alpha)),
        ("scaler.growth_interval", scaler.growth_interval),
        ("scaler.alpha_min", repr(scaler.alpha_min)),
        ("scaler.alpha_max", repr(scaler.alpha_max)),
        ("scaler.clean_steps", scaler.clean_steps),
        ("scaler.dynamic", int(scaler.dynamic)),
        ("adam.t", adam.t),
        ("adam.beta1", repr(adam.beta1)),
        ("adam.beta2", repr(adam.beta2)),
        ("adam.eps", repr(adam.eps)),
    ]
    lines.extend("{}={}".format(key, value) for key, value in extra)
    return "\n".join(lines) + "\n"


def _tensors(checkpoint):
    records = [("master." + name, checkpoint.params.masters[name]) for name in PARAM_NAMES]
    records += [("adam.m." + name, checkpoint.adam.m[name]) for name in PARAM_NAMES]
    records += [("adam.v." + name, checkpoint.adam.v[name]) for name in PARAM_NAMES]
    records += [("hidden.h", checkpoint.hidden.h), ("hidden.c", checkpoint.hidden.c)]
    return records


def encode_checkpoint(checkpoint):
    """
    return:
    the checkpoint file as bytes
    """
    header = _header_text(checkpoint).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", VERSION, len(header)))
    out.write(header)
    records = _tensors(checkpoint)
    out.write(struct.pack("<I", len(records)))
    for name, tensor in records:
        dtype = np.dtype(tensor.dtype)
        if dtype not in DTYPE_TAGS:
            raise CheckpointError("{} has dtype {}, only f16 and f32 are stored".format(
                name, dtype))
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BB", DTYPE_TAGS[dtype], tensor.ndim))
        out.write(struct.pack("<{}Q".format(tensor.ndim), *tensor.shape))
        out.write(tensor_to_bytes(tensor))
    payload = out.getvalue()
    return payload + _checksum(payload)


def save_checkpoint(filename, checkpoint):
    """write through a temporary file so a crash never leaves half a checkpoint"""
    payload = encode_checkpoint(checkpoint)
    temporary = filename + ".tmp"
    with io.open(temporary, "wb") as checkpointFile:
        checkpointFile.write(payload)
    os.replace(temporary, filename)
    logger.info("checkpoint at iteration {} written to {} ({} bytes)".format(
        checkpoint.iteration, filename, len(payload)))
    return filename


class _Reader(object):
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointError("checkpoint truncated at byte {}".format(self.offset))
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout):
        return struct.unpack(layout, self.take(struct.calcsize(layout)))


def _parse_header(text):
    values = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError("malformed header line {!r}".format(line))
        values[key] = value
    return values


def decode_checkpoint(payload):
    """
    arguments:
    payload -- the bytes of a checkpoint file

    return:
    Checkpoint
    """
    if len(payload) < len(MAGIC) + 12 + CHECKSUM_BYTES:
        raise CheckpointError("checkpoint truncated: {} bytes".format(len(payload)))
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint, magic is {!r}".format(payload[:len(MAGIC)]))
    version, = struct.unpack("<I", payload[len(MAGIC):len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointVersionError("checkpoint version {} is not supported, "
                "expected {}".format(version, VERSION))
    body, checksum = payload[:-CHECKSUM_BYTES], payload[-CHECKSUM_BYTES:]
    if _checksum(body) != checksum:
        raise CheckpointError("checkpoint checksum mismatch")

    reader = _Reader(body)
    reader.take(len(MAGIC) + 4)
    header_length, = reader.unpack("<Q")
    header = _parse_header(reader.take(header_length).decode("utf-8"))
    count, = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        name_length, = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in TAG_DTYPES:
            raise CheckpointError("{}: unknown dtype tag {}".format(name, tag))
        dims = reader.unpack("<{}Q".format(rank)) if rank else ()
        size = int(np.prod(dims)) * TAG_DTYPES[tag].itemsize
        tensors[name] = tensor_from_bytes(reader.take(size), TAG_DTYPES[tag], dims)
    if reader.offset != len(body):
        raise CheckpointError("{} trailing bytes after the tensor records".format(
            len(body) - reader.offset))

    state_keys = [key for key in header if "." in key]
    try:
        config = RunConfig.from_pairs([(key, value) for key, value in header.items()
                if key not in state_keys])
        precision = Precision(config.precision, config.gemm_order)
        model_config = MlstmConfig(config.hidden_dim, config.embed_dim, config.seq_len)
        params = MlstmParams(model_config,
                {name: tensors["master." + name] for name in PARAM_NAMES}, precision)
        adam = AdamState({}, float(header["adam.beta1"]), float(header["adam.beta2"]),
                float(header["adam.eps"]), int(header["adam.t"]))
        adam.m = {name: tensors["adam.m." + name] for name in PARAM_NAMES}
        adam.v = {name: tensors["adam.v." + name] for name in PARAM_NAMES}
        scaler = LossScaleState(float(header["scaler.alpha"]),
                int(header["scaler.growth_interval"]), float(header["scaler.alpha_min"]),
                float(header["scaler.alpha_max"]), int(header["scaler.clean_steps"]),
                bool(int(header["scaler.dynamic"])))
        rows = []
        for row in header["state.rows"].split(","):
            shard, cursor, fresh = row.split(":")
            rows.append((int(shard), int(cursor), bool(int(fresh))))
        iterator_state = {"epoch": int(header["state.epoch"]),
                "next_shard": int(header["state.next_shard"]),
                "finished": bool(int(header["state.finished"])), "rows": rows}
        hidden = HiddenState(tensors["hidden.h"], tensors["hidden.c"])
    except KeyError as missing:
        raise CheckpointError("checkpoint lacks {}".format(missing))
    except (ValueError, ConfigError) as error:
        raise CheckpointError("checkpoint header is invalid: {}".format(error))
    return Checkpoint(config, params, adam, scaler, int(header["state.iteration"]),
            iterator_state, hidden, int(header.get("state.divergence_streak", 0)))


def load_checkpoint(filename):
    try:
        with io.open(filename, "rb") as checkpointFile:
            payload = checkpointFile.read()
    except (IOError, OSError) as error:
        raise CheckpointError("cannot read checkpoint {}: {}".format(filename, error))
    checkpoint = decode_checkpoint(payload)
    logger.info("checkpoint at iteration {} loaded from {}".format(
        checkpoint.iteration, filename))
    return checkpoint
