"""
run configuration: flat key=value files with command line overrides.
"""

import io
import logging
import math
from dataclasses import dataclass, fields, asdict

from charscale.errors import ConfigError
from charscale.optimizer import LR_RULES
from charscale.scaler import LossScaleState

logger = logging.getLogger(__name__)

PRECISIONS = ("mixed", "fp32")
GEMM_ORDERS = ("blas", "ordered")
DATA_FORMATS = ("lines", "directory")


@dataclass
class RunConfig(object):
    hidden_dim: int = 256
    embed_dim: int = 64
    seq_len: int = 256
    batch_size: int = 32
    n_workers: int = 1
    base_lr: float = 5e-4
    lr_rule: str = "none"
    decay_iters: int = 100000
    max_epochs: float = 3.0
    precision: str = "mixed"
    gemm_order: str = "ordered"
    loss_scale: float = 65536.0
    growth_interval: int = 2000
    alpha_min: float = 1.0
    alpha_max: float = 16777216.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init_seed: int = 0
    data_seed: int = 0
    train_path: str = ""
    data_format: str = "lines"
    min_train_shards: int = 1000
    eval_batch_size: int = 16
    eval_interval: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 0
    checkpoint_path: str = "checkpoint.mlmf"
    metrics_path: str = "metrics.csv"
    log_wall_time: bool = True
    divergence_patience: int = 50
    divergence_threshold: float = 2.0 * math.log(256.0)
    regime_threshold: float = 1000.0
    feature: str = "cell"

    def __post_init__(self):
        # 50 and 50.0 must write the same text
        for field in fields(self):
            value = getattr(self, field.name)
            if field.type in (float, "float") and isinstance(value, int) \
                    and not isinstance(value, bool):
                setattr(self, field.name, float(value))

    @classmethod
    def keys(cls):
        return [field.name for field in fields(cls)]

    @classmethod
    def field_types(cls):
        return {field.name: field.type for field in fields(cls)}

    @classmethod
    def from_pairs(cls, pairs, base=None):
        """
        build a config from (key, text value) pairs on top of base.

        arguments:
        pairs -- iterable of (key, str) overrides
        base -- RunConfig supplying the other values, defaults if None
        """
        values = asdict(base) if base is not None else asdict(cls())
        types = cls.field_types()
        for key, text in pairs:
            if key not in types:
                raise ConfigError("unknown config key {!r}".format(key))
            values[key] = _parse(key, text, types[key])
        return cls(**values)

    @classmethod
    def from_text(cls, text, base=None):
        pairs = []
        for number, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError("line {}: expected key=value, got {!r}".format(number, line))
            pairs.append((key.strip(), value.strip()))
        return cls.from_pairs(pairs, base)

    @classmethod
    def from_file(cls, filename, base=None):
        with io.open(filename, "r", encoding="utf-8") as configFile:
            config = cls.from_text(configFile.read(), base)
        logger.info("config read from {}".format(filename))
        return config

    def to_text(self):
        lines = []
        for key, value in sorted(asdict(self).items()):
            lines.append("{}={}".format(key, _format(value)))
        return "\n".join(lines) + "\n"

    def validate(self):
        """
        check every value against the preconditions of the modules using it.

        return:
        self, so calls can be chained
        """
        positive = ("hidden_dim", "embed_dim", "seq_len", "batch_size", "n_workers",
                "decay_iters", "growth_interval", "min_train_shards", "eval_batch_size",
                "log_interval", "divergence_patience")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError("{} must be at least 1, got {}".format(key, getattr(self, key)))
        for key in ("eval_interval", "checkpoint_interval"):
            if getattr(self, key) < 0:
                raise ConfigError("{} must be non-negative".format(key))
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not self.max_epochs > 0:
            raise ConfigError("max_epochs must be positive")
        if self.batch_size % self.n_workers != 0:
            raise ConfigError("batch_size {} is not divisible by n_workers {}".format(
                self.batch_size, self.n_workers))
        for key, allowed in (("lr_rule", LR_RULES), ("precision", PRECISIONS),
                ("gemm_order", GEMM_ORDERS), ("data_format", DATA_FORMATS),
                ("feature", ("cell", "hidden"))):
            if getattr(self, key) not in allowed:
                raise ConfigError("{} must be one of {}, got {!r}".format(
                    key, allowed, getattr(self, key)))
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam needs 0 <= beta < 1 and eps > 0")
        if not self.divergence_threshold > 0:
            raise ConfigError("divergence_threshold must be positive")
        self.scaler_state()
        return self

    def scaler_state(self):
        """initial LossScaleState, static alpha = 1 in fp32 mode"""
        if self.precision == "fp32":
            return LossScaleState.static(1.0)
        return LossScaleState(self.loss_scale, self.growth_interval, self.alpha_min,
                self.alpha_max)


def _parse(key, text, kind):
    if not isinstance(text, str):
        return text
    try:
        if kind in (bool, "bool"):
            lowered = text.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError("{}: cannot parse {!r}".format(key, text))
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
