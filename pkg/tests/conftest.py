import numpy as np
import pytest

from charscale.config import RunConfig
from charscale.model import MlstmConfig, MlstmParams
from charscale.numerics import Precision

WORDS = ("the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "and",
         "runs", "far", "away", "from", "home", "good", "bad", "great", "awful")


def make_records(count, seed=0, words=8):
    """deterministic pseudo sentences"""
    rng = np.random.default_rng(seed)
    return [" ".join(rng.choice(WORDS, size=words)) for _ in range(count)]


@pytest.fixture
def tiny_config():
    return MlstmConfig(hidden_dim=8, embed_dim=4, seq_len=6)


@pytest.fixture
def tiny_params(tiny_config):
    return MlstmParams.init(tiny_config, seed=3, precision=Precision("mixed", "ordered"))


@pytest.fixture
def records():
    return make_records(60, seed=1)


@pytest.fixture
def run_config(tmp_path):
    return RunConfig(hidden_dim=8, embed_dim=4, seq_len=8, batch_size=4, n_workers=1,
            base_lr=3e-3, decay_iters=40, max_epochs=50, min_train_shards=8,
            eval_batch_size=2, log_wall_time=False, growth_interval=10,
            checkpoint_path=str(tmp_path / "run.mlmf"),
            metrics_path=str(tmp_path / "metrics.csv"))
