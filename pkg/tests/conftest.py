import numpy as np
import pytest

from data_processing import generate_synthetic, write_dataset
from network import NetworkConfig, build
from tensor_core import make_rng

TINY_CONFIG = NetworkConfig(
    input_hw=(12, 12),
    conv_specs=((2, 3), (3, 3)),
    pool_after=(1,),
    fc_dims=(4, 2),
)

DCNN_SETTINGS = ("DCNN_SEED", "DCNN_DATA_DIR", "DCNN_OUT_DIR", "DCNN_NUM_THREADS", "DCNN_LOG_LEVEL")


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in DCNN_SETTINGS:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def tiny_net():
    return build(TINY_CONFIG, make_rng(7))


@pytest.fixture
def tiny_batch(rng):
    return rng.random((4, 1, 12, 12)).astype(np.float32)


@pytest.fixture
def synthetic_small():
    return generate_synthetic(24, (16, 16), seed=3)


@pytest.fixture
def synthetic_dir(tmp_path, synthetic_small):
    path = tmp_path / "data"
    write_dataset(synthetic_small, str(path))
    return path
