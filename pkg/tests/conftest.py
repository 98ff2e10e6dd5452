# tests/conftest.py
import pytest
import torch

from config.config_manager import ConfigManager
from services.checkpoints import save_model
from services.corpus import make_synthetic_corpus
from services.features import fit_stats
from services.models.params import (
    AcousticUNetParams, DiffusionParams, EncoderParams, GestureUNetParams, ModelParams, PrenetParams,
)
from services.models.speech_gesture import SpeechGestureModel
from services.text_frontend import SymbolInventory


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow training acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_tiny_params() -> ModelParams:
    return ModelParams(
        encoder=EncoderParams(n_channels=16, filter_channels=32, filter_channels_dp=16, n_heads=2, n_layers=1,
                              p_dropout=0.0),
        acoustic_decoder=AcousticUNetParams(dim=8, dim_mults=(1, 2), groups=4, attention=False),
        prenet=PrenetParams(d_model=16, n_layers=1, n_heads=2, ff_mult=2, conv_kernel=5, p_dropout=0.0),
        gesture_decoder=GestureUNetParams(dim=16, dim_mults=(1, 1), kernel_size=3, groups=4),
        diffusion=DiffusionParams(),
    )


@pytest.fixture
def tiny_params() -> ModelParams:
    return make_tiny_params()


@pytest.fixture
def inventory() -> SymbolInventory:
    return SymbolInventory.default()


@pytest.fixture
def tiny_model(tiny_params, inventory) -> SpeechGestureModel:
    torch.manual_seed(0)
    return SpeechGestureModel(tiny_params, len(inventory))


@pytest.fixture
def synthetic_corpus():
    return make_synthetic_corpus(2, seed=7)


@pytest.fixture
def tiny_checkpoint(tmp_path, tiny_model, inventory, synthetic_corpus):
    stats = fit_stats([(u.mel, u.pose) for u in synthetic_corpus])
    path = str(tmp_path / 'tiny.zip')
    save_model(path, tiny_model, inventory, stats, step=3)
    return path


@pytest.fixture
def config_manager() -> ConfigManager:
    return ConfigManager()
