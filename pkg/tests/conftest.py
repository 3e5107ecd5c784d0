"""
Shared fixtures: repository root on sys.path, tiny model configurations and
the `slow` marker (enabled with S2C_RUN_SLOW=1).
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config import EntropyConfig, ModelConfig, StageSpec, TrainConfig, run_slow  # noqa: E402
from training import PatchStream, train  # noqa: E402
from transforms import assemble_model  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance experiments (set S2C_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if run_slow():
        return
    skip = pytest.mark.skip(reason="set S2C_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_tiny_config(kinds=("C", "A", "A"), ffn="gated", context_mode="scctx", checkerboard=True,
                     channels=(16, 16, 32), blocks=(1, 1, 1), name="tiny") -> ModelConfig:
    return ModelConfig(
        variant_name=name,
        main_stages=tuple(StageSpec(k, n, c) for k, n, c in zip(kinds, blocks, channels)),
        latent_channels=32,
        hyper_stages=(StageSpec("C", 1, 16), StageSpec("C", 1, 16)),
        ffn_kind=ffn,
        window_size=4,
        dw_kernel=3,
        expansion_ratio=2,
        head_dim=8,
        entropy=EntropyConfig(
            context_mode=context_mode,
            num_channel_groups=4,
            group_widths=(4, 4, 8, 16),
            checkerboard=checkerboard,
            hyper_channels=16,
            context_hidden=8,
        ),
    )


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def tiny_config_factory():
    return make_tiny_config


@pytest.fixture
def image_folder(tmp_path):
    """Three smooth random RGB images of different sizes."""
    rng = np.random.default_rng(0)
    folder = tmp_path / "images"
    folder.mkdir()
    for i, (h, w) in enumerate([(96, 128), (128, 96), (80, 80)]):
        base = rng.integers(0, 256, size=(h // 8 + 1, w // 8 + 1, 3), dtype=np.uint8)
        img = Image.fromarray(base).resize((w, h), Image.BILINEAR)
        img.save(folder / f"img{i}.png")
    return folder


@pytest.fixture(scope="session")
def trained_tiny_model(tmp_path_factory):
    """Tiny model after a short real training run, weights well away from init."""
    rng = np.random.default_rng(5)
    images = []
    for _ in range(4):
        base = rng.integers(0, 256, size=(17, 17, 3), dtype=np.uint8)
        images.append(np.asarray(Image.fromarray(base).resize((128, 128), Image.BILINEAR)))
    model = assemble_model(make_tiny_config(), seed=0)
    config = TrainConfig(lmbda=0.0130, batch_size=2, patch_size=64, steps=30, lr=1e-3, seed=0,
                         out_dir=str(tmp_path_factory.mktemp("trained")), checkpoint_every=30,
                         log_every=10, prefetch=0)
    train(model, config, stream=PatchStream(images, 64, seed=0))
    return model.eval()


@pytest.fixture(autouse=True)
def _quiet_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(autouse=True)
def _cpu_device(monkeypatch):
    monkeypatch.setenv("S2C_DEVICE", "cpu")
    yield
