#!/usr/bin/env python3
"""
Long acceptance runs: overfitting hybrid-s and s2c-identity on one image,
the rate ladder over seeds, real bitstream size against the estimate, and the
identity-operator latency share.

Skipped unless S2C_RUN_SLOW=1.
"""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from codec import compress
from config import TrainConfig
from evaluation.profiler import profile_latency
from training import PatchStream, overfit_psnr, train
from transforms import assemble_model

pytestmark = pytest.mark.slow

OVERFIT_LAMBDA = 0.013
OVERFIT_STEPS = 5000
LADDER = (0.0025, 0.013, 0.05)
LADDER_SEEDS = (0, 1, 2)


def _smooth_uint8(size, seed=0, grid=16):
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(1, 3, size // grid, size // grid, generator=g)
    x = F.interpolate(base, size=(size, size), mode="bicubic", align_corners=False).clamp(0, 1)[0]
    return (x.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)


def _train(model, images, lmbda, steps, out_dir, patch=None, batch_size=1, seed=0):
    patch = patch or images[0].shape[0]
    config = TrainConfig(lmbda=lmbda, batch_size=batch_size, patch_size=patch, steps=steps,
                         lr=1e-4, seed=seed, out_dir=str(out_dir), checkpoint_every=steps,
                         log_every=100, prefetch=0)
    train(model, config, stream=PatchStream(images, patch, seed=seed))
    return model.eval()


def _tensor(image):
    return torch.from_numpy(image.transpose(2, 0, 1).copy()).float() / 255.0


@pytest.fixture(scope="module")
def image():
    return _smooth_uint8(256)


@pytest.fixture(scope="module")
def overfitted(image, tmp_path_factory):
    model = assemble_model("hybrid-s", seed=0)
    return _train(model, [image], OVERFIT_LAMBDA, OVERFIT_STEPS, tmp_path_factory.mktemp("hybrid"))


@pytest.fixture(scope="module")
def overfitted_identity(image, tmp_path_factory):
    model = assemble_model("s2c-identity", seed=0)
    return _train(model, [image], OVERFIT_LAMBDA, OVERFIT_STEPS, tmp_path_factory.mktemp("identity"))


class TestOverfit:
    """Single-image optimization at lambda 0.013."""

    def test_reaches_30db(self, overfitted, image):
        x = _tensor(image)
        assert overfit_psnr(overfitted, x) > 30.0
        assert compress(x, overfitted).bpp > 0

    def test_identity_within_3db(self, overfitted, overfitted_identity, image):
        """Channel aggregation alone gets close to the hybrid under the same protocol."""
        x = _tensor(image)
        assert overfit_psnr(overfitted_identity, x) >= overfit_psnr(overfitted, x) - 3.0


class TestStreamSize:
    """Real file size against the model's rate estimate."""

    @pytest.mark.parametrize("seed", [1, 2, 3, 4])
    def test_bytes_within_two_percent_plus_header(self, overfitted, seed):
        # 512 x 512 with a finer grid keeps the per-stream framing small next to the payload
        x = _tensor(_smooth_uint8(512, seed=seed, grid=8))
        obj = compress(x, overfitted)
        with torch.no_grad():
            est = overfitted(x.unsqueeze(0), noisy=False)
        estimate_bytes = float(est["bpp_y"] + est["bpp_z"]) * 512 * 512 / 8
        assert obj.num_bytes <= 1.02 * estimate_bytes + 64


class TestRateLadder:
    """A larger lambda buys quality with rate, by majority over seeds."""

    @pytest.fixture(scope="class")
    def corpus(self):
        return [_smooth_uint8(256, seed=10 + i) for i in range(8)]

    def test_bpp_and_psnr_increase(self, corpus, tiny_config_factory, tmp_path_factory):
        held_out = _tensor(_smooth_uint8(256, seed=99))
        monotone = []
        for seed in LADDER_SEEDS:
            points = []
            for lmbda in LADDER:
                model = assemble_model(tiny_config_factory(), seed=seed)
                out = tmp_path_factory.mktemp(f"ladder-{seed}-{lmbda}")
                _train(model, corpus, lmbda, 3000, out, patch=128, batch_size=4, seed=seed)
                points.append((compress(held_out, model).bpp, overfit_psnr(model, held_out)))
            bpps, psnrs = zip(*points)
            monotone.append(all(a < b for a, b in zip(bpps, bpps[1:]))
                            and all(a < b for a, b in zip(psnrs, psnrs[1:])))
        assert sum(monotone) >= 2, monotone


class TestIdentityLatency:
    """Identity spatial interaction costs next to nothing."""

    def test_reported_spatial_share_below_two_percent(self, tmp_path):
        model = assemble_model("s2c-identity", seed=0).eval()
        profile = profile_latency(model, (256, 256), reps=7, warmup=2, lock_path=tmp_path / "lock")
        assert profile.spatial_share < 0.02
        assert profile.spatial_interaction_ms < 0.02 * profile.total_ms
