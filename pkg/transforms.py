"""
Analysis / synthesis transforms and the assembled codec model.

Layout (main path):
    g_a: conv5/2 -> GELU -> conv5/2 -> stage1 (H/4) -> conv5/2 -> stage2 (H/8)
         -> conv5/2 -> stage3 (H/16) -> conv3 -> C4
    g_s: mirror image with stride-2 transposed convolutions; the decoder runs
         the stages in reverse so each resolution keeps its operator kind.
Hyper path:
    h_a: conv5/2 -> S2C-Conv stage -> conv5/2
    h_s: deconv5/2 -> S2C-Conv stage -> deconv5/2 -> (mu, sigma_raw)
"""

import logging
from collections import OrderedDict
from typing import Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import ModelConfig, StageSpec, load_model_config
from constants import PAD_MULTIPLE, RESAMPLE_KERNEL, ContextMode
from entropy import (
    FactorizedPrior,
    SpaceChannelContext,
    latent_forward,
    positive_scale,
    rate_estimate,
)
from errors import DimensionError, MetadataError
from s2c_blocks import S2CStage
from utils import log_action

logger = logging.getLogger(__name__)


def downsample(in_ch: int, out_ch: int, kernel_size: int = RESAMPLE_KERNEL) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=2, padding=kernel_size // 2)


def upsample(in_ch: int, out_ch: int, kernel_size: int = RESAMPLE_KERNEL) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel_size, stride=2,
        padding=kernel_size // 2, output_padding=1,
    )


def pad_to_multiple(x: torch.Tensor, multiple: int = PAD_MULTIPLE) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """
    Pad H and W (bottom/right) up to the next multiple.
    Reflect padding is used unless an edge is too short for it, then replicate.

    Returns:
        (padded tensor, original (H, W))
    """
    H, W = x.shape[-2:]
    pad_h, pad_w = (-H) % multiple, (-W) % multiple
    if pad_h == 0 and pad_w == 0:
        return x, (H, W)
    mode = "reflect" if pad_h < H and pad_w < W else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode), (H, W)


def crop_to(x: torch.Tensor, size: Optional[Tuple[int, int]]) -> torch.Tensor:
    if size is None:
        raise MetadataError("original image size is required to crop the reconstruction")
    H, W = size
    if H > x.shape[-2] or W > x.shape[-1]:
        raise MetadataError(f"cannot crop {tuple(x.shape[-2:])} to larger size {(H, W)}")
    return x[..., :H, :W]


class AnalysisTransform(nn.Sequential):
    def __init__(self, config: ModelConfig):
        (s1, s2, s3) = config.main_stages
        c1, c2, c3 = s1.channels, s2.channels, s3.channels
        super().__init__(OrderedDict([
            ("down0", downsample(3, c1)),
            ("act0", nn.GELU()),
            ("down1", downsample(c1, c1)),
            ("stage1", _stage(config, s1)),
            ("down2", downsample(c1, c2)),
            ("stage2", _stage(config, s2)),
            ("down3", downsample(c2, c3)),
            ("stage3", _stage(config, s3)),
            ("proj", nn.Conv2d(c3, config.latent_channels, 3, padding=1)),
        ]))


class SynthesisTransform(nn.Sequential):
    def __init__(self, config: ModelConfig):
        (s1, s2, s3) = config.main_stages
        c1, c2, c3 = s1.channels, s2.channels, s3.channels
        super().__init__(OrderedDict([
            ("proj", nn.Conv2d(config.latent_channels, c3, 3, padding=1)),
            ("stage3", _stage(config, s3)),
            ("up3", upsample(c3, c2)),
            ("stage2", _stage(config, s2)),
            ("up2", upsample(c2, c1)),
            ("stage1", _stage(config, s1)),
            ("up1", upsample(c1, c1)),
            ("act0", nn.GELU()),
            ("up0", upsample(c1, 3)),
        ]))


class HyperAnalysis(nn.Sequential):
    def __init__(self, config: ModelConfig):
        stage = config.hyper_stages[0]
        super().__init__(OrderedDict([
            ("down0", downsample(config.latent_channels, stage.channels)),
            ("stage", _stage(config, stage)),
            ("down1", downsample(stage.channels, config.entropy.hyper_channels)),
        ]))


class HyperSynthesis(nn.Sequential):
    def __init__(self, config: ModelConfig):
        stage = config.hyper_stages[1]
        super().__init__(OrderedDict([
            ("up1", upsample(config.entropy.hyper_channels, stage.channels)),
            ("stage", _stage(config, stage)),
            ("up0", upsample(stage.channels, 2 * config.latent_channels)),
        ]))


def _stage(config: ModelConfig, stage: StageSpec) -> S2CStage:
    return S2CStage(config.block_spec(stage), stage.num_blocks)


class S2CModel(nn.Module):
    """
    Complete codec: transforms, hyper transforms and the entropy model.

    Args:
        config: variant description
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.g_a = AnalysisTransform(config)
        self.g_s = SynthesisTransform(config)
        self.h_a = HyperAnalysis(config)
        self.h_s = HyperSynthesis(config)
        self.entropy_bottleneck = FactorizedPrior(config.entropy.hyper_channels)
        self.context = (
            SpaceChannelContext(config)
            if config.entropy.context_mode is ContextMode.SCCTX else None
        )

    def forward(self, x: torch.Tensor, noisy: bool = True) -> Dict[str, object]:
        """
        Training / estimation pass over an image batch in [0, 1].

        Returns:
            x_hat (cropped to the input size), bundle (LatentBundle),
            bpp_y and bpp_z (estimated, per original pixel)
        """
        x_pad, size = pad_to_multiple(x)
        y = self.g_a(x_pad)
        bundle = latent_forward(self, y, num_pixels=size[0] * size[1], noisy=noisy)
        x_hat = crop_to(self.g_s(bundle.y_hat), size)
        bpp_y, bpp_z = rate_estimate(bundle)
        return {"x_hat": x_hat, "bundle": bundle, "bpp_y": bpp_y, "bpp_z": bpp_z}

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def analyze(x: torch.Tensor, model: S2CModel, pad: bool = False) -> torch.Tensor:
    """
    y = g_a(x). Input H and W must be multiples of 64 unless pad=True.

    Raises:
        DimensionError: unpadded input of incompatible size
    """
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected an (N, 3, H, W) image batch, got {tuple(x.shape)}")
    if pad:
        x, _ = pad_to_multiple(x)
    H, W = x.shape[-2:]
    if H % PAD_MULTIPLE or W % PAD_MULTIPLE:
        raise DimensionError(
            f"input size {H}x{W} is not a multiple of {PAD_MULTIPLE}; enable padding"
        )
    return model.g_a(x)


def synthesize(y_hat: torch.Tensor, model: S2CModel,
               size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """x_hat = g_s(y_hat), cropped to size when given."""
    if y_hat.shape[1] != model.config.latent_channels:
        raise DimensionError(
            f"latent has {y_hat.shape[1]} channels, model expects {model.config.latent_channels}"
        )
    x_hat = model.g_s(y_hat)
    return crop_to(x_hat, size) if size is not None else x_hat


def hyper_analyze(y: torch.Tensor, model: S2CModel) -> torch.Tensor:
    if y.shape[1] != model.config.latent_channels:
        raise DimensionError(
            f"latent has {y.shape[1]} channels, model expects {model.config.latent_channels}"
        )
    return model.h_a(y)


def hyper_synthesize(z_hat: torch.Tensor, model: S2CModel) -> Tuple[torch.Tensor, torch.Tensor]:
    """(mu, sigma) from the hyper-latent; sigma = max(softplus(raw), 1e-6)."""
    if z_hat.shape[1] != model.config.entropy.hyper_channels:
        raise DimensionError(
            f"hyper-latent has {z_hat.shape[1]} channels, "
            f"model expects {model.config.entropy.hyper_channels}"
        )
    mu, sigma_raw = model.h_s(z_hat).chunk(2, dim=1)
    return mu, positive_scale(sigma_raw)


def assemble_model(config: Union[ModelConfig, str], seed: Optional[int] = None,
                   device: Optional[Union[str, torch.device]] = None) -> S2CModel:
    """
    Build a parameterized codec. The meta device builds shapes only
    (useful for counting parameters of large presets).
    """
    if isinstance(config, str):
        config = load_model_config(config)
    if seed is not None:
        torch.manual_seed(seed)
    with torch.device(device or "cpu"):
        model = S2CModel(config)
    log_action("Transforms", "model_assembled", {
        "variant": config.variant_name,
        "stages": [s.kind.value for s in config.main_stages],
        "params": model.num_parameters(),
        "device": str(device or "cpu"),
    })
    return model
