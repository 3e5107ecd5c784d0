"""
Effective receptive field maps and their theoretical bound.

The ERF of a unit is the input-gradient magnitude of that unit, summed over
input channels and averaged over sample images, normalized to a maximum of 1.
theoretical_support walks the same layer stack with interval arithmetic to
give the set of input pixels that can influence the unit at all.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from matplotlib import colormaps
from PIL import Image

from constants import ERF_DEFAULT_SAMPLES, SpatialKind
from errors import ConfigurationError, DataError
from s2c_blocks import S2CBlock

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Reach:
    """
    One spatial layer seen by the reach analysis.
    kind "conv": kernel/stride/padding; kind "window": non-overlapping windows of side window.
    """
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    window: int = 0


def receptive_layers(module: nn.Module) -> List[Reach]:
    """
    Spatial layers of a forward-ordered stack (an analysis transform or any
    nn.Sequential built from Conv2d and S2C blocks). Per-pixel layers are skipped.
    """
    layers = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if m.dilation != (1, 1):
                raise ConfigurationError("dilated convolutions are not supported by the reach analysis")
            layers.append(Reach("conv", m.kernel_size[0], m.stride[0], m.padding[0]))
        elif isinstance(m, nn.ConvTranspose2d):
            raise ConfigurationError("transposed convolutions are not supported by the reach analysis")
        elif isinstance(m, S2CBlock):
            kind = m.spec.spatial_kind
            if kind is SpatialKind.SEPCONV:
                layers.append(Reach("conv", m.spec.dw_kernel, 1, m.spec.dw_kernel // 2))
            elif kind is SpatialKind.ATTENTION:
                layers.append(Reach("window", window=m.spec.window_size))
    return layers


def _output_size(layer: Reach, n: int) -> int:
    if layer.kind == "conv":
        return (n + 2 * layer.padding - layer.kernel) // layer.stride + 1
    return n


def _window_side(layer: Reach, height: int, width: int) -> int:
    return max(1, min(layer.window, height, width))


def _window_interval(lo: int, hi: int, n: int, win: int) -> Tuple[int, int]:
    start = (lo // win) * win
    end = (hi // win) * win + win - 1
    if end > n - 1:
        # bottom/right pad is a reflection of the last rows
        start = min(start, 2 * (n - 1) - end)
        end = n - 1
    return max(start, 0), end


def theoretical_support(layers: Sequence[Reach], input_size: Tuple[int, int],
                        center: Optional[Tuple[int, int]] = None) -> Tuple[int, int, int, int]:
    """
    Inclusive input box (row_lo, row_hi, col_lo, col_hi) that can reach the
    output unit at center (default: the output's spatial center).
    """
    sizes = [tuple(input_size)]
    for layer in layers:
        h, w = sizes[-1]
        sizes.append((_output_size(layer, h), _output_size(layer, w)))
    out_h, out_w = sizes[-1]
    if center is None:
        center = (out_h // 2, out_w // 2)
    r_lo = r_hi = center[0]
    c_lo = c_hi = center[1]
    for layer, (h, w) in zip(reversed(layers), reversed(sizes[:-1])):
        if layer.kind == "conv":
            r_lo, r_hi = r_lo * layer.stride - layer.padding, r_hi * layer.stride - layer.padding + layer.kernel - 1
            c_lo, c_hi = c_lo * layer.stride - layer.padding, c_hi * layer.stride - layer.padding + layer.kernel - 1
            r_lo, r_hi = max(r_lo, 0), min(r_hi, h - 1)
            c_lo, c_hi = max(c_lo, 0), min(c_hi, w - 1)
        else:
            win = _window_side(layer, h, w)
            r_lo, r_hi = _window_interval(r_lo, r_hi, h, win)
            c_lo, c_hi = _window_interval(c_lo, c_hi, w, win)
    return r_lo, r_hi, c_lo, c_hi


def effective_receptive_field(module: Callable[[torch.Tensor], torch.Tensor], samples: torch.Tensor,
                              center: Optional[Tuple[int, int]] = None,
                              min_samples: int = ERF_DEFAULT_SAMPLES) -> np.ndarray:
    """
    Max-normalized (H, W) map of |d out[:, :, center] / d input|.

    Raises:
        DataError: fewer than min_samples images
        ConfigurationError: the module gives no gradient to its input
    """
    if samples.dim() != 4 or samples.shape[0] < min_samples:
        raise DataError(f"need a batch of at least {min_samples} sample images, got {tuple(samples.shape)}")
    x = samples.detach().clone().requires_grad_(True)
    out = module(x)
    if not out.requires_grad:
        raise ConfigurationError("module output does not depend differentiably on its input")
    h, w = out.shape[-2:]
    ch, cw = center if center is not None else (h // 2, w // 2)
    out[:, :, ch, cw].sum().backward()
    if x.grad is None:
        raise ConfigurationError("no gradient reached the input")
    erf = x.grad.abs().sum(dim=1).mean(dim=0).double()
    peak = erf.max()
    if not peak > 0:
        raise ConfigurationError("gradient map is identically zero")
    return (erf / peak).cpu().numpy()


def support_of(erf: np.ndarray) -> Tuple[int, int, int, int]:
    """Bounding box of the nonzero entries of a map."""
    rows = np.flatnonzero(erf.any(axis=1))
    cols = np.flatnonzero(erf.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def save_erf_png(erf: np.ndarray, path: Union[str, Path], cmap: str = "viridis") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgba = colormaps[cmap](np.clip(erf, 0.0, 1.0))
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path)
    return path


def save_erf_grid(erf: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(erf).to_csv(path, index=False, header=False)
    return path
