"""
Image quality metrics and rate-distortion curve containers.

Images are float tensors in [0, 1], shaped (3, H, W) or (N, 3, H, W).
RD curves are exchanged as CSV with columns label, bpp, psnr, msssim.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Union

import numpy as np
import pandas as pd
import torch
from pytorch_msssim import ms_ssim as _ms_ssim

from constants import MSSSIM_WEIGHTS, PSNR_INFINITY, Metric, parse_enum
from errors import DataError, DimensionError

logger = logging.getLogger(__name__)

RD_COLUMNS = ["label", "bpp", "psnr", "msssim"]
# five scales with an 11-pixel window need the short side above this
MSSSIM_MIN_SIDE = 160


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor) -> None:
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    _check_pair(x, x_hat)
    return float(torch.mean((x.double() - x_hat.double()) ** 2))


def psnr(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs give +inf."""
    err = mse(x, x_hat)
    if err == 0:
        return PSNR_INFINITY
    return 10 * math.log10(data_range ** 2 / err)


def ms_ssim(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 1.0) -> float:
    _check_pair(x, x_hat)
    x, x_hat = _batched(x), _batched(x_hat)
    if min(x.shape[-2:]) <= MSSSIM_MIN_SIDE:
        raise DimensionError(
            f"MS-SSIM needs both sides above {MSSSIM_MIN_SIDE} pixels, got {tuple(x.shape[-2:])}"
        )
    value = _ms_ssim(x, x_hat, data_range=data_range, size_average=True, weights=list(MSSSIM_WEIGHTS))
    return float(value)


def ms_ssim_tensor(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Differentiable batch-mean MS-SSIM used by the training loss."""
    return _ms_ssim(_batched(x), _batched(x_hat), data_range=data_range,
                    size_average=True, weights=list(MSSSIM_WEIGHTS))


def bits_per_pixel(num_bytes: int, height: int, width: int) -> float:
    return num_bytes * 8 / (height * width)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise DataError(f"bpp must be > 0, got {self.bpp}")


@dataclass
class RDCurve:
    """
    One codec's rate-distortion trade-off. Points are kept sorted by bpp;
    a quality drop at higher rate is logged but tolerated.
    """
    label: str
    points: List[RDPoint] = field(default_factory=list)
    metric: Metric = Metric.MSE

    def __post_init__(self):
        self.metric = parse_enum(Metric, self.metric)
        self.points = sorted(
            (p if isinstance(p, RDPoint) else RDPoint(*p) for p in self.points),
            key=lambda p: p.bpp,
        )
        rates = [p.bpp for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise DataError(f"curve {self.label!r} has repeated bpp values")
        qualities = [p.quality for p in self.points]
        if any(b < a for a, b in zip(qualities, qualities[1:])):
            logger.warning("Curve %r: quality decreases with rate somewhere", self.label)

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)


def _quality_column(metric: Union[Metric, str]) -> str:
    return "psnr" if parse_enum(Metric, metric) is Metric.MSE else "msssim"


def write_rd_curves(curves: Iterable[RDCurve], path: Union[str, Path]) -> Path:
    rows = []
    for curve in curves:
        column = _quality_column(curve.metric)
        for p in curve.points:
            row = {"label": curve.label, "bpp": p.bpp, "psnr": np.nan, "msssim": np.nan}
            row[column] = p.quality
            rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=RD_COLUMNS).to_csv(path, index=False)
    return path


def read_rd_curves(path: Union[str, Path], metric: Union[Metric, str] = Metric.MSE) -> Dict[str, RDCurve]:
    """
    Load every labelled curve from a CSV, keeping rows that carry the
    requested quality column.

    Raises:
        DataError: missing file, missing columns, or no usable rows
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"RD curve file not found: {path}")
    frame = pd.read_csv(path)
    column = _quality_column(metric)
    missing = {"label", "bpp", column} - set(frame.columns)
    if missing:
        raise DataError(f"{path} lacks columns {sorted(missing)}")
    frame = frame.dropna(subset=["bpp", column])
    if frame.empty:
        raise DataError(f"{path} has no rows with {column} values")
    curves = {}
    for label, group in frame.groupby("label", sort=False):
        points = [RDPoint(float(b), float(q)) for b, q in zip(group["bpp"], group[column])]
        curves[str(label)] = RDCurve(str(label), points, metric)
    return curves
