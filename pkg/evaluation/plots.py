"""
Figures: R-D curves and stacked spatial / channel latency bars.
"""

import logging
from pathlib import Path
from typing import Iterable, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from constants import Metric  # noqa: E402
from evaluation.metrics import RDCurve  # noqa: E402
from evaluation.profiler import LatencyProfile  # noqa: E402

logger = logging.getLogger(__name__)


def plot_rd_curves(curves: Iterable[RDCurve], path: Union[str, Path], title: str = "") -> Path:
    curves = list(curves)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for curve in curves:
        ax.plot(curve.bpps, curve.qualities, marker="o", label=curve.label)
    metric = curves[0].metric if curves else Metric.MSE
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)" if metric is Metric.MSE else "MS-SSIM")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_latency_bars(profiles: Sequence[LatencyProfile], path: Union[str, Path]) -> Path:
    """One stacked bar per variant: spatial interaction under channel aggregation."""
    names = [p.variant for p in profiles]
    spatial = [p.spatial_interaction_ms for p in profiles]
    channel = [p.channel_aggregation_ms for p in profiles]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(names, spatial, label="spatial interaction")
    ax.bar(names, channel, bottom=spatial, label="channel aggregation")
    ax.set_ylabel("time (ms)")
    ax.legend()
    fig.autofmt_xdate(rotation=30)
    return _save(fig, path)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.debug("Figure written to %s", path)
    return path
