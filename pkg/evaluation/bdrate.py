"""
Bjontegaard delta rate between two RD curves.

log(bpp) is fitted as a cubic polynomial of quality over each curve; the
average horizontal gap over the shared quality range gives the rate change.
When a cubic fit turns non-monotone inside that range the curve falls back to
piecewise cubic Hermite interpolation.
"""

import logging
from typing import Dict, Tuple

import numpy as np
from scipy.interpolate import PchipInterpolator

from errors import DataError, NoOverlapError
from evaluation.metrics import RDCurve

logger = logging.getLogger(__name__)

MIN_POINTS = 4
MONOTONE_SAMPLES = 256


def overlap(anchor: RDCurve, test: RDCurve) -> Tuple[float, float]:
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise NoOverlapError(
            f"curves {anchor.label!r} and {test.label!r} share no quality range "
            f"([{anchor.qualities.min():.4g}, {anchor.qualities.max():.4g}] vs "
            f"[{test.qualities.min():.4g}, {test.qualities.max():.4g}])"
        )
    return float(lo), float(hi)


def _cubic_integral(quality: np.ndarray, log_rate: np.ndarray, lo: float, hi: float) -> float:
    antiderivative = np.polyint(np.polyfit(quality, log_rate, 3))
    return float(np.polyval(antiderivative, hi) - np.polyval(antiderivative, lo))


def _cubic_is_monotone(quality: np.ndarray, log_rate: np.ndarray, lo: float, hi: float) -> bool:
    slope = np.polyder(np.polyfit(quality, log_rate, 3))
    return bool(np.all(np.polyval(slope, np.linspace(lo, hi, MONOTONE_SAMPLES)) > 0))


def _pchip_integral(quality: np.ndarray, log_rate: np.ndarray, lo: float, hi: float) -> float:
    order = np.argsort(quality)
    q = quality[order]
    if np.any(np.diff(q) <= 0):
        raise DataError("piecewise interpolation needs distinct quality values")
    return float(PchipInterpolator(q, log_rate[order]).integrate(lo, hi))


def _log_rate_integral(curve: RDCurve, lo: float, hi: float) -> float:
    q, r = curve.qualities, np.log(curve.bpps)
    if _cubic_is_monotone(q, r, lo, hi):
        return _cubic_integral(q, r, lo, hi)
    logger.info("Cubic fit of %r is not monotone, using piecewise interpolation", curve.label)
    return _pchip_integral(q, r, lo, hi)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """
    Average bitrate difference of test against anchor at equal quality, in
    percent. Negative means the test codec saves rate.

    Raises:
        DataError: a curve has fewer than four points
        NoOverlapError: the quality ranges do not intersect
    """
    for curve in (anchor, test):
        if len(curve) < MIN_POINTS:
            raise DataError(f"curve {curve.label!r} has {len(curve)} points, BD-rate needs {MIN_POINTS}")
    lo, hi = overlap(anchor, test)
    gap = (_log_rate_integral(test, lo, hi) - _log_rate_integral(anchor, lo, hi)) / (hi - lo)
    return float((np.exp(gap) - 1) * 100)


def bd_rate_table(curves: Dict[str, RDCurve], anchor_label: str) -> Dict[str, float]:
    """{label: BD-rate vs the anchor} for every other curve in a mapping."""
    if anchor_label not in curves:
        raise DataError(f"anchor {anchor_label!r} not among curves {sorted(curves)}")
    anchor = curves[anchor_label]
    return {label: bd_rate(anchor, curve) for label, curve in curves.items() if label != anchor_label}
