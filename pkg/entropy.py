"""
Entropy model: quantization, likelihoods, rate estimation and the
space-channel context model (SCCTX).

Coding order for y under SCCTX: channel groups in order; inside a group the
checkerboard anchors (h + w even) come first, then the non-anchors. The
parameters of any slice depend only on z_hat, earlier groups and (for
non-anchors) the anchors of the current group.
"""

import functools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr

from constants import (
    FACTORIZED_FILTERS,
    FACTORIZED_INIT_SCALE,
    FACTORIZED_TAIL_MASS,
    LIKELIHOOD_FLOOR,
    SCALES_LEVELS,
    SCALES_MAX,
    SCALES_MIN,
    SIGMA_FLOOR,
    TAIL_SIGMAS,
    QuantMode,
    SpatialKind,
    parse_enum,
)
from errors import CodingError, ContextOrderError
from range_coder import pmf_to_quantized_cdf, validate_cdf
from s2c_blocks import BlockSpec, S2CStage

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Quantization and likelihoods
# ---------------------------------------------------------------------------

def round_half_away(v: torch.Tensor) -> torch.Tensor:
    return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)


def uniform_noise(like: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Samples in [-0.5, 0.5)."""
    return torch.rand(like.shape, dtype=like.dtype, device=like.device, generator=generator) - 0.5


def quantize(y: torch.Tensor, mu: torch.Tensor, mode: Union[QuantMode, str],
             noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    eval:  round(y - mu) + mu
    train: y + u, u ~ U[-0.5, 0.5) (rate path)
    """
    mode = parse_enum(QuantMode, mode)
    if mode is QuantMode.EVAL:
        return round_half_away(y - mu) + mu
    if noise is None:
        noise = uniform_noise(y)
    return y + noise


def quantize_ste(y: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Rounded value in the forward pass, identity gradient (distortion path)."""
    r = y - mu
    return mu + r + (round_half_away(r) - r).detach()


def positive_scale(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw).clamp_min(SIGMA_FLOOR)


def _standard_cdf(t: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-t * (2 ** -0.5))


def gaussian_likelihood(y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                        floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    """
    Mass of the integer bin around y_hat - mu under N(0, sigma^2),
    clamped below at floor.
    """
    if torch.any(sigma <= 0):
        raise CodingError("sigma must be strictly positive")
    values = torch.abs(y_hat - mu)
    upper = _standard_cdf((0.5 - values) / sigma)
    lower = _standard_cdf((-0.5 - values) / sigma)
    p = upper - lower
    return p.clamp_min(floor) if floor > 0 else p


class FactorizedPrior(nn.Module):
    """
    Per-channel univariate density for z with a learned monotone CDF:
    a stack of softplus-weighted affine maps with tanh gates, squashed by a
    sigmoid. Zero biases at init give a symmetric logistic centered at 0.
    """

    def __init__(self, channels: int, filters: Sequence[int] = FACTORIZED_FILTERS,
                 init_scale: float = FACTORIZED_INIT_SCALE):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, N) -> logit of the CDF, same shape."""
        for i, matrix in enumerate(self.matrices):
            x = torch.matmul(F.softplus(matrix.to(x.dtype)), x) + self.biases[i].to(x.dtype)
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i].to(x.dtype)) * torch.tanh(x)
        return x

    def cdf(self, t: torch.Tensor) -> torch.Tensor:
        """t: (C, N) evaluation points per channel."""
        return torch.sigmoid(self.logits_cumulative(t.unsqueeze(1))).squeeze(1)

    def likelihood(self, z_hat: torch.Tensor, floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
        N, C, H, W = z_hat.shape
        v = z_hat.transpose(0, 1).reshape(C, 1, -1)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        # evaluate in the tail that keeps the sigmoid difference accurate
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.reshape(C, N, H, W).transpose(0, 1)
        return p.clamp_min(floor) if floor > 0 else p

    @torch.no_grad()
    def quantiles(self, tail_mass: float = FACTORIZED_TAIL_MASS) -> Tuple[torch.Tensor, torch.Tensor]:
        """Per-channel points where the CDF equals tail_mass/2 and 1 - tail_mass/2."""
        target = math.log(tail_mass / 2) - math.log1p(-tail_mass / 2)
        device = self.matrices[0].device
        return self._solve(target, device), self._solve(-target, device)

    def _solve(self, target: float, device) -> torch.Tensor:
        C = self.channels
        lo = torch.full((C, 1, 1), -1.0, dtype=torch.float64, device=device)
        hi = torch.full((C, 1, 1), 1.0, dtype=torch.float64, device=device)
        for _ in range(64):
            below = self.logits_cumulative(lo) > target
            above = self.logits_cumulative(hi) < target
            if not (below.any() or above.any()):
                break
            lo = torch.where(below, lo * 2, lo)
            hi = torch.where(above, hi * 2, hi)
        for _ in range(64):
            mid = (lo + hi) / 2
            go_up = self.logits_cumulative(mid) < target
            lo = torch.where(go_up, mid, lo)
            hi = torch.where(go_up, hi, mid)
        return ((lo + hi) / 2).flatten()


def factorized_likelihood(z_hat: torch.Tensor, prior: FactorizedPrior,
                          floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    return prior.likelihood(z_hat, floor=floor)


# ---------------------------------------------------------------------------
# Space-channel context model
# ---------------------------------------------------------------------------

def checkerboard_mask(height: int, width: int, device=None) -> torch.Tensor:
    """Boolean (1, 1, H, W) map, True at anchors ((h + w) even)."""
    h = torch.arange(height, device=device).view(-1, 1)
    w = torch.arange(width, device=device).view(1, -1)
    return ((h + w) % 2 == 0).view(1, 1, height, width)


def keep_anchors(t: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask, t, torch.zeros_like(t))


class ChannelContextMiner(nn.Sequential):
    """Previously decoded groups -> channel context, mined with S2C-Conv blocks."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int, spec: BlockSpec, num_blocks: int):
        super().__init__(
            nn.Conv2d(in_ch, hidden, 3, padding=1),
            S2CStage(spec, num_blocks),
            nn.Conv2d(hidden, out_ch, 3, padding=1),
        )


class ParameterAggregator(nn.Sequential):
    """Per-pixel fusion of hyper, channel and spatial context with S2C-Identity blocks."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int, spec: BlockSpec, num_blocks: int):
        super().__init__(
            nn.Conv2d(in_ch, hidden, 1),
            S2CStage(spec, num_blocks),
            nn.Conv2d(hidden, out_ch, 1),
        )


class SpaceChannelContext(nn.Module):
    def __init__(self, config):
        super().__init__()
        entropy = config.entropy
        self.widths = config.group_widths
        self.checkerboard = entropy.checkerboard
        hyper_ch = 2 * config.latent_channels

        def spec(kind: SpatialKind, channels: int) -> BlockSpec:
            return BlockSpec(
                spatial_kind=kind, ffn_kind=config.ffn_kind, channels=channels,
                window_size=config.window_size, dw_kernel=config.dw_kernel,
                expansion_ratio=config.expansion_ratio,
            )

        self.channel_mining = nn.ModuleList()
        self.spatial_context = nn.ModuleList()
        self.aggregation = nn.ModuleList()
        for g, width in enumerate(self.widths):
            hidden = entropy.context_hidden or 2 * width
            in_ch = hyper_ch
            if g > 0:
                self.channel_mining.append(ChannelContextMiner(
                    sum(self.widths[:g]), 2 * width, hidden,
                    spec(SpatialKind.SEPCONV, hidden), entropy.mining_blocks,
                ))
                in_ch += 2 * width
            if self.checkerboard:
                self.spatial_context.append(nn.Conv2d(width, 2 * width, 5, padding=2))
                in_ch += 2 * width
            self.aggregation.append(ParameterAggregator(
                in_ch, 2 * width, hidden,
                spec(SpatialKind.IDENTITY, hidden), entropy.aggregation_blocks,
            ))

    def group_parameters(self, g: int, hyper: torch.Tensor, decoded: Sequence[torch.Tensor],
                         anchor_hat: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        parts = [hyper]
        if g > 0:
            parts.append(self.channel_mining[g - 1](torch.cat(list(decoded), dim=1)))
        if self.checkerboard:
            width = self.widths[g]
            if anchor_hat is None:
                N, _, H, W = hyper.shape
                parts.append(hyper.new_zeros(N, 2 * width, H, W))
            else:
                mask = checkerboard_mask(*anchor_hat.shape[-2:], device=anchor_hat.device)
                parts.append(self.spatial_context[g](keep_anchors(anchor_hat, mask)))
        mu, raw = self.aggregation[g](torch.cat(parts, dim=1)).chunk(2, dim=1)
        return mu, positive_scale(raw)


def scctx_parameters(y_groups_decoded: Sequence[torch.Tensor], z_hat: torch.Tensor, model,
                     anchor_hat: Optional[torch.Tensor] = None,
                     hyper: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (mu, sigma) for the next group to decode.

    Args:
        y_groups_decoded: fully decoded groups, in order
        z_hat: quantized hyper-latent
        model: assembled S2CModel
        anchor_hat: current group's decoded anchors; None requests the anchor phase
        hyper: cached h_s(z_hat) output, recomputed when None

    Raises:
        ContextOrderError: groups out of order or phase not available
    """
    if hyper is None:
        hyper = model.h_s(z_hat)
    if model.context is None:
        mu, raw = hyper.chunk(2, dim=1)
        return mu, positive_scale(raw)

    widths = model.context.widths
    g = len(y_groups_decoded)
    if g >= len(widths):
        raise ContextOrderError(f"all {len(widths)} groups are already decoded")
    for i, t in enumerate(y_groups_decoded):
        if t.shape[1] != widths[i]:
            raise ContextOrderError(
                f"decoded group {i} has {t.shape[1]} channels, expected {widths[i]}"
            )
    if anchor_hat is not None:
        if not model.context.checkerboard:
            raise ContextOrderError("checkerboard phases are disabled for this model")
        if anchor_hat.shape[1] != widths[g]:
            raise ContextOrderError(
                f"anchors have {anchor_hat.shape[1]} channels, group {g} has {widths[g]}"
            )
    return model.context.group_parameters(g, hyper, y_groups_decoded, anchor_hat)


# ---------------------------------------------------------------------------
# Forward pass and rate
# ---------------------------------------------------------------------------

@dataclass
class LatentBundle:
    y: torch.Tensor
    y_hat: torch.Tensor
    z: torch.Tensor
    z_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    y_likelihoods: torch.Tensor
    z_likelihoods: torch.Tensor
    num_pixels: int


def latent_forward(model, y: torch.Tensor, num_pixels: int, noisy: bool = True) -> LatentBundle:
    """
    Run hyper-prior and context model over y.

    noisy=True is the training pass: the rate path sees y + u; the
    distortion/context path sees straight-through rounding (or the same noisy
    values when the entropy config selects the "noise" quantizer).
    noisy=False reproduces exactly what the decoder reconstructs.
    """
    z = model.h_a(y)
    if noisy:
        z_hat = quantize(z, torch.zeros_like(z), QuantMode.TRAIN)
    else:
        z_hat = round_half_away(z)
    z_likelihoods = model.entropy_bottleneck.likelihood(z_hat)
    hyper = model.h_s(z_hat)

    pure_noise = model.config.entropy.quantizer == "noise"

    def context_value(t: torch.Tensor, mu: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        if not noisy:
            return quantize(t, mu, QuantMode.EVAL)
        if pure_noise:
            return t + noise
        return quantize_ste(t, mu)

    if model.context is None:
        mu, sigma = scctx_parameters([], z_hat, model, hyper=hyper)
        noise = uniform_noise(y) if noisy else None
        y_hat = context_value(y, mu, noise)
        rate_values = y + noise if noisy else y_hat
        y_likelihoods = gaussian_likelihood(rate_values, mu, sigma)
        return LatentBundle(y, y_hat, z, z_hat, mu, sigma, y_likelihoods, z_likelihoods, num_pixels)

    decoded, mus, sigmas, likelihoods = [], [], [], []
    mask = checkerboard_mask(*y.shape[-2:], device=y.device)
    for y_g in torch.split(y, list(model.context.widths), dim=1):
        noise = uniform_noise(y_g) if noisy else None
        mu, sigma = scctx_parameters(decoded, z_hat, model, hyper=hyper)
        if model.context.checkerboard:
            anchors = keep_anchors(context_value(y_g, mu, noise), mask)
            mu_n, sigma_n = scctx_parameters(decoded, z_hat, model, anchor_hat=anchors, hyper=hyper)
            mu = torch.where(mask, mu, mu_n)
            sigma = torch.where(mask, sigma, sigma_n)
        y_hat_g = context_value(y_g, mu, noise)
        rate_values = y_g + noise if noisy else y_hat_g
        likelihoods.append(gaussian_likelihood(rate_values, mu, sigma))
        decoded.append(y_hat_g)
        mus.append(mu)
        sigmas.append(sigma)

    return LatentBundle(
        y=y, y_hat=torch.cat(decoded, dim=1), z=z, z_hat=z_hat,
        mu=torch.cat(mus, dim=1), sigma=torch.cat(sigmas, dim=1),
        y_likelihoods=torch.cat(likelihoods, dim=1), z_likelihoods=z_likelihoods,
        num_pixels=num_pixels,
    )


def rate_estimate(bundle: LatentBundle) -> Tuple[torch.Tensor, torch.Tensor]:
    """(bpp_y, bpp_z) = sum(-log2 p) / (batch * original pixel count)."""
    denom = bundle.y.shape[0] * bundle.num_pixels
    bpp_y = (-torch.log2(bundle.y_likelihoods)).sum() / denom
    bpp_z = (-torch.log2(bundle.z_likelihoods)).sum() / denom
    return bpp_y, bpp_z


# ---------------------------------------------------------------------------
# Quantized CDF tables for the codec
# ---------------------------------------------------------------------------

@dataclass
class CDFTables:
    """
    cdfs[t] codes the integer values offsets[t] ... offsets[t] + K_t - 2 as
    symbols 0 ... K_t - 2; the last symbol (K_t - 1) is the escape.
    """
    cdfs: List[List[int]]
    offsets: List[int]

    def __len__(self) -> int:
        return len(self.cdfs)

    def escape_symbol(self, index: int) -> int:
        return len(self.cdfs[index]) - 2


def scale_table(minimum: float = SCALES_MIN, maximum: float = SCALES_MAX,
                levels: int = SCALES_LEVELS) -> np.ndarray:
    return np.exp(np.linspace(math.log(minimum), math.log(maximum), levels))


def scale_indexes(sigma: Union[torch.Tensor, np.ndarray], scales: Optional[np.ndarray] = None) -> np.ndarray:
    """Nearest table scale in log space for every sigma."""
    scales = scale_table() if scales is None else np.asarray(scales)
    if isinstance(sigma, torch.Tensor):
        sigma = sigma.detach().cpu().double().numpy()
    log_scales = np.log(scales)
    step = (log_scales[-1] - log_scales[0]) / max(1, len(scales) - 1)
    # non-finite scales (corrupt hyper-latents) map to the widest table
    sigma = np.nan_to_num(np.asarray(sigma, dtype=np.float64), nan=scales[-1], posinf=scales[-1])
    idx = np.rint((np.log(np.maximum(sigma, scales[0])) - log_scales[0]) / step)
    return np.clip(idx, 0, len(scales) - 1).astype(np.int64)


def build_gaussian_cdf_tables(scales: Optional[np.ndarray] = None) -> CDFTables:
    """Zero-mean discretized Gaussian tables, support +-ceil(6 s) plus escape."""
    scales = scale_table() if scales is None else np.asarray(scales)
    cdfs, offsets = [], []
    for s in scales:
        tail = int(math.ceil(s * TAIL_SIGMAS))
        k = np.arange(-tail, tail + 1, dtype=np.float64)
        pmf = ndtr((k + 0.5) / s) - ndtr((k - 0.5) / s)
        escape = 2 * ndtr(-(tail + 0.5) / s)
        cdfs.append(validate_cdf(pmf_to_quantized_cdf(np.append(pmf, escape))))
        offsets.append(-tail)
    return CDFTables(cdfs, offsets)


@functools.lru_cache(maxsize=1)
def default_gaussian_tables() -> CDFTables:
    return build_gaussian_cdf_tables()


@torch.no_grad()
def factorized_cdf_tables(prior: FactorizedPrior, tail_mass: float = FACTORIZED_TAIL_MASS) -> CDFTables:
    """One table per channel over the integer support between the tail quantiles."""
    lower, upper = prior.quantiles(tail_mass)
    lo = torch.floor(lower).long()
    hi = torch.ceil(upper).long()
    length = int((hi - lo).max().item()) + 1
    grid = lo.double().view(-1, 1) + torch.arange(length, dtype=torch.float64, device=lo.device)
    cdf_lo = prior.cdf(grid - 0.5)
    cdf_hi = prior.cdf(grid + 0.5)
    pmf = (cdf_hi - cdf_lo).cpu().numpy()
    below = cdf_lo[:, 0].cpu().numpy()
    cdfs, offsets = [], []
    for c in range(prior.channels):
        n = int(hi[c] - lo[c]) + 1
        above = 1.0 - float(cdf_hi[c, n - 1])
        escape = max(float(below[c]) + above, 0.0)
        cdfs.append(validate_cdf(pmf_to_quantized_cdf(np.append(np.clip(pmf[c, :n], 0, None), escape))))
        offsets.append(int(lo[c]))
    return CDFTables(cdfs, offsets)
