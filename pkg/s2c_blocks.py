"""
S2C block zoo.

A block is two pre-norm residual sub-blocks:
    y1 = x + Spatial(LN1(x))
    y2 = y1 + FFN(LN2(y1))
The spatial operator is identity, separable convolution or non-shifted window
attention; the FFN is vanilla, additive or gated (or absent).

Every operator exists twice: as a pure function over an explicit parameter
mapping (used by oracles and gradient checks) and as an nn.Module that owns
its parameters and calls the same function.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from constants import (
    DEFAULT_DW_KERNEL,
    DEFAULT_EXPANSION_RATIO,
    DEFAULT_WINDOW_SIZE,
    LAYER_NORM_EPS,
    FFNKind,
    SpatialKind,
    parse_enum,
)
from errors import ConfigurationError, ParameterShapeError

logger = logging.getLogger(__name__)

Params = Mapping[str, torch.Tensor]


@dataclass(frozen=True)
class BlockSpec:
    """
    Static description of one S2C block.

    Args:
        spatial_kind: identity, sepconv or attention
        ffn_kind: vanilla, additive, gated or none
        channels: feature width C
        window_size: attention window side
        dw_kernel: depthwise kernel size (odd)
        expansion_ratio: FFN hidden width multiplier r
        heads: attention heads (must divide channels)
    """
    spatial_kind: SpatialKind
    ffn_kind: FFNKind
    channels: int
    window_size: int = DEFAULT_WINDOW_SIZE
    dw_kernel: int = DEFAULT_DW_KERNEL
    expansion_ratio: int = DEFAULT_EXPANSION_RATIO
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "spatial_kind", parse_enum(SpatialKind, self.spatial_kind))
        object.__setattr__(self, "ffn_kind", parse_enum(FFNKind, self.ffn_kind))
        for name in ("channels", "window_size", "dw_kernel", "expansion_ratio", "heads"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.dw_kernel % 2 == 0:
            raise ConfigurationError(f"dw_kernel must be odd, got {self.dw_kernel}")
        if self.spatial_kind is SpatialKind.ATTENTION and self.channels % self.heads:
            raise ConfigurationError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})"
            )

    @property
    def hidden(self) -> int:
        return self.expansion_ratio * self.channels

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


# ---------------------------------------------------------------------------
# Parameter shapes and initialization
# ---------------------------------------------------------------------------

def spatial_param_shapes(spec: BlockSpec) -> Dict[str, Tuple[int, ...]]:
    C, k = spec.channels, spec.dw_kernel
    if spec.spatial_kind is SpatialKind.IDENTITY:
        return {}
    if spec.spatial_kind is SpatialKind.SEPCONV:
        return {
            "pw_in_weight": (C, C, 1, 1), "pw_in_bias": (C,),
            "dw_weight": (C, 1, k, k), "dw_bias": (C,),
            "pw_out_weight": (C, C, 1, 1), "pw_out_bias": (C,),
        }
    return {
        "qkv_weight": (3 * C, C, 1, 1), "qkv_bias": (3 * C,),
        "proj_weight": (C, C, 1, 1), "proj_bias": (C,),
    }


def ffn_param_shapes(spec: BlockSpec, kind: Optional[FFNKind] = None) -> Dict[str, Tuple[int, ...]]:
    kind = parse_enum(FFNKind, kind or spec.ffn_kind)
    C, H = spec.channels, spec.hidden
    if kind is FFNKind.NONE:
        return {}
    if kind is FFNKind.VANILLA:
        return {
            "w_in_weight": (H, C, 1, 1), "w_in_bias": (H,),
            "w_out_weight": (C, H, 1, 1), "w_out_bias": (C,),
        }
    return {
        "w_1_weight": (H, C, 1, 1), "w_1_bias": (H,),
        "w_2_weight": (H, C, 1, 1), "w_2_bias": (H,),
        "w_out_weight": (C, H, 1, 1), "w_out_bias": (C,),
    }


def block_param_shapes(spec: BlockSpec) -> Dict[str, Tuple[int, ...]]:
    """Flat shape table for a whole block, keys prefixed by sub-module."""
    C = spec.channels
    shapes = {"norm1.weight": (C,), "norm1.bias": (C,)}
    shapes.update({f"spatial.{k}": v for k, v in spatial_param_shapes(spec).items()})
    if spec.ffn_kind is not FFNKind.NONE:
        shapes.update({"norm2.weight": (C,), "norm2.bias": (C,)})
        shapes.update({f"ffn.{k}": v for k, v in ffn_param_shapes(spec).items()})
    return shapes


def _init_tensor(name: str, shape: Tuple[int, ...], shapes: Dict[str, Tuple[int, ...]],
                 dtype, device) -> torch.Tensor:
    # LayerNorm: unit scale, zero shift. Conv weights and biases: fan-in uniform.
    if name.endswith("norm1.weight") or name.endswith("norm2.weight"):
        return torch.ones(shape, dtype=dtype, device=device)
    if name.endswith("norm1.bias") or name.endswith("norm2.bias"):
        return torch.zeros(shape, dtype=dtype, device=device)
    weight_shape = shapes[name.replace("_bias", "_weight")] if name.endswith("_bias") else shape
    fan_in = math.prod(weight_shape[1:])
    bound = 1.0 / math.sqrt(fan_in)
    tensor = torch.empty(shape, dtype=dtype, device=device)
    if tensor.is_meta:
        return tensor
    return tensor.uniform_(-bound, bound)


def init_block_params(spec: BlockSpec, dtype=None, device=None) -> Dict[str, torch.Tensor]:
    """
    Create a freshly initialized parameter store for a block.
    Draws from the global torch RNG, so seeding makes it reproducible.
    """
    shapes = block_param_shapes(spec)
    return {name: _init_tensor(name, shape, shapes, dtype, device) for name, shape in shapes.items()}


def check_param_shapes(p: Params, expected: Dict[str, Tuple[int, ...]]) -> None:
    """Raise ParameterShapeError if p does not match the expected shape table."""
    missing = sorted(set(expected) - set(p))
    extra = sorted(set(p) - set(expected))
    if missing or extra:
        raise ParameterShapeError(f"parameter names differ: missing={missing} unexpected={extra}")
    for name, shape in expected.items():
        if tuple(p[name].shape) != tuple(shape):
            raise ParameterShapeError(
                f"{name}: expected shape {tuple(shape)}, got {tuple(p[name].shape)}"
            )


def _check_channels(x: torch.Tensor, spec: BlockSpec) -> None:
    if x.dim() != 4:
        raise ParameterShapeError(f"expected a 4-D feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != spec.channels:
        raise ParameterShapeError(
            f"input has {x.shape[1]} channels but the block expects {spec.channels}"
        )


def _group(p: Params, prefix: str) -> Dict[str, torch.Tensor]:
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# Functional operators
# ---------------------------------------------------------------------------

def layer_norm_2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                  eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """LayerNorm over the channel dimension at every spatial position."""
    x = x.permute(0, 2, 3, 1)
    x = F.layer_norm(x, (x.shape[-1],), weight, bias, eps)
    return x.permute(0, 3, 1, 2)


def identity_interaction(x: torch.Tensor) -> torch.Tensor:
    return x


def sepconv_interaction(x: torch.Tensor, p: Params, spec: BlockSpec) -> torch.Tensor:
    """Conv_pw(Conv_dw(GELU(Conv_pw(x)))) with same padding."""
    _check_channels(x, spec)
    check_param_shapes(p, spatial_param_shapes(spec))
    h = F.conv2d(x, p["pw_in_weight"], p["pw_in_bias"])
    h = F.gelu(h)
    h = F.conv2d(h, p["dw_weight"], p["dw_bias"], padding=spec.dw_kernel // 2, groups=spec.channels)
    return F.conv2d(h, p["pw_out_weight"], p["pw_out_bias"])


def effective_window(spec: BlockSpec, height: int, width: int) -> int:
    """Window side actually used: never larger than the feature map."""
    return max(1, min(spec.window_size, height, width))


def _pad_mode(pad_h: int, pad_w: int, height: int, width: int) -> str:
    return "reflect" if pad_h < height and pad_w < width else "replicate"


def window_attention_interaction(x: torch.Tensor, p: Params, spec: BlockSpec) -> torch.Tensor:
    """
    Multi-head softmax attention inside non-overlapping windows.
    No shift, no relative position bias. H and W are reflect-padded up to a
    multiple of the window and cropped back afterwards.
    """
    _check_channels(x, spec)
    check_param_shapes(p, spatial_param_shapes(spec))
    _, _, H, W = x.shape
    win = effective_window(spec, H, W)
    pad_h, pad_w = (-H) % win, (-W) % win
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=_pad_mode(pad_h, pad_w, H, W))

    qkv = F.conv2d(x, p["qkv_weight"], p["qkv_bias"])
    q, k, v = rearrange(
        qkv, "b (three heads d) (nh wh) (nw ww) -> three (b nh nw) heads (wh ww) d",
        three=3, heads=spec.heads, wh=win, ww=win,
    )
    scores = torch.matmul(q, k.transpose(-2, -1)) * (spec.head_dim ** -0.5)
    attn = scores.softmax(dim=-1)
    out = torch.matmul(attn, v)
    out = rearrange(
        out, "(b nh nw) heads (wh ww) d -> b (heads d) (nh wh) (nw ww)",
        nh=x.shape[2] // win, nw=x.shape[3] // win, wh=win, ww=win,
    )
    out = F.conv2d(out, p["proj_weight"], p["proj_bias"])
    return out[:, :, :H, :W]


def spatial_interaction(x: torch.Tensor, p: Params, spec: BlockSpec) -> torch.Tensor:
    if spec.spatial_kind is SpatialKind.IDENTITY:
        return identity_interaction(x)
    if spec.spatial_kind is SpatialKind.SEPCONV:
        return sepconv_interaction(x, p, spec)
    return window_attention_interaction(x, p, spec)


def apply_ffn(x: torch.Tensor, kind: Union[FFNKind, str], p: Params, spec: BlockSpec) -> torch.Tensor:
    """
    Position-wise channel aggregation; linear layers are 1x1 convolutions.

    vanilla:  GELU(x W_in) W_out
    additive: [GELU(x W_1) + SiLU(x W_2)] W_out
    gated:    [GELU(x W_1) * (x W_2)] W_out
    """
    kind = parse_enum(FFNKind, kind)
    _check_channels(x, spec)
    check_param_shapes(p, ffn_param_shapes(spec, kind))
    if kind is FFNKind.NONE:
        return torch.zeros_like(x)
    if kind is FFNKind.VANILLA:
        h = F.gelu(F.conv2d(x, p["w_in_weight"], p["w_in_bias"]))
    else:
        h1 = F.conv2d(x, p["w_1_weight"], p["w_1_bias"])
        h2 = F.conv2d(x, p["w_2_weight"], p["w_2_bias"])
        if kind is FFNKind.ADDITIVE:
            h = F.gelu(h1) + F.silu(h2)
        else:
            h = F.gelu(h1) * h2
    return F.conv2d(h, p["w_out_weight"], p["w_out_bias"])


def s2c_block(x: torch.Tensor, p: Params, spec: BlockSpec) -> torch.Tensor:
    """Full block over a flat, prefixed parameter mapping (see block_param_shapes)."""
    _check_channels(x, spec)
    check_param_shapes(p, block_param_shapes(spec))
    h = layer_norm_2d(x, p["norm1.weight"], p["norm1.bias"])
    y = x + spatial_interaction(h, _group(p, "spatial"), spec)
    if spec.ffn_kind is FFNKind.NONE:
        return y
    h = layer_norm_2d(y, p["norm2.weight"], p["norm2.bias"])
    return y + apply_ffn(h, spec.ffn_kind, _group(p, "ffn"), spec)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class LayerNorm2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm_2d(x, self.weight, self.bias)


class SpatialInteraction(nn.Module):
    """Spatial sub-module; the profiler hooks this for the spatial bucket."""

    def __init__(self, spec: BlockSpec, init: Optional[Params] = None):
        super().__init__()
        self.spec = spec
        self.weights = nn.ParameterDict({k: nn.Parameter(v) for k, v in (init or {}).items()})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return spatial_interaction(x, dict(self.weights), self.spec)

    def extra_repr(self) -> str:
        return f"kind={self.spec.spatial_kind.value}, channels={self.spec.channels}"


class ChannelAggregation(nn.Module):
    """LayerNorm + FFN; the profiler hooks this for the channel bucket."""

    def __init__(self, spec: BlockSpec, init: Optional[Params] = None):
        super().__init__()
        self.spec = spec
        self.norm = LayerNorm2d(spec.channels)
        self.weights = nn.ParameterDict({k: nn.Parameter(v) for k, v in (init or {}).items()})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_ffn(self.norm(x), self.spec.ffn_kind, dict(self.weights), self.spec)

    def extra_repr(self) -> str:
        return f"kind={self.spec.ffn_kind.value}, channels={self.spec.channels}"


class S2CBlock(nn.Module):
    """Residual spatial-interaction + channel-aggregation unit."""

    def __init__(self, spec: BlockSpec, dtype=None, device=None):
        super().__init__()
        self.spec = spec
        p = init_block_params(spec, dtype=dtype, device=device)
        self.norm1 = LayerNorm2d(spec.channels)
        self.spatial = SpatialInteraction(spec, _group(p, "spatial"))
        self.channel = (
            None if spec.ffn_kind is FFNKind.NONE
            else ChannelAggregation(spec, _group(p, "ffn"))
        )
        self.load_block_params(p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.spatial(self.norm1(x))
        if self.channel is not None:
            x = x + self.channel(x)
        return x

    def block_params(self) -> Dict[str, torch.Tensor]:
        """Flat view of the parameters in the s2c_block naming scheme."""
        p = {"norm1.weight": self.norm1.weight, "norm1.bias": self.norm1.bias}
        p.update({f"spatial.{k}": v for k, v in self.spatial.weights.items()})
        if self.channel is not None:
            p["norm2.weight"] = self.channel.norm.weight
            p["norm2.bias"] = self.channel.norm.bias
            p.update({f"ffn.{k}": v for k, v in self.channel.weights.items()})
        return p

    @torch.no_grad()
    def load_block_params(self, p: Params) -> None:
        check_param_shapes(p, block_param_shapes(self.spec))
        for name, target in self.block_params().items():
            target.copy_(p[name])


class S2CStage(nn.Sequential):
    """A stack of identical-spec blocks at one resolution."""

    def __init__(self, spec: BlockSpec, num_blocks: int, dtype=None, device=None):
        super().__init__(*[S2CBlock(spec, dtype=dtype, device=device) for _ in range(num_blocks)])
        self.spec = spec
        self.num_blocks = num_blocks
