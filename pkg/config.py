"""
Configuration objects for models and training.

Model variants are declared in YAML files under configs/ (one per preset) and
loaded into dataclasses that validate themselves on construction.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv

from constants import (
    CUSTOM_VARIANT_ID,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CLIP_NORM,
    DEFAULT_DW_KERNEL,
    DEFAULT_EXPANSION_RATIO,
    DEFAULT_GROUP_WIDTHS,
    DEFAULT_HEAD_DIM,
    DEFAULT_HYPER_CHANNELS,
    DEFAULT_LATENT_CHANNELS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_PATCH_SIZE,
    DEFAULT_WINDOW_SIZE,
    MSE_DISTORTION_SCALE,
    MSE_LAMBDAS,
    MSSSIM_LAMBDAS,
    UNKNOWN_LAMBDA_INDEX,
    VARIANT_IDS,
    ContextMode,
    FFNKind,
    Metric,
    StageKind,
    parse_enum,
)
from errors import ConfigurationError
from s2c_blocks import BlockSpec

logger = logging.getLogger(__name__)

load_dotenv()

DEFAULT_CONFIG_DIR = Path(__file__).resolve().parent / "configs"

# Quantizer conventions for the training forward pass
QUANTIZER_STE = "ste"      # noise for the rate path, straight-through rounding for distortion
QUANTIZER_NOISE = "noise"  # noise for both paths


def config_dir() -> Path:
    return Path(os.environ.get("S2C_CONFIG_DIR") or DEFAULT_CONFIG_DIR)


def log_level() -> str:
    return os.environ.get("S2C_LOG_LEVEL", "INFO").upper()


def run_slow() -> bool:
    return os.environ.get("S2C_RUN_SLOW", "0").lower() in ("1", "true", "yes")


@dataclass(frozen=True)
class StageSpec:
    """One transform stage: L blocks of a single kind at width C."""
    kind: StageKind
    num_blocks: int
    channels: int

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_enum(StageKind, self.kind))
        if not isinstance(self.num_blocks, int) or self.num_blocks < 0:
            raise ConfigurationError(f"num_blocks must be >= 0, got {self.num_blocks!r}")
        if not isinstance(self.channels, int) or self.channels < 1:
            raise ConfigurationError(f"channels must be > 0, got {self.channels!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "num_blocks": self.num_blocks, "channels": self.channels}


@dataclass(frozen=True)
class EntropyConfig:
    """
    Entropy model options.

    group_widths partitions the latent channels into the sequentially decoded
    groups; when None, widths are derived from num_channel_groups with the
    uneven doubling rule (see resolve_group_widths).
    """
    context_mode: ContextMode = ContextMode.SCCTX
    num_channel_groups: int = 5
    group_widths: Optional[Tuple[int, ...]] = DEFAULT_GROUP_WIDTHS
    checkerboard: bool = True
    hyper_channels: int = DEFAULT_HYPER_CHANNELS
    context_hidden: int = 0  # 0 means twice the group width
    mining_blocks: int = 1
    aggregation_blocks: int = 1
    quantizer: str = QUANTIZER_STE

    def __post_init__(self):
        object.__setattr__(self, "context_mode", parse_enum(ContextMode, self.context_mode))
        if self.num_channel_groups < 1:
            raise ConfigurationError("num_channel_groups must be >= 1")
        if self.group_widths is not None:
            widths = tuple(int(w) for w in self.group_widths)
            if len(widths) != self.num_channel_groups or min(widths) < 1:
                raise ConfigurationError(
                    f"group_widths {widths} must list {self.num_channel_groups} positive widths"
                )
            object.__setattr__(self, "group_widths", widths)
        if self.hyper_channels < 1 or self.context_hidden < 0:
            raise ConfigurationError("hyper_channels must be > 0 and context_hidden >= 0")
        if self.mining_blocks < 0 or self.aggregation_blocks < 0:
            raise ConfigurationError("block counts must be >= 0")
        if self.quantizer not in (QUANTIZER_STE, QUANTIZER_NOISE):
            raise ConfigurationError(f"Unknown quantizer {self.quantizer!r}")

    def resolve_group_widths(self, latent_channels: int) -> Tuple[int, ...]:
        if self.group_widths is not None:
            widths = self.group_widths
        else:
            # uneven: u, u, 2u, 4u, ..., remainder for the last group
            count = self.num_channel_groups
            unit = max(1, latent_channels // (2 ** max(0, count - 1) + 4)) if count > 1 else latent_channels
            widths = [unit * 2 ** max(0, i - 1) for i in range(count - 1)]
            widths.append(latent_channels - sum(widths))
            widths = tuple(widths)
        if sum(widths) != latent_channels or min(widths) < 1:
            raise ConfigurationError(
                f"group widths {widths} do not partition {latent_channels} latent channels"
            )
        return tuple(widths)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["context_mode"] = self.context_mode.value
        d["group_widths"] = list(self.group_widths) if self.group_widths is not None else None
        return d


def _stage(data: Union["StageSpec", Dict[str, Any]]) -> StageSpec:
    if isinstance(data, StageSpec):
        return data
    try:
        return StageSpec(**data)
    except TypeError as e:
        raise ConfigurationError(f"Invalid stage entry {data!r}: {e}")


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of a full codec variant."""
    variant_name: str = "custom"
    main_stages: Tuple[StageSpec, ...] = ()
    latent_channels: int = DEFAULT_LATENT_CHANNELS
    hyper_stages: Tuple[StageSpec, ...] = ()
    ffn_kind: FFNKind = FFNKind.GATED
    window_size: int = DEFAULT_WINDOW_SIZE
    dw_kernel: int = DEFAULT_DW_KERNEL
    expansion_ratio: int = DEFAULT_EXPANSION_RATIO
    head_dim: int = DEFAULT_HEAD_DIM
    entropy: EntropyConfig = field(default_factory=EntropyConfig)

    def __post_init__(self):
        if isinstance(self.entropy, dict):
            object.__setattr__(self, "entropy", EntropyConfig(**self.entropy))
        object.__setattr__(self, "ffn_kind", parse_enum(FFNKind, self.ffn_kind))
        object.__setattr__(self, "main_stages", tuple(_stage(s) for s in self.main_stages))
        hyper = tuple(_stage(s) for s in self.hyper_stages) or (
            StageSpec(StageKind.C, 1, self.entropy.hyper_channels),
            StageSpec(StageKind.C, 1, self.entropy.hyper_channels),
        )
        object.__setattr__(self, "hyper_stages", hyper)
        if len(self.main_stages) != 3:
            raise ConfigurationError(
                f"main_stages must hold 3 stages (H/4, H/8, H/16), got {len(self.main_stages)}"
            )
        if len(self.hyper_stages) != 2:
            raise ConfigurationError("hyper_stages must hold 2 stages (h_a, h_s)")
        if self.latent_channels < 1:
            raise ConfigurationError("latent_channels must be > 0")
        for name in ("window_size", "dw_kernel", "expansion_ratio", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be > 0")
        self.entropy.resolve_group_widths(self.latent_channels)
        # builds and validates every block spec up front
        for stage in self.main_stages + self.hyper_stages:
            self.block_spec(stage)

    @property
    def variant_id(self) -> int:
        return VARIANT_IDS.get(self.variant_name, CUSTOM_VARIANT_ID)

    @property
    def group_widths(self) -> Tuple[int, ...]:
        return self.entropy.resolve_group_widths(self.latent_channels)

    def heads_for(self, channels: int) -> int:
        if channels % self.head_dim == 0:
            return channels // self.head_dim
        return 1

    def block_spec(self, stage: StageSpec, ffn_kind: Optional[FFNKind] = None) -> BlockSpec:
        return BlockSpec(
            spatial_kind=stage.kind.spatial_kind,
            ffn_kind=ffn_kind or self.ffn_kind,
            channels=stage.channels,
            window_size=self.window_size,
            dw_kernel=self.dw_kernel,
            expansion_ratio=self.expansion_ratio,
            heads=self.heads_for(stage.channels),
        )

    def with_ffn(self, kind: Union[FFNKind, str]) -> "ModelConfig":
        """Same variant with another channel-aggregation kind (FFN comparison runs)."""
        kind = parse_enum(FFNKind, kind)
        if kind is self.ffn_kind:
            return self
        return replace(self, variant_name=f"{self.variant_name}+ffn-{kind.value}", ffn_kind=kind)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant_name": self.variant_name,
            "main_stages": [s.to_dict() for s in self.main_stages],
            "latent_channels": self.latent_channels,
            "hyper_stages": [s.to_dict() for s in self.hyper_stages],
            "ffn_kind": self.ffn_kind.value,
            "window_size": self.window_size,
            "dw_kernel": self.dw_kernel,
            "expansion_ratio": self.expansion_ratio,
            "head_dim": self.head_dim,
            "entropy": self.entropy.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        entropy = data.pop("entropy", None) or {}
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"Unknown model config keys: {sorted(unknown)}")
        try:
            return cls(entropy=EntropyConfig(**entropy), **data)
        except TypeError as e:
            raise ConfigurationError(f"Invalid model config: {e}")


def list_presets() -> List[str]:
    return sorted(p.stem for p in config_dir().glob("*.yaml"))


def load_model_config(name_or_path: Union[str, Path]) -> ModelConfig:
    """
    Resolve a preset by name (configs/<name>.yaml) or load an explicit YAML path.

    Raises:
        ConfigurationError: unknown preset or malformed file
    """
    path = Path(name_or_path)
    if not path.suffix:
        path = config_dir() / f"{name_or_path}.yaml"
    if not path.is_file():
        raise ConfigurationError(
            f"Unknown preset or config file {str(name_or_path)!r} "
            f"(available: {', '.join(list_presets())})"
        )
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Malformed config {path}: {e}")
    config = ModelConfig.from_dict(data)
    logger.debug("Loaded model config %s from %s", config.variant_name, path)
    return config


def save_model_config(config: ModelConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path


@dataclass
class TrainConfig:
    """
    Optimization protocol. Defaults:
    Adam, lr 1e-4, batch 8 of 256x256 patches, constant learning rate.
    """
    lmbda: float = 0.0130
    metric: Metric = Metric.MSE
    batch_size: int = DEFAULT_BATCH_SIZE
    patch_size: int = DEFAULT_PATCH_SIZE
    steps: int = 1000
    lr: float = DEFAULT_LEARNING_RATE
    seed: int = 0
    dataset_path: Optional[str] = None
    out_dir: str = "runs/train"
    checkpoint_every: int = 1000
    log_every: int = 10
    clip_norm: Optional[float] = DEFAULT_CLIP_NORM
    cosine_decay: bool = False
    distortion_scale: Optional[float] = None
    prefetch: int = 2

    def __post_init__(self):
        self.metric = parse_enum(Metric, self.metric)
        if self.lmbda <= 0:
            raise ConfigurationError(f"lambda must be > 0, got {self.lmbda}")
        if self.batch_size < 1 or self.steps < 0 or self.patch_size < 1:
            raise ConfigurationError("batch_size and patch_size must be > 0, steps >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigurationError("checkpoint_every and log_every must be > 0")
        if self.metric is Metric.MSSSIM and self.patch_size <= 160:
            # five-scale MS-SSIM needs the smallest side above 160 pixels
            raise ConfigurationError("MS-SSIM training needs patch_size > 160")
        if self.distortion_scale is None:
            self.distortion_scale = MSE_DISTORTION_SCALE if self.metric is Metric.MSE else 1.0
        if self.prefetch < 0:
            raise ConfigurationError("prefetch must be >= 0")

    @property
    def lambda_ladder(self) -> Tuple[float, ...]:
        return MSE_LAMBDAS if self.metric is Metric.MSE else MSSSIM_LAMBDAS

    @property
    def lambda_index(self) -> int:
        for i, value in enumerate(self.lambda_ladder):
            if abs(value - self.lmbda) < 1e-9:
                return i
        return UNKNOWN_LAMBDA_INDEX

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["metric"] = self.metric.value
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown train config keys: {sorted(unknown)}")
        return cls(**data)
