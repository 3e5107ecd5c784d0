"""
Latency decomposition, decoding latency, training throughput and analytic
parameter / FLOP counts.

Timing uses forward pre/post hooks on every SpatialInteraction and
ChannelAggregation module; the device is synchronized before each clock read
and the median over repetitions is reported. The headline buckets cover the
main transforms (g_a, g_s); blocks inside the entropy model (hyper
transforms and context networks) are timed into their own bucket. Only one
profiler may hold the device at a time (advisory file lock).
"""

import copy
import logging
import statistics
import tempfile
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
from filelock import FileLock, Timeout

from constants import MIN_PROFILE_REPS, FFNKind, Metric, SpatialKind
from entropy import round_half_away, scctx_parameters
from errors import ProfilerError
from s2c_blocks import BlockSpec, ChannelAggregation, SpatialInteraction, effective_window
from utils import log_action

logger = logging.getLogger(__name__)

DEFAULT_LOCK = Path(tempfile.gettempdir()) / "s2c-profiler.lock"
LOCK_TIMEOUT_S = 600
SPATIAL = "spatial_interaction_ms"
CHANNEL = "channel_aggregation_ms"
MAIN_PATH = ("g_a.", "g_s.")


@dataclass
class LatencyProfile:
    variant: str
    spatial_interaction_ms: float
    channel_aggregation_ms: float
    other_ms: float
    total_ms: float
    entropy_blocks_ms: float = 0.0
    per_stage: Dict[str, Dict[str, float]] = field(default_factory=dict)
    device: str = "cpu"
    input_size: Tuple[int, int] = (256, 256)
    reps: int = MIN_PROFILE_REPS
    warmup: int = 1

    @property
    def block_ms(self) -> float:
        return self.spatial_interaction_ms + self.channel_aggregation_ms

    @property
    def spatial_share(self) -> float:
        return self.spatial_interaction_ms / self.total_ms if self.total_ms > 0 else 0.0

    @property
    def spatial_channel_ratio(self) -> float:
        if self.channel_aggregation_ms == 0:
            return float("inf") if self.spatial_interaction_ms > 0 else 0.0
        return self.spatial_interaction_ms / self.channel_aggregation_ms

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["spatial_channel_ratio"] = self.spatial_channel_ratio
        d["spatial_share"] = self.spatial_share
        return d

    def to_report(self) -> str:
        lines = [
            f"variant: {self.variant}",
            f"device: {self.device}  input: {self.input_size[0]}x{self.input_size[1]}  "
            f"reps: {self.reps}  warmup: {self.warmup}",
            f"total_ms: {self.total_ms:.3f}",
            f"spatial_interaction_ms: {self.spatial_interaction_ms:.3f}",
            f"channel_aggregation_ms: {self.channel_aggregation_ms:.3f}",
            f"entropy_blocks_ms: {self.entropy_blocks_ms:.3f}",
            f"other_ms: {self.other_ms:.3f}",
            f"spatial_channel_ratio: {self.spatial_channel_ratio:.3f}",
            f"spatial_share: {self.spatial_share:.4f}",
            "stages:",
        ]
        for stage, buckets in self.per_stage.items():
            lines.append(f"  {stage}: spatial={buckets[SPATIAL]:.3f} channel={buckets[CHANNEL]:.3f}")
        return "\n".join(lines)


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def _stage_name(module_name: str) -> str:
    # "<stage>.<block index>.<spatial|channel>"
    return module_name.rsplit(".", 2)[0]


@torch.no_grad()
def inference_pass(model, x: torch.Tensor) -> torch.Tensor:
    """
    Every transform and every entropy-parameter evaluation the codec runs for
    one image, without the entropy coder. Works on meta tensors.
    """
    y = model.g_a(x)
    z_hat = round_half_away(model.h_a(y))
    hyper = model.h_s(z_hat)
    if model.context is not None:
        decoded = []
        for y_g in torch.split(y, list(model.context.widths), dim=1):
            scctx_parameters(decoded, z_hat, model, hyper=hyper)
            if model.context.checkerboard:
                scctx_parameters(decoded, z_hat, model, anchor_hat=y_g, hyper=hyper)
            decoded.append(y_g)
    return model.g_s(y)


class _BucketTimer:
    def __init__(self, model: nn.Module, device: torch.device):
        self.device = device
        self.starts: Dict[int, float] = {}
        self.times: Dict[Tuple[str, str], float] = defaultdict(float)
        self.handles = []
        for name, module in model.named_modules():
            if isinstance(module, SpatialInteraction):
                self._attach(module, _stage_name(name), SPATIAL)
            elif isinstance(module, ChannelAggregation):
                self._attach(module, _stage_name(name), CHANNEL)

    def _attach(self, module: nn.Module, stage: str, bucket: str) -> None:
        def pre_hook(m, inputs):
            _sync(self.device)
            self.starts[id(m)] = time.perf_counter()

        def post_hook(m, inputs, output):
            _sync(self.device)
            self.times[(stage, bucket)] += (time.perf_counter() - self.starts.pop(id(m))) * 1e3

        self.handles.append(module.register_forward_pre_hook(pre_hook))
        self.handles.append(module.register_forward_hook(post_hook))

    def reset(self) -> None:
        self.times.clear()

    def remove(self) -> None:
        for handle in self.handles:
            handle.remove()
        self.handles = []


def split_buckets(sample: Dict[Tuple[str, str], float]) -> Tuple[float, float, float]:
    """
    (spatial, channel, entropy-model) totals of one timed pass. Stages under
    g_a / g_s fill the first two; every other hooked stage lands in the third.
    """
    spatial = channel = entropy_blocks = 0.0
    for (stage, bucket), value in sample.items():
        if not stage.startswith(MAIN_PATH):
            entropy_blocks += value
        elif bucket == SPATIAL:
            spatial += value
        else:
            channel += value
    return spatial, channel, entropy_blocks


def profile_latency(model, input_size: Tuple[int, int] = (256, 256), reps: int = 5, warmup: int = 2,
                    lock_path: Union[str, Path] = DEFAULT_LOCK) -> LatencyProfile:
    """
    Median wall time of the spatial-interaction and channel-aggregation
    buckets (per stage, and summed over the main transforms) over reps
    forward passes. Entropy-model blocks are reported in entropy_blocks_ms.

    Raises:
        ProfilerError: reps < 3, negative warmup, or the device lock is held elsewhere
    """
    if reps < MIN_PROFILE_REPS:
        raise ProfilerError(f"reps must be >= {MIN_PROFILE_REPS}, got {reps}")
    if warmup < 0:
        raise ProfilerError(f"warmup must be >= 0, got {warmup}")
    param = next(model.parameters())
    device = param.device
    x = torch.rand(1, 3, *input_size, dtype=param.dtype, device=device)
    model.eval()

    try:
        with FileLock(str(lock_path), timeout=LOCK_TIMEOUT_S):
            timer = _BucketTimer(model, device)
            try:
                for _ in range(warmup):
                    inference_pass(model, x)
                totals, samples = [], []
                for _ in range(reps):
                    timer.reset()
                    _sync(device)
                    start = time.perf_counter()
                    inference_pass(model, x)
                    _sync(device)
                    totals.append((time.perf_counter() - start) * 1e3)
                    samples.append(dict(timer.times))
            finally:
                timer.remove()
    except Timeout:
        raise ProfilerError(f"profiler lock {lock_path} is held by another process")

    keys = sorted({k for s in samples for k in s})
    medians = {k: statistics.median(s.get(k, 0.0) for s in samples) for k in keys}
    per_stage: Dict[str, Dict[str, float]] = {}
    for (stage, bucket), value in medians.items():
        per_stage.setdefault(stage, {SPATIAL: 0.0, CHANNEL: 0.0})[bucket] = value
    split = [split_buckets(s) for s in samples]
    spatial, channel, entropy_blocks = (statistics.median(column) for column in zip(*split))
    total = statistics.median(totals)

    profile = LatencyProfile(
        variant=model.config.variant_name,
        spatial_interaction_ms=spatial, channel_aggregation_ms=channel,
        other_ms=max(total - spatial - channel - entropy_blocks, 0.0), total_ms=total,
        entropy_blocks_ms=entropy_blocks,
        per_stage=per_stage, device=str(device), input_size=tuple(input_size),
        reps=reps, warmup=warmup,
    )
    log_action("Profiler", "latency_profiled", {
        "variant": profile.variant, "total_ms": round(total, 3),
        "spatial_ms": round(spatial, 3), "channel_ms": round(channel, 3), "entropy_blocks_ms": round(entropy_blocks, 3),
    })
    return profile


# ---------------------------------------------------------------------------
# Analytic counts
# ---------------------------------------------------------------------------

def conv_flops(module: nn.Module, in_shape, out_shape) -> int:
    k = module.kernel_size[0] * module.kernel_size[1]
    if isinstance(module, nn.ConvTranspose2d):
        # every input pixel scatters a k x k x C_out/groups patch
        n, c_in, h, w = in_shape
        return 2 * k * c_in * (module.out_channels // module.groups) * h * w * n
    n, c_out, h, w = out_shape
    return 2 * k * (module.in_channels // module.groups) * c_out * h * w * n


def spatial_flops(spec: BlockSpec, height: int, width: int) -> int:
    C, hw = spec.channels, height * width
    if spec.spatial_kind is SpatialKind.IDENTITY:
        return 0
    if spec.spatial_kind is SpatialKind.SEPCONV:
        return 2 * C * C * hw * 2 + 2 * spec.dw_kernel ** 2 * C * hw
    win = effective_window(spec, height, width)
    windows = -(-height // win) * -(-width // win)
    n = win * win
    padded = windows * n
    projections = 2 * C * 3 * C * padded + 2 * C * C * padded
    return projections + windows * (2 * n * n * C + 2 * n * n * C)


def ffn_flops(spec: BlockSpec, height: int, width: int, kind: Optional[FFNKind] = None) -> int:
    kind = kind or spec.ffn_kind
    C, hidden, hw = spec.channels, spec.hidden, height * width
    if kind is FFNKind.NONE:
        return 0
    if kind is FFNKind.VANILLA:
        return 2 * C * hidden * hw * 2
    return 2 * C * hidden * hw * 2 + 2 * hidden * C * hw


def count_params_flops(model, input_size: Tuple[int, int] = (256, 256)) -> Dict[str, int]:
    """
    Exact parameter count and analytic FLOPs (2 per multiply-add) of one
    inference pass. Works on a meta-device model.
    """
    param = next(model.parameters())
    flops = [0]
    handles = []

    def conv_hook(m, inputs, output):
        flops[0] += conv_flops(m, inputs[0].shape, output.shape)

    def block_hook(m, inputs, output):
        n, _, h, w = inputs[0].shape
        if isinstance(m, SpatialInteraction):
            flops[0] += n * spatial_flops(m.spec, h, w)
        else:
            flops[0] += n * ffn_flops(m.spec, h, w)

    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, (SpatialInteraction, ChannelAggregation)):
            handles.append(m.register_forward_hook(block_hook))
    try:
        x = torch.zeros(1, 3, *input_size, dtype=param.dtype, device=param.device)
        inference_pass(model, x)
    finally:
        for handle in handles:
            handle.remove()
    return {"params": sum(p.numel() for p in model.parameters()), "flops": int(flops[0])}


# ---------------------------------------------------------------------------
# End-to-end timings
# ---------------------------------------------------------------------------

def measure_decoding_latency(model, image: torch.Tensor, reps: int = MIN_PROFILE_REPS,
                             warmup: int = 1) -> Dict[str, float]:
    """Median wall time of decompress() for one compressed image."""
    from codec import compress, decompress

    if reps < MIN_PROFILE_REPS:
        raise ProfilerError(f"reps must be >= {MIN_PROFILE_REPS}, got {reps}")
    device = next(model.parameters()).device
    obj = compress(image, model)
    for _ in range(warmup):
        decompress(obj, model)
    times = []
    for _ in range(reps):
        _sync(device)
        start = time.perf_counter()
        decompress(obj, model)
        _sync(device)
        times.append(time.perf_counter() - start)
    result = {"median_s": statistics.median(times), "reps": reps, "bpp": obj.bpp}
    log_action("Profiler", "decoding_latency", result)
    return result


def measure_training_throughput(model, batch_size: int = 8, patch_size: int = 256, steps: int = 3,
                                warmup: int = 1, lmbda: float = 0.013, seed: int = 0) -> Dict[str, float]:
    """
    Samples per second of full optimization steps on random patches.
    Runs on a copy; the given model is left untouched.
    """
    from training import rd_loss

    if steps < 1:
        raise ProfilerError("steps must be >= 1")
    work = copy.deepcopy(model).train()
    param = next(work.parameters())
    optimizer = torch.optim.Adam(work.parameters(), lr=1e-4)
    gen = torch.Generator(device="cpu").manual_seed(seed)
    x = torch.rand(batch_size, 3, patch_size, patch_size, generator=gen).to(param.device, param.dtype)

    def step():
        out = work(x)
        loss = rd_loss(x, out["x_hat"], out["bpp_y"], out["bpp_z"], lmbda, Metric.MSE)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    for _ in range(warmup):
        step()
    _sync(param.device)
    start = time.perf_counter()
    for _ in range(steps):
        step()
    _sync(param.device)
    elapsed = time.perf_counter() - start
    result = {"samples_per_s": batch_size * steps / elapsed, "batch_size": batch_size,
              "patch_size": patch_size, "steps": steps}
    log_action("Profiler", "training_throughput", result)
    return result
