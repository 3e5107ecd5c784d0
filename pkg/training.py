"""
Dataset ingestion, the rate-distortion objective and the optimization loop.

Checkpoints are single torch files holding the model config, weights,
optimizer and scheduler state, the step counter and every RNG state (torch,
numpy, python and the patch sampler), so a resumed run continues the exact
trajectory. Per-step metrics are appended to a CSV with pandas.
"""

import logging
import math
import queue
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from config import ModelConfig, TrainConfig
from constants import CHECKPOINT_FORMAT_VERSION, Metric, parse_enum
from errors import DataError, IncompatibleStreamError, TrainingHaltError
from evaluation.metrics import ms_ssim_tensor, psnr
from transforms import S2CModel, assemble_model
from utils import __version__, log_action, seed_everything

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp", ".ppm"}
METRIC_COLUMNS = ["step", "loss", "bpp_y", "bpp_z", "distortion", "psnr", "lr"]


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def distortion(x: torch.Tensor, x_hat: torch.Tensor, metric: Union[Metric, str] = Metric.MSE,
               distortion_scale: float = 1.0) -> torch.Tensor:
    """MSE (times distortion_scale) or 1 - MS-SSIM."""
    metric = parse_enum(Metric, metric)
    if metric is Metric.MSE:
        return F.mse_loss(x_hat, x) * distortion_scale
    return (1.0 - ms_ssim_tensor(x, x_hat)) * distortion_scale


def rd_terms(x: torch.Tensor, x_hat: torch.Tensor, bpp_y: torch.Tensor, bpp_z: torch.Tensor,
             lmbda: float, metric: Union[Metric, str] = Metric.MSE,
             distortion_scale: float = 1.0) -> Dict[str, torch.Tensor]:
    d = distortion(x, x_hat, metric, distortion_scale)
    return {"loss": bpp_y + bpp_z + lmbda * d, "bpp_y": bpp_y, "bpp_z": bpp_z, "distortion": d}


def rd_loss(x: torch.Tensor, x_hat: torch.Tensor, bpp_y, bpp_z, lmbda: float,
            metric: Union[Metric, str] = Metric.MSE, distortion_scale: float = 1.0) -> torch.Tensor:
    """L = bpp_y + bpp_z + lambda * D."""
    return rd_terms(x, x_hat, bpp_y, bpp_z, lmbda, metric, distortion_scale)["loss"]


# ---------------------------------------------------------------------------
# Patch stream
# ---------------------------------------------------------------------------

def load_image(path: Union[str, Path]) -> torch.Tensor:
    """(3, H, W) float tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}")
    return torch.from_numpy(array.transpose(2, 0, 1).copy()).float() / 255.0


def save_image(x: torch.Tensor, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if x.dim() == 4:
        x = x[0]
    array = (x.detach().clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    Image.fromarray(array).save(path)
    return path


def list_images(path: Union[str, Path]) -> List[Path]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory not found: {path}")
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass(frozen=True)
class CropWindow:
    image: int
    top: int
    left: int
    flip: bool


class PatchStream:
    """
    Endless, seeded stream of random square crops with random horizontal
    flips. Images smaller than the patch in either side are skipped.
    """

    def __init__(self, images: List[np.ndarray], patch_size: int, seed: int = 0):
        if not images:
            raise DataError("no usable images in the dataset")
        self.images = images
        self.patch_size = patch_size
        self.rng = np.random.default_rng(seed)

    def draw_window(self) -> CropWindow:
        index = int(self.rng.integers(len(self.images)))
        h, w = self.images[index].shape[:2]
        top = int(self.rng.integers(0, h - self.patch_size + 1))
        left = int(self.rng.integers(0, w - self.patch_size + 1))
        return CropWindow(index, top, left, bool(self.rng.random() < 0.5))

    def crop(self, window: CropWindow) -> torch.Tensor:
        p = self.patch_size
        patch = self.images[window.image][window.top:window.top + p, window.left:window.left + p]
        if window.flip:
            patch = patch[:, ::-1]
        return torch.from_numpy(patch.transpose(2, 0, 1).copy()).float() / 255.0

    def sample(self) -> torch.Tensor:
        return self.crop(self.draw_window())

    def __iter__(self) -> Iterator[torch.Tensor]:
        while True:
            yield self.sample()

    def next_batch(self, batch_size: int) -> torch.Tensor:
        return torch.stack([self.sample() for _ in range(batch_size)])

    def get_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state

    def batches(self, batch_size: int, prefetch: int = 0) -> "BatchFeed":
        return BatchFeed(self, batch_size, prefetch)


class BatchFeed:
    """
    Batches from a PatchStream, optionally produced by a background thread
    into a bounded queue. state_after_last tracks the sampler state as of the
    last batch handed out, which is what a checkpoint must record.
    """

    def __init__(self, stream: PatchStream, batch_size: int, prefetch: int = 0):
        self.stream = stream
        self.batch_size = batch_size
        self.state_after_last = stream.get_state()
        self._queue: Optional[queue.Queue] = None
        self._stop = threading.Event()
        self._thread = None
        if prefetch > 0:
            self._queue = queue.Queue(maxsize=prefetch)
            self._thread = threading.Thread(target=self._produce, name="patch-prefetch", daemon=True)
            self._thread.start()

    def _produce(self) -> None:
        while not self._stop.is_set():
            item = (self.stream.next_batch(self.batch_size), self.stream.get_state())
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def __iter__(self) -> "BatchFeed":
        return self

    def __next__(self) -> torch.Tensor:
        if self._queue is None:
            batch = self.stream.next_batch(self.batch_size)
            self.state_after_last = self.stream.get_state()
            return batch
        batch, state = self._queue.get()
        self.state_after_last = state
        return batch

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def ingest_dataset(path: Union[str, Path], patch_size: int, seed: int = 0) -> PatchStream:
    """
    Raises:
        DataError: missing or empty directory, or no image large enough
    """
    files = list_images(path)
    if not files:
        raise DataError(f"no images found in {path}")
    images, too_small, unreadable = [], 0, 0
    for f in files:
        try:
            with Image.open(f) as img:
                array = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except (OSError, UnidentifiedImageError):
            unreadable += 1
            continue
        if array.shape[0] < patch_size or array.shape[1] < patch_size:
            too_small += 1
            continue
        images.append(array)
    if too_small or unreadable:
        logger.warning("Skipped %d images smaller than %d px and %d unreadable files",
                       too_small, patch_size, unreadable)
    log_action("Dataset", "ingested", {
        "path": str(path), "images": len(images), "skipped_small": too_small,
        "unreadable": unreadable, "patch_size": patch_size,
    })
    if not images:
        raise DataError(f"no image in {path} is at least {patch_size}x{patch_size}")
    return PatchStream(images, patch_size, seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: S2CModel, optimizer=None, step: int = 0,
                    train_config: Optional[TrainConfig] = None, scheduler=None,
                    stream_state: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "package_version": __version__,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer else None,
        "scheduler": scheduler.state_dict() if scheduler else None,
        "step": step,
        "rng": {
            "torch": torch.get_rng_state(),
            "numpy": np.random.get_state(),
            "python": random.getstate(),
        },
        "stream": stream_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    log_action("Trainer", "checkpoint_saved", {"path": str(path), "step": step})
    return path


def load_checkpoint(path: Union[str, Path], map_location="cpu") -> Dict[str, Any]:
    """
    Raises:
        DataError: missing file
        IncompatibleStreamError: unknown checkpoint format version
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    # the payload carries numpy / python RNG states next to the tensors
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleStreamError(
            f"checkpoint format {version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def model_from_checkpoint(path: Union[str, Path], device=None) -> Tuple[S2CModel, Dict[str, Any]]:
    payload = load_checkpoint(path)
    model = assemble_model(ModelConfig.from_dict(payload["model_config"]), device=device)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------

class MetricsLog:
    """Append-only CSV of per-step training metrics."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.pending: List[Dict[str, float]] = []

    def append(self, row: Dict[str, float]) -> None:
        self.pending.append(row)

    def flush(self) -> None:
        if not self.pending:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.pending, columns=METRIC_COLUMNS)
        frame.to_csv(self.path, mode="a", header=not self.path.exists(), index=False)
        self.pending = []

    def read(self) -> pd.DataFrame:
        self.flush()
        if not self.path.exists():
            return pd.DataFrame(columns=METRIC_COLUMNS)
        return pd.read_csv(self.path)


@dataclass
class TrainResult:
    steps: int
    final: Dict[str, float]
    metrics_path: Path
    checkpoints: List[Path] = field(default_factory=list)


def _restore_rng(state: Dict[str, Any]) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def _scheduler(optimizer, config: TrainConfig):
    if not config.cosine_decay:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, config.steps))


def train(model: S2CModel, config: TrainConfig, stream: Optional[PatchStream] = None,
          resume_from: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Optimize model on random patches until config.steps.

    Raises:
        DataError: dataset problems
        TrainingHaltError: non-finite loss (a snapshot checkpoint is written first)
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    param = next(model.parameters())
    seed_everything(config.seed)
    if stream is None:
        if not config.dataset_path:
            raise DataError("no dataset_path configured")
        stream = ingest_dataset(config.dataset_path, config.patch_size, config.seed)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = _scheduler(optimizer, config)
    start = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, map_location=param.device)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        if scheduler is not None and payload.get("scheduler"):
            scheduler.load_state_dict(payload["scheduler"])
        start = int(payload["step"])
        _restore_rng(payload["rng"])
        if payload.get("stream") is not None:
            stream.set_state(payload["stream"])
        log_action("Trainer", "resumed", {"from": str(resume_from), "step": start})

    log = MetricsLog(out_dir / "metrics.csv")
    checkpoints: List[Path] = []
    final: Dict[str, float] = {}
    feed = stream.batches(config.batch_size, prefetch=config.prefetch)

    def snapshot(name: str, step: int) -> Path:
        return save_checkpoint(out_dir / name, model, optimizer, step, config, scheduler,
                               feed.state_after_last)

    model.train()
    try:
        for step in range(start, config.steps):
            x = next(feed).to(device=param.device, dtype=param.dtype)
            out = model(x)
            terms = rd_terms(x, out["x_hat"], out["bpp_y"], out["bpp_z"], config.lmbda,
                             config.metric, config.distortion_scale)
            loss = terms["loss"]
            if not torch.isfinite(loss):
                path = snapshot(f"halt_step{step:07d}.pt", step)
                log.flush()
                raise TrainingHaltError(f"non-finite loss at step {step}", step, path)

            optimizer.zero_grad()
            loss.backward()
            if config.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            optimizer.step()
            lr = optimizer.param_groups[0]["lr"]
            if scheduler is not None:
                scheduler.step()

            final = {
                "step": step,
                "loss": float(loss),
                "bpp_y": float(terms["bpp_y"]),
                "bpp_z": float(terms["bpp_z"]),
                "distortion": float(terms["distortion"]),
                "psnr": psnr(x.detach(), out["x_hat"].detach().clamp(0, 1)),
                "lr": lr,
            }
            log.append(final)
            done = step + 1
            if done % config.log_every == 0:
                log.flush()
                log_action("Trainer", "step", {k: round(v, 6) if isinstance(v, float) else v
                                               for k, v in final.items()})
            if done % config.checkpoint_every == 0 or done == config.steps:
                checkpoints.append(snapshot(f"step_{done:07d}.pt", done))
    finally:
        feed.close()
        log.flush()

    return TrainResult(steps=config.steps, final=final, metrics_path=log.path, checkpoints=checkpoints)


def overfit_psnr(model: S2CModel, image: torch.Tensor) -> float:
    """PSNR of the rounded (decoder-exact) forward pass on one image."""
    model.eval()
    with torch.no_grad():
        x = image.unsqueeze(0) if image.dim() == 3 else image
        x_hat = model(x, noisy=False)["x_hat"].clamp(0, 1)
    return psnr(x, x_hat)


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate the loop uses at a given step."""
    if not config.cosine_decay:
        return config.lr
    return config.lr * 0.5 * (1 + math.cos(math.pi * min(step, config.steps) / max(1, config.steps)))
