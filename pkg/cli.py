"""
Command-line surface: train, eval, compress, decompress, profile, erf,
bdrate and plot-rd.

Each command is a class with a name, a description, an `inputs` table that
becomes its argparse options, and forward(args) returning a command
observation. Artifact-producing commands write manifest.json next to their
outputs.

Exit codes: 0 success, 1 training halt, 2 usage / configuration,
3 data error, 4 incompatible stream or checkpoint.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import torch
import yaml

from codec import decompress, encode_image, read_compressed, write_compressed
from config import ModelConfig, TrainConfig, load_model_config, log_level
from constants import FILE_EXTENSION, UNKNOWN_LAMBDA_INDEX, ExitCode
from errors import (
    ConfigurationError,
    DataError,
    DecodeError,
    IncompatibleStreamError,
    ProfilerError,
    S2CError,
    TrainingHaltError,
)
from evaluation.bdrate import bd_rate
from evaluation.erf import (
    effective_receptive_field,
    receptive_layers,
    save_erf_grid,
    save_erf_png,
    support_of,
    theoretical_support,
)
from evaluation.metrics import MSSSIM_MIN_SIDE, ms_ssim, psnr, read_rd_curves
from evaluation.plots import plot_latency_bars, plot_rd_curves
from evaluation.profiler import (
    count_params_flops,
    measure_decoding_latency,
    measure_training_throughput,
    profile_latency,
)
from mixins import ManifestMixin, TimedObservationMixin
from training import (
    ingest_dataset,
    list_images,
    load_image,
    model_from_checkpoint,
    save_image,
    train,
)
from transforms import assemble_model
from utils import log_action, seed_everything, select_device

logger = logging.getLogger(__name__)

ARG_TYPES = {"string": str, "integer": int, "number": float}


class Command(ManifestMixin, TimedObservationMixin):
    name = ""
    description = ""
    inputs: Dict[str, Dict[str, Any]] = {}

    def add_to(self, subparsers) -> None:
        parser = subparsers.add_parser(self.name, help=self.description, description=self.description)
        for option, spec in self.inputs.items():
            flags = ["--" + option.replace("_", "-"), *spec.get("aliases", ())]
            kwargs = {"help": spec["description"], "dest": option}
            if spec["type"] == "boolean":
                kwargs["action"] = "store_true"
            else:
                kwargs["type"] = ARG_TYPES[spec["type"]]
                for key in ("default", "nargs", "required", "choices"):
                    if key in spec:
                        kwargs[key] = spec[key]
            parser.add_argument(*flags, **kwargs)
        parser.set_defaults(handler=self)

    def forward(self, args: argparse.Namespace) -> Dict:
        raise NotImplementedError


def _model_config(preset: Optional[str], config_path: Optional[str], ffn: Optional[str]) -> ModelConfig:
    config = load_model_config(config_path or preset)
    return config.with_ffn(ffn) if ffn else config


def _load_model(args, device):
    """Trained weights when --checkpoint is given, otherwise a seeded fresh preset."""
    if getattr(args, "checkpoint", None):
        model, payload = model_from_checkpoint(args.checkpoint, device=device)
        return model, payload
    config = _model_config(args.preset, getattr(args, "config", None), getattr(args, "ffn", None))
    return assemble_model(config, seed=getattr(args, "seed", 0), device=device).eval(), None


def _quality(x: torch.Tensor, x_hat: torch.Tensor) -> Dict[str, float]:
    result = {"psnr": psnr(x, x_hat), "msssim": float("nan")}
    if min(x.shape[-2:]) > MSSSIM_MIN_SIDE:
        result["msssim"] = ms_ssim(x, x_hat)
    return result


class TrainCommand(Command):
    name = "train"
    description = "Train a codec variant on an image folder."
    inputs = {
        "preset": {"type": "string", "description": "Preset name", "default": "hybrid-s"},
        "config": {"type": "string", "description": "Model config YAML (overrides --preset)"},
        "train_config": {"type": "string", "description": "Training config YAML"},
        "ffn": {"type": "string", "description": "Channel aggregation override",
                "choices": ["vanilla", "additive", "gated", "none"]},
        "dataset": {"type": "string", "description": "Directory of training images"},
        "lmbda": {"type": "number", "description": "Rate-distortion multiplier", "aliases": ["--lambda"]},
        "metric": {"type": "string", "description": "Distortion metric", "choices": ["mse", "msssim"]},
        "steps": {"type": "integer", "description": "Optimization steps"},
        "batch_size": {"type": "integer", "description": "Patches per step"},
        "patch_size": {"type": "integer", "description": "Square patch side"},
        "lr": {"type": "number", "description": "Adam learning rate"},
        "seed": {"type": "integer", "description": "Random seed"},
        "checkpoint_every": {"type": "integer", "description": "Steps between checkpoints"},
        "cosine": {"type": "boolean", "description": "Cosine learning-rate decay"},
        "resume": {"type": "string", "description": "Checkpoint to resume from"},
        "out": {"type": "string", "description": "Output directory", "default": "runs/train"},
        "device": {"type": "string", "description": "Device (default: S2C_DEVICE or cpu)"},
    }

    OVERRIDES = {
        "dataset": "dataset_path", "lmbda": "lmbda", "metric": "metric", "steps": "steps",
        "batch_size": "batch_size", "patch_size": "patch_size", "lr": "lr", "seed": "seed",
        "checkpoint_every": "checkpoint_every",
    }

    def train_config(self, args) -> TrainConfig:
        data: Dict[str, Any] = {}
        if args.train_config:
            path = Path(args.train_config)
            if not path.is_file():
                raise ConfigurationError(f"training config not found: {path}")
            data = yaml.safe_load(path.read_text()) or {}
        for option, key in self.OVERRIDES.items():
            value = getattr(args, option)
            if value is not None:
                data[key] = value
        if args.cosine:
            data["cosine_decay"] = True
        data["out_dir"] = args.out
        return TrainConfig.from_dict(data)

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            model_config = _model_config(args.preset, args.config, args.ffn)
            train_config = self.train_config(args)
            if not train_config.dataset_path:
                raise DataError("no dataset given (--dataset or dataset_path in --train-config)")
            stream = ingest_dataset(train_config.dataset_path, train_config.patch_size, train_config.seed)
            device = select_device(args.device)
            model = assemble_model(model_config, seed=train_config.seed, device=device)
            print(f"🏋️ Training {model_config.variant_name} for {train_config.steps} steps "
                  f"(lambda={train_config.lmbda}, {model.num_parameters():,} params)")
            result = train(model, train_config, stream=stream, resume_from=args.resume)
            observation = timer.success({
                "variant": model_config.variant_name,
                "steps": result.steps,
                "final": result.final,
                "metrics": str(result.metrics_path),
                "checkpoints": [str(p) for p in result.checkpoints],
            })
        self.record_manifest(args.out, observation,
                             {"model": model_config.to_dict(), "train": train_config.to_dict()},
                             vars(args), args.config or args.train_config, train_config.seed)
        print(f"✅ Training done, final loss {result.final.get('loss', float('nan')):.5f}")
        return observation


class EvalCommand(Command):
    name = "eval"
    description = "Compress and decompress every image of a folder with a checkpoint."
    inputs = {
        "checkpoint": {"type": "string", "description": "Trained checkpoint", "required": True},
        "images": {"type": "string", "description": "Directory of test images", "required": True},
        "label": {"type": "string", "description": "Curve label for the summary point"},
        "out": {"type": "string", "description": "Output directory", "default": "runs/eval"},
        "device": {"type": "string", "description": "Device"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            model, payload = model_from_checkpoint(args.checkpoint, device=select_device(args.device))
            lambda_index = _lambda_index(payload)
            files = list_images(args.images)
            if not files:
                raise DataError(f"no images found in {args.images}")
            rows = []
            for path in files:
                x = load_image(path).unsqueeze(0).to(next(model.parameters()).device)
                start = time.perf_counter()
                obj, _ = encode_image(x, model, lambda_index)
                encode_s = time.perf_counter() - start
                start = time.perf_counter()
                x_hat = decompress(obj, model)
                decode_s = time.perf_counter() - start
                with torch.no_grad():
                    est = model(x, noisy=False)
                rows.append({
                    "image": path.name, "height": x.shape[2], "width": x.shape[3],
                    "bpp": obj.bpp, "estimated_bpp": float(est["bpp_y"] + est["bpp_z"]),
                    **_quality(x, x_hat), "encode_s": encode_s, "decode_s": decode_s,
                })
                print(f"  {path.name}: {obj.bpp:.4f} bpp, {rows[-1]['psnr']:.2f} dB")
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            frame = pd.DataFrame(rows)
            frame.to_csv(out / "eval.csv", index=False)
            means = frame.mean(numeric_only=True)
            label = args.label or model.config.variant_name
            pd.DataFrame([{"label": label, "bpp": means["bpp"], "psnr": means["psnr"],
                           "msssim": means["msssim"]}]).to_csv(out / "rd_point.csv", index=False)
            observation = timer.success({
                "images": len(rows), "mean_bpp": float(means["bpp"]),
                "mean_psnr": float(means["psnr"]), "csv": str(out / "eval.csv"),
            })
        self.record_manifest(out, observation, {"model": model.config.to_dict()}, vars(args))
        print(f"✅ Evaluated {len(rows)} images: {means['bpp']:.4f} bpp, {means['psnr']:.2f} dB")
        return observation


def _lambda_index(payload: Optional[Dict]) -> int:
    if payload and payload.get("train_config"):
        return TrainConfig.from_dict(payload["train_config"]).lambda_index
    return UNKNOWN_LAMBDA_INDEX


class CompressCommand(Command):
    name = "compress"
    description = "Compress one image into an .s2c file."
    inputs = {
        "checkpoint": {"type": "string", "description": "Trained checkpoint", "required": True},
        "image": {"type": "string", "description": "Input image", "required": True},
        "out": {"type": "string", "description": "Output .s2c path"},
        "device": {"type": "string", "description": "Device"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            model, payload = model_from_checkpoint(args.checkpoint, device=select_device(args.device))
            x = load_image(args.image).unsqueeze(0).to(next(model.parameters()).device)
            obj, _ = encode_image(x, model, _lambda_index(payload))
            out = Path(args.out) if args.out else Path(args.image).with_suffix(FILE_EXTENSION)
            write_compressed(obj, out)
            size = out.stat().st_size
            observation = timer.success({
                "file": str(out), "bytes": size, "bpp": size * 8 / (obj.orig_height * obj.orig_width),
                "wall_s": timer.elapsed,
            })
        self.record_manifest(out.parent, observation, {"model": model.config.to_dict()}, vars(args))
        print(f"✅ {out}: {size} bytes, {observation['data']['bpp']:.4f} bpp "
              f"({observation['data']['wall_s']:.2f}s)")
        return observation


class DecompressCommand(Command):
    name = "decompress"
    description = "Reconstruct an image from an .s2c file."
    inputs = {
        "checkpoint": {"type": "string", "description": "Trained checkpoint", "required": True},
        "input": {"type": "string", "description": "Compressed .s2c file", "required": True},
        "out": {"type": "string", "description": "Output PNG path"},
        "original": {"type": "string", "description": "Original image for PSNR / MS-SSIM"},
        "device": {"type": "string", "description": "Device"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            model, _ = model_from_checkpoint(args.checkpoint, device=select_device(args.device))
            obj = read_compressed(args.input)
            x_hat = decompress(obj, model)
            out = Path(args.out) if args.out else Path(args.input).with_suffix(".png")
            save_image(x_hat, out)
            data = {"file": str(out), "bpp": obj.bpp, "wall_s": timer.elapsed}
            if args.original:
                x = load_image(args.original).unsqueeze(0)
                data.update(_quality(x, x_hat.cpu()))
            observation = timer.success(data)
        self.record_manifest(out.parent, observation, {"model": model.config.to_dict()}, vars(args))
        quality = f", {data['psnr']:.2f} dB" if "psnr" in data else ""
        print(f"✅ {out}: {obj.bpp:.4f} bpp{quality} ({data['wall_s']:.2f}s)")
        return observation


class ProfileCommand(Command):
    name = "profile"
    description = "Spatial-interaction vs channel-aggregation latency per variant."
    inputs = {
        "preset": {"type": "string", "description": "Preset names", "nargs": "+", "default": ["hybrid-s"]},
        "ffn": {"type": "string", "description": "Channel aggregation override",
                "choices": ["vanilla", "additive", "gated", "none"]},
        "size": {"type": "integer", "description": "Input height and width", "nargs": 2, "default": [256, 256]},
        "reps": {"type": "integer", "description": "Timed repetitions (>= 3)", "default": 5},
        "warmup": {"type": "integer", "description": "Discarded warmup passes", "default": 2},
        "flops": {"type": "boolean", "description": "Also count parameters and FLOPs"},
        "decode": {"type": "boolean", "description": "Also time decompress() of one image of --size"},
        "throughput": {"type": "boolean", "description": "Also measure training samples per second"},
        "batch_size": {"type": "integer", "description": "Batch for --throughput", "default": 8},
        "seed": {"type": "integer", "description": "Random seed", "default": 0},
        "out": {"type": "string", "description": "Output directory", "default": "runs/profile"},
        "device": {"type": "string", "description": "Device"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            device = select_device(args.device)
            out = Path(args.out)
            profiles, rows, configs = [], [], {}
            for preset in args.preset:
                config = _model_config(preset, None, args.ffn)
                model = assemble_model(config, seed=args.seed, device=device).eval()
                profile = profile_latency(model, tuple(args.size), reps=args.reps, warmup=args.warmup)
                profiles.append(profile)
                configs[config.variant_name] = config.to_dict()
                row = {"variant": profile.variant, "total_ms": profile.total_ms,
                       "spatial_ms": profile.spatial_interaction_ms,
                       "channel_ms": profile.channel_aggregation_ms,
                       "entropy_blocks_ms": profile.entropy_blocks_ms,
                       "other_ms": profile.other_ms, "ratio": profile.spatial_channel_ratio,
                       "spatial_share": profile.spatial_share}
                if args.flops:
                    row.update(count_params_flops(model, tuple(args.size)))
                if args.decode:
                    gen = torch.Generator().manual_seed(args.seed)
                    image = torch.rand(3, *args.size, generator=gen).to(device)
                    decoding = measure_decoding_latency(model, image, reps=args.reps)
                    row.update({"decode_s": decoding["median_s"], "decode_bpp": decoding["bpp"]})
                if args.throughput:
                    speed = measure_training_throughput(model, batch_size=args.batch_size,
                                                        patch_size=min(args.size), seed=args.seed)
                    row["train_samples_per_s"] = speed["samples_per_s"]
                rows.append(row)
                print(f"  {profile.variant}: spatial {profile.spatial_interaction_ms:.2f} ms, "
                      f"channel {profile.channel_aggregation_ms:.2f} ms, total {profile.total_ms:.2f} ms")
            out.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(rows).to_csv(out / "profile.csv", index=False)
            (out / "profile.txt").write_text("\n\n".join(p.to_report() for p in profiles) + "\n")
            (out / "profile.json").write_text(json.dumps([p.to_dict() for p in profiles], indent=2))
            plot_latency_bars(profiles, out / "latency_bars.png")
            observation = timer.success({"profiles": rows, "report": str(out / "profile.txt")})
        self.record_manifest(out, observation, configs, vars(args), seed=args.seed)
        print(f"✅ Profiles written to {out}")
        return observation


class ErfCommand(Command):
    name = "erf"
    description = "Effective receptive field of the analysis transform's center latent."
    inputs = {
        "preset": {"type": "string", "description": "Preset name", "default": "hybrid-s"},
        "checkpoint": {"type": "string", "description": "Trained checkpoint (overrides --preset)"},
        "ffn": {"type": "string", "description": "Channel aggregation override",
                "choices": ["vanilla", "additive", "gated", "none"]},
        "images": {"type": "string", "description": "Sample image folder (random crops)"},
        "num_samples": {"type": "integer", "description": "Sample count (>= 8)", "default": 8},
        "size": {"type": "integer", "description": "Sample side", "default": 256},
        "seed": {"type": "integer", "description": "Random seed", "default": 0},
        "out": {"type": "string", "description": "Output directory", "default": "runs/erf"},
        "device": {"type": "string", "description": "Device"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            device = select_device(args.device)
            seed_everything(args.seed)
            model, _ = _load_model(args, device)
            if args.images:
                stream = ingest_dataset(args.images, args.size, args.seed)
                samples = stream.next_batch(args.num_samples)
            else:
                gen = torch.Generator().manual_seed(args.seed)
                samples = torch.rand(args.num_samples, 3, args.size, args.size, generator=gen)
            param = next(model.parameters())
            erf = effective_receptive_field(model.g_a, samples.to(param.device, param.dtype))
            measured = support_of(erf)
            bound = theoretical_support(receptive_layers(model.g_a), (args.size, args.size))
            out = Path(args.out)
            save_erf_png(erf, out / "erf.png")
            save_erf_grid(erf, out / "erf.csv")
            observation = timer.success({
                "variant": model.config.variant_name, "measured_support": measured,
                "theoretical_support": bound, "png": str(out / "erf.png"),
            })
        self.record_manifest(out, observation, {"model": model.config.to_dict()}, vars(args), seed=args.seed)
        print(f"✅ ERF of {model.config.variant_name}: support {measured}, bound {bound}")
        return observation


class BdrateCommand(Command):
    name = "bdrate"
    description = "BD-rate of every test curve against the anchor curve(s)."
    inputs = {
        "anchor": {"type": "string", "description": "Anchor RD CSV", "required": True},
        "test": {"type": "string", "description": "Test RD CSV", "required": True},
        "metric": {"type": "string", "description": "Quality column", "default": "mse",
                   "choices": ["mse", "msssim"]},
        "out": {"type": "string", "description": "Output directory", "default": "runs/bdrate"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            anchors = read_rd_curves(args.anchor, args.metric)
            tests = read_rd_curves(args.test, args.metric)
            rows = []
            for a_label, anchor in anchors.items():
                for t_label, test in tests.items():
                    value = bd_rate(anchor, test)
                    rows.append({"anchor": a_label, "test": t_label, "bd_rate": value})
                    print(f"BD-rate {t_label} vs {a_label}: {value:.1f}%")
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(rows).to_csv(out / "bdrate.csv", index=False)
            plot_rd_curves(list(anchors.values()) + list(tests.values()), out / "bdrate_curves.png")
            observation = timer.success({"rows": rows, "csv": str(out / "bdrate.csv")})
        self.record_manifest(out, observation, {"metric": args.metric}, vars(args))
        return observation


class PlotRdCommand(Command):
    name = "plot-rd"
    description = "Plot R-D curves from one or more CSV files."
    inputs = {
        "curves": {"type": "string", "description": "RD CSV files", "nargs": "+", "required": True},
        "metric": {"type": "string", "description": "Quality column", "default": "mse",
                   "choices": ["mse", "msssim"]},
        "title": {"type": "string", "description": "Figure title", "default": ""},
        "out": {"type": "string", "description": "Output directory", "default": "runs/plots"},
    }

    def forward(self, args) -> Dict:
        with self.timed_observation() as timer:
            curves = []
            for path in args.curves:
                curves.extend(read_rd_curves(path, args.metric).values())
            out = Path(args.out)
            figure = plot_rd_curves(curves, out / f"rd_{args.metric}.png", args.title)
            observation = timer.success({"figure": str(figure), "curves": [c.label for c in curves]})
        self.record_manifest(out, observation, {"metric": args.metric}, vars(args))
        print(f"✅ Figure written to {figure}")
        return observation


COMMANDS = [
    TrainCommand(), EvalCommand(), CompressCommand(), DecompressCommand(),
    ProfileCommand(), ErfCommand(), BdrateCommand(), PlotRdCommand(),
]


def exit_code_for(error: Exception) -> ExitCode:
    if isinstance(error, TrainingHaltError):
        return ExitCode.TRAINING_HALT
    if isinstance(error, (ConfigurationError, ProfilerError)):
        return ExitCode.USAGE
    if isinstance(error, (IncompatibleStreamError, DecodeError)):
        return ExitCode.INCOMPATIBLE
    # data, dimension, metadata and overlap problems
    return ExitCode.DATA_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2c", description="S2C learned image codec")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.add_to(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return ExitCode.USAGE.value if e.code else ExitCode.SUCCESS.value
    command = args.handler
    try:
        command.forward(args)
    except S2CError as e:
        code = exit_code_for(e)
        if isinstance(e, TrainingHaltError) and e.snapshot_path:
            print(f"❌ {e} (snapshot: {e.snapshot_path})")
        else:
            print(f"❌ {command.name}: {e}")
        failure = getattr(e, "observation", None) or {"status": "error", "error": str(e)}
        log_action("CLI", "command_failed", {"command": command.name, "exit": code.value, **failure})
        return code.value
    return ExitCode.SUCCESS.value


if __name__ == "__main__":
    sys.exit(main())
