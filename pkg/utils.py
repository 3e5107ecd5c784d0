from typing import Any, Dict, Optional
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path
import hashlib
import json
import logging
import os
import random
import subprocess

import numpy as np
import torch
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

__version__ = "0.3.0"

load_dotenv()


@dataclass
class CommandObservation:
    """
    Standardized result structure for all codec commands.
    Ensures consistent data format across train, compress, profile, etc.
    """
    status: str  # "success" or "error"
    data: Dict
    error: Optional[str] = None

    @property
    def is_success(self) -> bool:
        """Check if the command completed."""
        return self.status == "success"


@dataclass
class RunManifest:
    """
    Provenance record written beside every artifact-producing command.
    """
    command: str
    config_path: Optional[str]
    config_hash: Optional[str]
    seed: Optional[int]
    version: str
    output_dir: str
    resolved_config: Dict = field(default_factory=dict)
    arguments: Dict = field(default_factory=dict)
    result: Dict = field(default_factory=dict)
    created_at: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)


def log_action(component: str, action: str, details: dict) -> None:
    """
    Standardized logging for codec actions.

    Args:
        component: Name of the component (e.g., "Trainer", "Codec")
        action: Action being performed (e.g., "checkpoint_saved", "stream_encoded")
        details: Dictionary with relevant details for the action
    """
    logger.info("[%s] %s: %s", component, action, json.dumps(details, default=str))


def current_timestamp() -> str:
    """
    Generate ISO format timestamp.

    Returns:
        ISO format timestamp string with Z suffix (UTC)
    """
    return datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z')


def format_duration(start_time: datetime, end_time: datetime) -> float:
    """
    Calculate duration between two datetime objects in seconds.
    """
    return (end_time - start_time).total_seconds()


def parse_observation(observation: dict) -> Optional[CommandObservation]:
    """
    Parse a dictionary (e.g. read back from a manifest) into a CommandObservation.

    Args:
        observation: Dictionary with observation data

    Returns:
        CommandObservation or None if parsing fails
    """
    try:
        status = observation.get("status", "error")
        data = observation.get("data", {})
        error = observation.get("error")

        if status is None or data is None:
            raise ValueError("Invalid data types in observation")

        return CommandObservation(status=status, data=data, error=error)
    except Exception as e:
        logger.warning("Failed to parse observation: %s", e)
        return None


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch RNGs."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def select_device(requested: Optional[str] = None) -> torch.device:
    """
    Resolve the compute device: explicit argument, then S2C_DEVICE, then cpu.
    Falls back to cpu when CUDA is requested but unavailable.
    """
    name = requested or os.environ.get("S2C_DEVICE", "cpu")
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("CUDA requested (%s) but unavailable, using cpu", name)
        name = "cpu"
    return torch.device(name)


def config_hash(config: Dict[str, Any]) -> str:
    """Stable short hash of a resolved configuration dictionary."""
    payload = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def version_stamp() -> str:
    """Package version plus the git revision when run from a checkout."""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(manifest: RunManifest, out_dir) -> Path:
    """
    Write the run manifest as JSON into the output directory.

    Returns:
        Path of the written manifest file
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not manifest.created_at:
        manifest.created_at = current_timestamp()
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2, default=str))
    log_action("Manifest", "written", {"path": str(path), "command": manifest.command})
    return path


def read_manifest(path) -> Dict:
    """Read a manifest back; the result is parsed into a CommandObservation."""
    content = json.loads(Path(path).read_text())
    content["result"] = parse_observation(content.get("result", {}))
    return content
