from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from utils import (
    CommandObservation,
    RunManifest,
    config_hash,
    current_timestamp,
    format_duration,
    version_stamp,
    write_manifest,
)


class ObservationMixin:
    """
    Wraps a command's outcome into a CommandObservation dictionary.

    Example:
        class CompressCommand(ObservationMixin, Command):
            def forward(self, args):
                obj = compress(...)
                return self.create_observation("success", {"bpp": obj.bpp})
    """

    def create_observation(self, status: str, data: dict, error: Optional[str] = None,
                           start_time: Optional[datetime] = None) -> Dict:
        metadata = {"source": self.__class__.__name__, "timestamp": current_timestamp()}
        if start_time:
            metadata["duration"] = format_duration(start_time, datetime.now(timezone.utc))
        observation = CommandObservation(status=status, data={**data, "metadata": metadata}, error=error)
        return observation.__dict__


class ManifestMixin:
    """
    Records how an artifact was produced. Commands set `name` and call
    record_manifest() once their outputs exist.
    """

    name = "command"

    def record_manifest(self, out_dir, observation: Dict, resolved_config: Dict[str, Any],
                        arguments: Dict[str, Any], config_path: Optional[str] = None,
                        seed: Optional[int] = None) -> Path:
        manifest = RunManifest(
            command=self.name,
            config_path=config_path,
            config_hash=config_hash(resolved_config) if resolved_config else None,
            seed=seed,
            version=version_stamp(),
            output_dir=str(out_dir),
            resolved_config=resolved_config,
            arguments={k: v for k, v in arguments.items() if k != "handler"},
            result=observation,
        )
        return write_manifest(manifest, out_dir)


class TimedObservationMixin(ObservationMixin):
    """
    Observation mixin that measures the command's wall time.

    Example:
        with self.timed_observation() as timer:
            result = self.run(args)
            return timer.success(result)
    """

    def timed_observation(self) -> "TimedObservationContext":
        return TimedObservationContext(self)


class TimedObservationContext:
    """
    Exceptions propagate; the CLI maps them to exit codes. On the way out an
    error observation is attached to the exception as `observation`.
    """

    def __init__(self, mixin: ObservationMixin):
        self.mixin = mixin
        self.start_time = None
        self.failure: Optional[Dict] = None

    def __enter__(self):
        self.start_time = datetime.now(timezone.utc)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if isinstance(exc_val, Exception):
            self.failure = self.error(str(exc_val), {"error_type": exc_type.__name__})
            exc_val.observation = self.failure
        return False

    @property
    def elapsed(self) -> float:
        return format_duration(self.start_time, datetime.now(timezone.utc))

    def success(self, data: dict) -> Dict:
        return self.mixin.create_observation("success", data, start_time=self.start_time)

    def error(self, error_message: str, data: Optional[dict] = None) -> Dict:
        return self.mixin.create_observation("error", data or {}, error=error_message,
                                             start_time=self.start_time)
