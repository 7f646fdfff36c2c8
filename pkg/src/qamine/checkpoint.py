"""Stage manifests and resume bookkeeping.

Every pipeline stage writes a manifest recording the content hashes of its
inputs, the work units completed so far, and its output paths. A finished
stage whose input hashes still match is skipped on re-run; a failed or
interrupted stage re-runs only its missing work units. Resume against
changed inputs is refused.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import PipelineError, StaleCheckpointError
from .ioutil import atomic_write_text

logger = logging.getLogger(__name__)

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"


@dataclass
class StageManifest:
    stage: str
    inputs: dict[str, str] = field(default_factory=dict)
    completed_units: list[str] = field(default_factory=list)
    unit_meta: dict[str, dict] = field(default_factory=dict)
    total_units: int | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = STATUS_PENDING
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "inputs": self.inputs,
            "completed_units": self.completed_units,
            "unit_meta": self.unit_meta,
            "total_units": self.total_units,
            "outputs": self.outputs,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageManifest":
        return cls(
            stage=d["stage"],
            inputs=d.get("inputs", {}),
            completed_units=d.get("completed_units", []),
            unit_meta=d.get("unit_meta", {}),
            total_units=d.get("total_units"),
            outputs=d.get("outputs", {}),
            status=d.get("status", STATUS_PENDING),
            error=d.get("error"),
        )


def manifest_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "manifests" / f"{stage}.json"


def load_manifest(run_dir: Path, stage: str) -> StageManifest | None:
    path = manifest_path(run_dir, stage)
    if not path.exists():
        return None
    try:
        return StageManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError) as exc:
        logger.warning("discarding unreadable manifest %s: %s", path, exc)
        return None


class StageContext:
    """One stage's view of its manifest across run and resume."""

    def __init__(self, run_dir: Path, stage: str, inputs: dict[str, str], strict_resume: bool = False):
        self.run_dir = Path(run_dir)
        self.stage = stage
        previous = load_manifest(self.run_dir, stage)
        self.was_done = False
        if previous is not None and previous.inputs == inputs:
            if previous.status == STATUS_DONE:
                self.manifest = previous
                self.was_done = True
                return
            # Interrupted or failed with matching inputs: keep completed units.
            previous.status = STATUS_RUNNING
            previous.error = None
            self.manifest = previous
            self._persist()
            return
        if previous is not None and strict_resume:
            raise StaleCheckpointError(
                f"stage {stage}: checkpoint inputs no longer match; "
                "re-run the stage from scratch instead of resuming"
            )
        self.manifest = StageManifest(stage=stage, inputs=inputs, status=STATUS_RUNNING)
        self._persist()

    def _persist(self) -> None:
        atomic_write_text(
            manifest_path(self.run_dir, self.stage),
            json.dumps(self.manifest.to_dict(), indent=2, ensure_ascii=False),
        )

    def unit_done(self, unit_id: str) -> bool:
        return unit_id in self.manifest.completed_units

    def complete_unit(self, unit_id: str, meta: dict | None = None) -> None:
        if unit_id not in self.manifest.completed_units:
            self.manifest.completed_units.append(unit_id)
        if meta is not None:
            self.manifest.unit_meta[unit_id] = meta
        self._persist()

    def set_total_units(self, total: int) -> None:
        self.manifest.total_units = total
        self._persist()

    def finish(self, outputs: dict[str, str]) -> None:
        self.manifest.outputs = outputs
        self.manifest.status = STATUS_DONE
        self._persist()

    def fail(self, error: str) -> None:
        self.manifest.status = STATUS_FAILED
        self.manifest.error = error
        self._persist()


class RunLock:
    """One pipeline process per output directory, via flock on run.lock."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "run.lock"
        self._fh = None

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        try:
            fcntl.flock(self._fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            self._fh.close()
            self._fh = None
            raise PipelineError(
                f"another pipeline process holds {self.path}; one process per output directory"
            ) from exc
        self._fh.write(str(os.getpid()))
        self._fh.flush()

    def release(self) -> None:
        if self._fh is not None:
            fcntl.flock(self._fh, fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "RunLock":
        self.acquire()
        return self

    def __exit__(self, *exc_info) -> None:
        self.release()
