"""Run manifests: every command records what produced its artifacts.

A manifest is written atomically at run start (tmp file + rename) and
rewritten at completion with the elapsed wall clock, so interrupted runs
still carry one.
"""

from __future__ import annotations

import json
import os
import subprocess
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def _version_stamp() -> dict:
    stamp = {"gridcmd": __version__}
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def output_root() -> Path:
    return Path(os.environ.get("GRIDCMD_RUN_DIR", "."))


def resolve_out(path) -> Path:
    """Relative outputs land under GRIDCMD_RUN_DIR (default: cwd)."""
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


class RunManifest:
    def __init__(self, command: str, config: dict, seeds, outputs: list):
        self.payload = {
            "command": command,
            "config": config,
            "version": _version_stamp(),
            "seeds": seeds,
            "outputs": [str(o) for o in outputs],
            "wall_clock": {"started": datetime.now(timezone.utc).isoformat(), "elapsed_s": None},
        }
        self._t0 = time.monotonic()
        self.path: Path = None

    def write(self, target) -> "RunManifest":
        """Atomic write; `target` is the artifact directory or file path."""
        target = Path(target)
        if target.suffix:  # file artifact: manifest sits alongside
            self.path = target.with_name(target.name + ".manifest.json")
            target.parent.mkdir(parents=True, exist_ok=True)
        else:
            target.mkdir(parents=True, exist_ok=True)
            self.path = target / "manifest.json"
        self._flush()
        return self

    def finish(self) -> None:
        self.payload["wall_clock"]["elapsed_s"] = round(time.monotonic() - self._t0, 3)
        self._flush()

    def _flush(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.payload, indent=1))
        os.replace(tmp, self.path)
