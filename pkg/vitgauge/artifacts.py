"""Run outputs: CSV tables and JSON documents stamped with the run config."""

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import pandas as pd

from vitgauge import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
COMMENT = "#"
# Hex digests that may look numeric.
TEXT_COLUMNS = ("spec_hash", "schedule_hash")


@dataclass
class RunManifest:
    """Config snapshot, tool version, timing and a digest per emitted file."""

    config: Dict[str, Any]
    command: str
    version: str = __version__
    started: str = field(default_factory=lambda: _now())
    finished: Optional[str] = None
    files: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "config": self.config,
            "files": dict(sorted(self.files.items())),
        }


class ArtifactWriter:
    """Writes every file of one run under `out_dir`, one write at a time.

    Args:
        out_dir: Run directory, created if missing.
        config: Snapshot embedded in every file.
        command: Sub-command name recorded in the manifest.
    """

    def __init__(self, out_dir: Path, config: Dict[str, Any], command: str):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(config=config, command=command)
        self._lock = threading.Lock()

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """Write a table under a "# " comment header holding the config."""
        body = frame.to_csv(index=False, lineterminator="\n")
        return self._write(name, self._header() + body)

    def append_csv_row(self, name: str, row: Dict[str, Any], columns: Iterable[str]) -> Path:
        """Append one row, writing the header first if the file is new."""
        columns = list(columns)
        with self._lock:
            target = self.path(name)
            frame = pd.DataFrame([row], columns=columns)
            if target.exists():
                text = frame.to_csv(index=False, header=False, lineterminator="\n")
                with open(target, "a", encoding="utf-8") as handle:
                    handle.write(text)
            else:
                target.write_text(self._header() + frame.to_csv(index=False, lineterminator="\n"), encoding="utf-8")
            self.manifest.files[name] = _digest(target.read_bytes())
        return target

    def write_json(self, name: str, document: Dict[str, Any]) -> Path:
        """Write a JSON document with the config under its "config" key."""
        payload = dict(document)
        payload["config"] = self.manifest.config
        return self._write(name, json.dumps(payload, indent=2) + "\n")

    def finish(self) -> Path:
        """Stamp the end time and write manifest.json."""
        with self._lock:
            self.manifest.finished = _now()
            target = self.path(MANIFEST_NAME)
            target.write_text(json.dumps(self.manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
        logger.info("Wrote %d files to %s", len(self.manifest.files), self.out_dir)
        return target

    def _header(self) -> str:
        text = json.dumps(self.manifest.config, indent=2, sort_keys=True)
        return "".join(f"{COMMENT} {line}\n" for line in text.splitlines())

    def _write(self, name: str, text: str) -> Path:
        data = text.encode("utf-8")
        with self._lock:
            target = self.path(name)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
            self.manifest.files[name] = _digest(data)
        logger.debug("Wrote %s", target)
        return target


def read_csv(path: Path) -> pd.DataFrame:
    """Read a table written by ArtifactWriter, skipping its comment header."""
    skip = _header_lines(path)
    columns = pd.read_csv(path, skiprows=skip, nrows=0).columns
    text_columns = {name: str for name in TEXT_COLUMNS if name in columns}
    return pd.read_csv(path, skiprows=skip, dtype=text_columns)


def read_config_header(path: Path) -> Dict[str, Any]:
    """Config snapshot stored in a CSV's comment header."""
    lines = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith(COMMENT):
                break
            lines.append(line[len(COMMENT) + 1:])
    return json.loads("".join(lines)) if lines else {}


def _header_lines(path: Path) -> int:
    count = 0
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith(COMMENT):
                break
            count += 1
    return count


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
