"""Result emission: one writer per output directory, manifests with content hashes."""
from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transport import Grid, write_grid

__all__ = ["ResultWriter", "Report", "emit_results", "verify_manifest", "sha256_file"]

MANIFEST = "manifest.json"
INCOMPLETE = ".incomplete"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ResultWriter:
    """Funnels every write into one directory and records what was written.

    A ``.incomplete`` marker exists from construction until ``emit_results``
    has written the manifest, so an interrupted run is recognisable.
    """

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / INCOMPLETE).write_text("run in progress\n")
        old = self.root / MANIFEST
        if old.exists():
            old.unlink()
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content)
        return p

    def grid(self, name: str, grid: Grid, values) -> Path:
        p = self.path(name)
        write_grid(p, grid, values)
        return p

    def table(self, name: str, header: list[str], rows) -> Path:
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(_fmt(v) for v in r))
        return self.text(name, "\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


@dataclass
class Report:
    """What a run produced: JSON-able scores plus the files its writer holds."""

    mode: str
    summary: dict
    writer: ResultWriter
    config: dict = field(default_factory=dict)
    seed: int | None = None
    seconds: float = 0.0


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def _versions() -> dict:
    import scipy
    import shapely

    from . import __version__

    return {
        "icebhm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "shapely": shapely.__version__,
    }


def emit_results(report: Report, out_dir=None) -> dict:
    """Write the summary and the manifest; clear the ``.incomplete`` marker.

    The manifest lists every artifact with its sha256, the config hash, the
    seed, library versions and wall time.  Only the wall time (and the
    manifest itself) vary between repeated runs.
    """
    w = report.writer
    if out_dir is not None and Path(out_dir).resolve() != w.root.resolve():
        raise ValueError("report was written to a different directory")
    w.text("summary.json", json.dumps(_jsonable(report.summary), indent=2, sort_keys=True) + "\n")
    config_text = json.dumps(_jsonable(report.config), sort_keys=True)
    w.text("config_echo.json", json.dumps(_jsonable(report.config), indent=2, sort_keys=True) + "\n")
    manifest = {
        "mode": report.mode,
        "seed": report.seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "versions": _versions(),
        "wall_seconds": round(report.seconds, 3),
        "files": {name: sha256_file(w.root / name) for name in sorted(w.files)},
    }
    (w.root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (w.root / INCOMPLETE).unlink(missing_ok=True)
    return manifest


def verify_manifest(out_dir) -> list[str]:
    """Names of files whose content no longer matches the manifest (missing files included)."""
    root = Path(out_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    bad = []
    for name, digest in manifest["files"].items():
        p = root / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad
