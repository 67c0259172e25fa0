"""Run manifests and CSV output.

A run is identified by its *run key*: subcommand, effective parameters, seed
and code version.  The key's digest goes into the ``#`` header of every CSV
the run writes, so the CSV bytes depend only on the key and re-running from a
manifest reproduces them exactly.  Wall-clock data lives only in the JSON
manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

__all__ = ["RunManifest", "OutputDir", "sha256_file", "load_manifest"]


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    params: dict
    seed: int | None
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def key(self) -> dict:
        return {"subcommand": self.subcommand, "params": self.params, "seed": self.seed, "version": self.version}

    @property
    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.key).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        d = asdict(self)
        d["run_digest"] = self.digest
        d["wall_seconds"] = None if self.finished is None else self.finished - self.started
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    if isinstance(o, (set, tuple)):
        return list(o)
    return str(o)


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def _cell(v) -> str:
    if isinstance(v, float) or hasattr(v, "dtype"):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


class OutputDir:
    """Writes every file of a run under one directory and records digests."""

    def __init__(self, root: str | Path, manifest: RunManifest):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def _path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root != p.parent and self.root not in p.parents:
            raise ValueError(f"refusing to write {name!r} outside {self.root}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_csv(self, name: str, columns: list[str], rows, notes: list[str] | tuple = ()) -> Path:
        buf = io.StringIO()
        buf.write(f"# padiff {self.manifest.subcommand}\n")
        buf.write(f"# run_digest: {self.manifest.digest}\n")
        for n in notes:
            buf.write(f"# {n}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        return self.write_text(name, buf.getvalue())

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def write_text(self, name: str, text: str) -> Path:
        p = self._path(name)
        p.write_text(text)
        self.manifest.outputs[name] = sha256_file(p)
        return p

    def finish(self, name: str = "manifest.json") -> Path:
        self.manifest.finished = time.time()
        p = self._path(name)
        p.write_text(self.manifest.to_json() + "\n")
        return p
