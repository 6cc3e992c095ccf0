"""Run configuration and on-disk reports (CSV tables, manifest, optional plots)."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .models import VARIANTS

SUBCOMMANDS = ("verify", "train", "bench", "gen", "parse", "assemble")
PROFILES = ("toy", "full-scale")


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


@dataclass
class RunConfig:
    subcommand: str
    variant: str = "ttt-mlp"
    d: int = 16
    k: Optional[int] = None
    heads: int = 1
    hidden_mult: int = 4
    b: int = 64
    eta: Optional[float] = None
    task: dict = field(default_factory=dict)
    profile: str = "toy"
    n_shards: int = 1
    seed: int = 0
    out: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        for name in ("d", "heads", "hidden_mult", "b", "n_shards"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.k is not None and not 1 <= self.k <= self.d:
            raise ConfigError(f"k must be in [1, d], got {self.k}")
        if (self.k or self.d) % self.heads:
            raise ConfigError("k must be divisible by heads")
        if self.eta is not None and self.eta < 0:
            raise ConfigError("eta must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Short digest of everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


def load_config(path, subcommand: str) -> dict:
    """Read a JSON config file; returns the raw mapping (validated later with CLI overrides)."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    data.setdefault("subcommand", subcommand)
    return data


def host_info() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__, "platform": platform.platform(),
            "machine": platform.machine()}


@dataclass
class Run:
    """A finished run: named tables of row dicts, each with a fixed column order."""

    config: RunConfig
    name: str
    tables: dict = field(default_factory=dict)
    columns: dict = field(default_factory=dict)
    precision: str = "float64"

    def add_table(self, name: str, rows: list, columns) -> None:
        self.tables[name] = rows
        self.columns[name] = tuple(columns)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def emit_report(run: Run, out_dir, plots: bool = False) -> list[Path]:
    """Write one CSV per table and a manifest; file names embed the config hash."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    h = run.config.hash()
    written = []
    for tname, rows in run.tables.items():
        if not rows:
            continue
        path = out / f"{run.name}-{tname}-{h}.csv"
        cols = run.columns[tname]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in cols])
        written.append(path)
    if plots:
        written += _plots(run, out, h)
    manifest = {"name": run.name, "config_hash": h, "config": run.config.to_dict(), "seed": run.config.seed,
                "precision": run.precision, "host": host_info(), "files": [p.name for p in written]}
    mpath = out / f"{run.name}-{h}.manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return [*written, mpath]


def _plots(run: Run, out: Path, h: str) -> list[Path]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    paths = []
    if run.tables.get("losses"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        rows = run.tables["losses"]
        for v in sorted({r["variant"] for r in rows}):
            pts = [(r["step"], r["loss"]) for r in rows if r["variant"] == v]
            ax.plot(*zip(*pts), label=v)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        p = out / f"{run.name}-loss-{h}.png"
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    if run.tables.get("timing"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        rows = run.tables["timing"]
        for v in sorted({r["variant"] for r in rows}):
            pts = sorted((r["T"], r["median_ms"]) for r in rows if r["variant"] == v)
            ax.loglog(*zip(*pts), marker="o", label=v)
        ax.set_xlabel("T")
        ax.set_ylabel("median ms")
        ax.legend(fontsize=7)
        p = out / f"{run.name}-timing-{h}.png"
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths
