"""Run configuration document (JSON, schema version "v1").

Every section is optional; unknown keys anywhere are rejected before any
work starts. Example::

    {
      "version": "v1",
      "seed": 0,
      "lattice": {"size": 64, "diffusion": 1.0, "decay": 0.0025},
      "dataset": {"path": "data/desk", "counts": {"1": 400, "2": 400}},
      "net": {"width": 0.125},
      "loss": {"metric": "mae", "prefactor": "exp", "w": 1.0},
      "train": {"epochs": 20, "batch_size": 8},
      "eval": {"exclude": [1]},
      "solve": {"sources": [[32, 32, 5, 1.0]]}
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DEFAULT_SUBSET_FRACTIONS, DatasetManifest
from .errors import ConfigError, ValidationError
from .lattice import LatticeSpec, Source, SourceConfig
from .losses import LossSpec
from .network import NetConfig
from .trainer import TrainConfig

SCHEMA_VERSION = "v1"

_SECTIONS = {
    "version": None, "seed": None, "out": None,
    "lattice": {"size", "diffusion", "decay"},
    "dataset": {"path", "radius", "counts", "split_fraction", "subset_fractions",
                "solver_tolerance"},
    "net": {"width", "slope", "dtype"},
    "loss": {"metric", "prefactor", "w", "a", "b", "delta", "schedule", "period",
             "p_step", "transform"},
    "train": {"epochs", "lr", "batch_size", "noise_std", "subset_fraction", "eval_every"},
    "eval": {"checkpoint", "exclude", "infer_counts", "reports", "ensemble"},
    "solve": {"sources", "tolerance", "max_iterations"},
}


@dataclass
class RunConfig:
    raw: dict
    seed: int = 0
    out: str | None = None
    lattice: LatticeSpec = field(default_factory=lambda: LatticeSpec(64))
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    dataset_path: str | None = None
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: dict = field(default_factory=dict)
    solve: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def solve_config(self) -> SourceConfig:
        entries = self.solve.get("sources")
        if not entries:
            raise ConfigError("solve.sources must list [cx, cy, radius, value] entries")
        try:
            return SourceConfig(tuple(Source(int(cx), int(cy), int(r), float(v))
                                      for cx, cy, r, v in entries))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solve.sources: {exc}") from None


def validate_document(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {SCHEMA_VERSION!r})")
    for key, allowed in _SECTIONS.items():
        if allowed is None or key not in doc:
            continue
        sect = doc[key]
        if not isinstance(sect, dict):
            raise ConfigError(f"section {key!r} must be an object")
        bad = set(sect) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")


def parse_config(doc: dict, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Validate and build every component config; ``seed``/``out`` override the document."""
    validate_document(doc)
    doc = json.loads(json.dumps(doc))
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    try:
        s = int(doc.get("seed", 0))
        lat = LatticeSpec(**doc.get("lattice", {"size": 64}))
        d = dict(doc.get("dataset", {}))
        path = d.pop("path", None)
        manifest = DatasetManifest(
            seed=s, lattice=lat, radius=d.get("radius", 5),
            counts=d.get("counts", {n: 400 for n in range(1, 6)}),
            split_fraction=d.get("split_fraction", 0.8),
            subset_fractions=tuple(d.get("subset_fractions", DEFAULT_SUBSET_FRACTIONS)),
            solver_tolerance=d.get("solver_tolerance", 1e-8))
        net = NetConfig(size=lat.size, **doc.get("net", {}))
        loss = LossSpec(**doc.get("loss", {}))
        tr = dict(doc.get("train", {}))
        train = TrainConfig(loss=loss, net=net, seed=s, dataset=path, **tr)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    return RunConfig(doc, s, doc.get("out"), lat, manifest, path, 1, train,
                     dict(doc.get("eval", {})), dict(doc.get("solve", {})))


def load_config(path: str | Path | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, seed, out)
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, seed, out)
