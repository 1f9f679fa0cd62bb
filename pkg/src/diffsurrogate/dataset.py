"""Seeded generation, stratified partitioning and shard persistence of samples.

Every sample is identified by ``(n, index)``: its configuration is drawn from
``SeedSequence([seed, n, index])`` so any sample can be regenerated alone.
Shards hold one source count each, samples in index order.

Shard layout (little-endian)::

    b"DSRG1" | u32 L | u32 count
    count x ( u16 n | n x (u16 cx, u16 cy, u16 r, f32 v) | L*L f32 target )
    u64 checksum  (blake2b-64 of every preceding byte)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (ChecksumError, ConfigError, DimensionError, FormatError,
                     GenerationError, SolverError, ValidationError)
from .lattice import LatticeSpec, Source, SourceConfig, rasterize_sources
from .solver import SolverSettings, residual_norm, solve_steady

SHARD_MAGIC = b"DSRG1"
MANIFEST_VERSION = "v1"
REJECTION_BUDGET = 10_000
DEFAULT_SUBSET_FRACTIONS = (0.5, 0.25, 0.125, 0.05, 0.025, 0.0125)

# stream tags mixed into SeedSequence entropy to keep purposes independent
_SPLIT_TAG = 0x5B117
_SUBSET_TAG = 0x5B5E7
_DISJOINT_TAG = 0xD15C0

_F32_BELOW_ONE = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


def _floor_count(fraction: float, count: int) -> int:
    # the epsilon absorbs binary rounding of e.g. 0.05 * 16000
    return int(math.floor(fraction * count + 1e-9))


def sample_seed(seed: int, n: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, n, index])


def sample_config(n: int, seed, spec: LatticeSpec, radius: int = 5,
                  budget: int = REJECTION_BUDGET) -> SourceConfig:
    """Draw ``n`` non-overlapping disk sources; one of them has value 1.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts. Values are
    rounded to float32 so that a stored configuration round-trips exactly.
    """
    if n < 1:
        raise ValidationError("source count must be >= 1")
    lo, hi = radius + 1, spec.size - 2 - radius
    if hi < lo:
        raise GenerationError(f"radius {radius} does not fit a {spec.size}^2 lattice")
    rng = np.random.default_rng(seed)
    centers: list[tuple[int, int]] = []
    rejected = 0
    min_d2 = (2 * radius) ** 2
    while len(centers) < n:
        cx, cy = (int(c) for c in rng.integers(lo, hi + 1, size=2))
        if all((cx - x) ** 2 + (cy - y) ** 2 > min_d2 for x, y in centers):
            centers.append((cx, cy))
            continue
        rejected += 1
        if rejected > budget:
            raise GenerationError(
                f"could not place {n} sources of radius {radius} on {spec.size}^2 "
                f"after {budget} rejections")
    unit = int(rng.integers(n))
    values = 1.0 - rng.random(n)                  # uniform on (0, 1]
    values = np.minimum(values.astype(np.float32), np.float32(_F32_BELOW_ONE))
    sources = tuple(
        Source(cx, cy, radius, 1.0 if i == unit else float(values[i]))
        for i, (cx, cy) in enumerate(centers))
    return SourceConfig(sources)


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    lattice: LatticeSpec = field(default_factory=lambda: LatticeSpec(64))
    radius: int = 5
    counts: dict = field(default_factory=lambda: {n: 400 for n in range(1, 6)})
    split_fraction: float = 0.8
    subset_fractions: tuple = DEFAULT_SUBSET_FRACTIONS
    solver_tolerance: float = 1e-8
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "counts", {int(k): int(v) for k, v in self.counts.items()})
        object.__setattr__(self, "subset_fractions", tuple(float(f) for f in self.subset_fractions))
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split fraction must lie in (0, 1)")
        fr = self.subset_fractions
        if any(b >= a for a, b in zip(fr, fr[1:])):
            raise ConfigError("subset fractions must be strictly decreasing")
        if any(not 0.0 < f <= 1.0 for f in fr):
            raise ConfigError("subset fractions must lie in (0, 1]")
        if any(c < 0 for c in self.counts.values()) or any(k < 1 for k in self.counts):
            raise ConfigError("counts must be >= 0 for source counts >= 1")

    @property
    def balanced(self) -> bool:
        return len(set(self.counts.values())) <= 1

    def to_dict(self) -> dict:
        L = self.lattice
        return {
            "format": MANIFEST_VERSION,
            "seed": self.seed,
            "lattice": {"size": L.size, "diffusion": L.diffusion, "decay": L.decay},
            "radius": self.radius,
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "split_fraction": self.split_fraction,
            "subset_fractions": list(self.subset_fractions),
            "solver_tolerance": self.solver_tolerance,
            "checksums": dict(sorted(self.checksums.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        doc = dict(doc)
        version = doc.pop("format", MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest format {version!r}")
        allowed = {"seed", "lattice", "radius", "counts", "split_fraction",
                   "subset_fractions", "solver_tolerance", "checksums"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        if "lattice" in doc:
            doc["lattice"] = LatticeSpec(**doc["lattice"])
        return cls(**doc)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Sample:
    config: SourceConfig
    input: np.ndarray
    target: np.ndarray
    n: int
    index: int


class Dataset:
    """Column-oriented collection of samples sharing one lattice.

    Rows can be re-selected without copying configs; ``keys`` holds the
    ``(n, index)`` identity of every row.
    """

    def __init__(self, spec: LatticeSpec, configs: Sequence[SourceConfig],
                 targets: np.ndarray, ns: Sequence[int], indices: Sequence[int],
                 inputs: np.ndarray | None = None):
        self.spec = spec
        self.configs = list(configs)
        self.targets = np.asarray(targets, dtype=np.float32).reshape(-1, spec.size, spec.size)
        self.ns = np.asarray(ns, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        if inputs is None:
            inputs = np.stack([rasterize_sources(c, spec).values for c in self.configs]) \
                if self.configs else np.zeros((0, spec.size, spec.size))
        self.inputs = np.asarray(inputs, dtype=np.float32).reshape(self.targets.shape)
        if not (len(self.configs) == len(self.targets) == len(self.ns) == len(self.indices)):
            raise DimensionError("dataset columns differ in length")

    def __len__(self):
        return len(self.configs)

    def __getitem__(self, row) -> Sample:
        return Sample(self.configs[row], self.inputs[row], self.targets[row],
                      int(self.ns[row]), int(self.indices[row]))

    @property
    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.ns.tolist(), self.indices.tolist()))

    def counts(self) -> dict[int, int]:
        vals, cnt = np.unique(self.ns, return_counts=True)
        return dict(zip(vals.tolist(), cnt.tolist()))

    @property
    def balanced(self) -> bool:
        return len(set(self.counts().values())) <= 1

    def rows_for(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.ns == n)

    def select(self, rows: Iterable[int]) -> "Dataset":
        rows = np.asarray(list(rows), dtype=np.int64)
        return Dataset(self.spec, [self.configs[i] for i in rows], self.targets[rows],
                       self.ns[rows], self.indices[rows], self.inputs[rows])

    def only(self, n: int) -> "Dataset":
        return self.select(self.rows_for(n))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        spec = parts[0].spec
        if any(p.spec != spec for p in parts):
            raise DimensionError("cannot concatenate datasets on different lattices")
        return cls(spec, [c for p in parts for c in p.configs],
                   np.concatenate([p.targets for p in parts]),
                   np.concatenate([p.ns for p in parts]),
                   np.concatenate([p.indices for p in parts]),
                   np.concatenate([p.inputs for p in parts]))


def _solve_one(args):
    seed, n, index, spec, radius, tol = args
    config = sample_config(n, sample_seed(seed, n, index), spec, radius)
    settings = SolverSettings(tolerance=tol)
    try:
        target = solve_steady(config, spec, settings).values
    except SolverError as exc:
        raise SolverError(f"sample (n={n}, index={index}): {exc}",
                          exc.residual, exc.iterations) from exc
    res = residual_norm(target, config, spec)
    if res > tol:
        raise SolverError(f"sample (n={n}, index={index}) failed the residual audit", res)
    return config, target.astype(np.float32), res


def regenerate_sample(manifest: DatasetManifest, n: int, index: int) -> Sample:
    config, target, _ = _solve_one((manifest.seed, n, index, manifest.lattice,
                                    manifest.radius, manifest.solver_tolerance))
    inp = rasterize_sources(config, manifest.lattice).values.astype(np.float32)
    return Sample(config, inp, target, n, index)


def generate(manifest: DatasetManifest, workers: int = 1) -> tuple[Dataset, float]:
    """Generate every sample of the manifest; returns the dataset and worst residual."""
    jobs = [(manifest.seed, n, i, manifest.lattice, manifest.radius, manifest.solver_tolerance)
            for n, count in sorted(manifest.counts.items()) for i in range(count)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_one, jobs, chunksize=8))
    else:
        results = [_solve_one(j) for j in jobs]
    spec = manifest.lattice
    if not results:
        empty = np.zeros((0, spec.size, spec.size), dtype=np.float32)
        return Dataset(spec, [], empty, [], []), 0.0
    configs, targets, residuals = zip(*results)
    ds = Dataset(spec, configs, np.stack(targets), [j[1] for j in jobs], [j[2] for j in jobs])
    return ds, float(max(residuals))


def build_dataset(manifest: DatasetManifest, out_dir: str | os.PathLike | None = None,
                  workers: int = 1) -> tuple[Dataset, DatasetManifest]:
    """Generate the dataset and, if ``out_dir`` is given, persist shards + manifest.

    Returns the dataset and the manifest updated with shard checksums.
    """
    ds, _ = generate(manifest, workers)
    if out_dir is None:
        return ds, manifest
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for n in sorted(manifest.counts):
        name = shard_name(n)
        checksums[name] = f"{write_shard(out / name, ds.only(n)):016x}"
    manifest = DatasetManifest(**{**manifest.__dict__, "checksums": checksums})
    _atomic_write(out / "manifest.json", manifest.dumps().encode("utf-8"))
    return ds, manifest


def shard_name(n: int) -> str:
    return f"shard_n{n:02d}.dsrg"


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def encode_shard(ds: Dataset) -> bytes:
    L = ds.spec.size
    parts = [SHARD_MAGIC, struct.pack("<II", L, len(ds))]
    for row in range(len(ds)):
        cfg = ds.configs[row]
        parts.append(struct.pack("<H", cfg.n))
        for s in cfg.sources:
            parts.append(struct.pack("<HHHf", s.cx, s.cy, s.radius, s.value))
        parts.append(np.ascontiguousarray(ds.targets[row], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def write_shard(path: str | os.PathLike, ds: Dataset) -> int:
    """Write ``ds`` as one shard (write-then-rename); returns the checksum."""
    data = encode_shard(ds)
    _atomic_write(Path(path), data)
    return struct.unpack("<Q", data[-8:])[0]


def decode_shard(data: bytes, expected_size: int | None = None,
                 spec: LatticeSpec | None = None) -> Dataset:
    head = len(SHARD_MAGIC) + 8
    if len(data) < head + 8:
        raise FormatError("shard truncated")
    if data[:len(SHARD_MAGIC)] != SHARD_MAGIC:
        raise FormatError("not a DSRG1 shard (magic mismatch)")
    stored = struct.unpack("<Q", data[-8:])[0]
    if _checksum(data[:-8]) != stored:
        raise ChecksumError("shard checksum mismatch")
    L, count = struct.unpack_from("<II", data, len(SHARD_MAGIC))
    if expected_size is not None and L != expected_size:
        raise DimensionError(f"shard lattice size {L} != expected {expected_size}")
    spec = spec or LatticeSpec(L)
    if spec.size != L:
        raise DimensionError(f"shard lattice size {L} != lattice spec size {spec.size}")
    pos = head
    end = len(data) - 8
    configs, targets, ns = [], [], []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            srcs = []
            for _ in range(n):
                cx, cy, r, v = struct.unpack_from("<HHHf", data, pos)
                pos += 10
                srcs.append(Source(cx, cy, r, v))
            nbytes = 4 * L * L
            if pos + nbytes > end:
                raise FormatError("shard truncated inside a target block")
            targets.append(np.frombuffer(data, dtype="<f4", count=L * L, offset=pos).reshape(L, L))
            pos += nbytes
            configs.append(SourceConfig(tuple(srcs)))
            ns.append(n)
    except struct.error as exc:
        raise FormatError(f"shard truncated: {exc}") from None
    if pos != end:
        raise FormatError("trailing bytes in shard")
    # index = position within the single-n shard
    indices = list(range(count))
    tg = np.stack(targets).astype(np.float32) if targets else np.zeros((0, L, L), np.float32)
    return Dataset(spec, configs, tg, ns, indices)


def read_shard(path: str | os.PathLike, expected_size: int | None = None,
               spec: LatticeSpec | None = None) -> Dataset:
    return decode_shard(Path(path).read_bytes(), expected_size, spec)


def load_dataset(directory: str | os.PathLike) -> tuple[Dataset, DatasetManifest]:
    directory = Path(directory)
    manifest = DatasetManifest.loads((directory / "manifest.json").read_text("utf-8"))
    parts = []
    for n in sorted(manifest.counts):
        name = shard_name(n)
        data = (directory / name).read_bytes()
        expected = manifest.checksums.get(name)
        if expected is not None and int(expected, 16) != struct.unpack("<Q", data[-8:])[0]:
            raise ChecksumError(f"{name}: checksum differs from manifest")
        part = decode_shard(data, manifest.lattice.size, manifest.lattice)
        if len(part) != manifest.counts[n] or (len(part) and set(part.ns.tolist()) != {n}):
            raise ValidationError(f"{name}: contents disagree with manifest counts")
        parts.append(part)
    if not parts:
        L = manifest.lattice.size
        return Dataset(manifest.lattice, [], np.zeros((0, L, L)), [], []), manifest
    return Dataset.concat(parts), manifest


def audit_residuals(ds: Dataset, tolerance: float) -> float:
    """Worst residual of stored float32 targets, minus float32 rounding slack.

    Storing a converged field in float32 perturbs each pixel by up to half an
    ulp; the slack subtracted is the residual that perturbation alone can cause.
    """
    worst = 0.0
    D, g = ds.spec.diffusion, ds.spec.decay
    eps = float(np.finfo(np.float32).eps)
    for row in range(len(ds)):
        cfg = ds.configs[row]
        res = residual_norm(ds.targets[row].astype(np.float64), cfg, ds.spec)
        # |delta u| <= eps/2 * u_max (= 1) per pixel; stencil gain is 8D + gamma
        coupling = D * max(s.value for s in cfg.sources)
        slack = 0.5 * eps * (8 * D + g) / coupling
        worst = max(worst, res - slack)
    return max(worst, 0.0)


def split_train_test(ds: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified per-source-count split; disjoint and seed-deterministic."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"split fraction must lie in (0, 1), got {fraction}")
    if not ds.balanced:
        raise ValidationError("split requires a balanced dataset")
    train_rows, test_rows = [], []
    for n in sorted(ds.counts()):
        rows = ds.rows_for(n)
        # order by index first so the split does not depend on row order
        rows = rows[np.argsort(ds.indices[rows], kind="stable")]
        perm = np.random.default_rng(np.random.SeedSequence([seed, n, _SPLIT_TAG])).permutation(len(rows))
        k = _floor_count(fraction, len(rows))
        train_rows.extend(rows[perm[:k]].tolist())
        test_rows.extend(rows[perm[k:]].tolist())
    return ds.select(sorted(train_rows)), ds.select(sorted(test_rows))


def _per_n_orders(train: Dataset, seed: int, tag: int) -> dict[int, np.ndarray]:
    orders = {}
    for n in sorted(train.counts()):
        rows = train.rows_for(n)
        rows = rows[np.argsort(train.indices[rows], kind="stable")]
        perm = np.random.default_rng(np.random.SeedSequence([seed, n, tag])).permutation(len(rows))
        orders[n] = rows[perm]
    return orders


def nested_subsets(train: Dataset, fractions: Sequence[float] = DEFAULT_SUBSET_FRACTIONS,
                   seed: int = 0) -> list[Dataset]:
    """Balanced subsets where a smaller fraction is always a prefix of a larger one."""
    if not train.balanced:
        raise ValidationError("nested subsets require a balanced training set")
    orders = _per_n_orders(train, seed, _SUBSET_TAG)
    out = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValidationError(f"subset fraction must lie in (0, 1], got {f}")
        rows = []
        for n, order in orders.items():
            k = _floor_count(f, len(order))
            if k < 1:
                raise ValidationError(f"fraction {f} leaves no samples with n={n}")
            rows.extend(order[:k].tolist())
        out.append(train.select(sorted(rows)))
    return out


def disjoint_subsets(train: Dataset, fraction: float, k: int, seed: int = 0) -> list[Dataset]:
    """``k`` pairwise-disjoint balanced subsets of the given fraction each."""
    orders = _per_n_orders(train, seed, _DISJOINT_TAG)
    out = []
    for j in range(k):
        rows = []
        for n, order in orders.items():
            size = _floor_count(fraction, len(order))
            if size < 1 or (j + 1) * size > len(order):
                raise ValidationError(f"cannot draw {k} disjoint {fraction} subsets for n={n}")
            rows.extend(order[j * size:(j + 1) * size].tolist())
        out.append(train.select(sorted(rows)))
    return out
