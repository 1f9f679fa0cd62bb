"""Lattice geometry, disk sources, field grids and evaluation regions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvariantError

ROLES = ("input", "target", "prediction")
REGION_NAMES = ("field", "sources", "R1", "R2", "R3")

# (lower, upper, upper_closed) bounds on the target value; source pixels excluded.
REGION_BOUNDS = {
    "R1": (0.2, 1.0, True),
    "R2": (0.1, 0.2, False),
    "R3": (0.05, 0.1, False),
}


@dataclass(frozen=True)
class LatticeSpec:
    size: int = 512
    diffusion: float = 1.0
    decay: float = 1.0 / 400.0

    def __post_init__(self):
        if self.size < 16 or self.size & (self.size - 1):
            raise InvariantError(f"lattice size must be a power of two >= 16, got {self.size}")
        if not (self.diffusion > 0 and self.decay > 0):
            raise InvariantError("diffusion and decay must be positive")

    @property
    def diffusion_length(self) -> float:
        return math.sqrt(self.diffusion / self.decay)


@dataclass(frozen=True)
class Source:
    cx: int
    cy: int
    radius: int = 5
    value: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.value <= 1.0:
            raise InvariantError(f"source value must lie in (0, 1], got {self.value}")
        if self.radius < 0:
            raise InvariantError("source radius must be non-negative")

    def fits(self, size: int) -> bool:
        r = self.radius
        # disks stay clear of the absorbing boundary rows/columns
        return r < self.cx < size - 1 - r and r < self.cy < size - 1 - r


@dataclass(frozen=True)
class SourceConfig:
    sources: tuple[Source, ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        # counts above 20 are allowed whenever they fit on the lattice
        if len(self.sources) == 0:
            raise InvariantError("a source configuration needs at least one source")
        n_unit = sum(1 for s in self.sources if s.value == 1.0)
        if n_unit != 1:
            raise InvariantError(f"exactly one source must have value 1, found {n_unit}")
        for i, a in enumerate(self.sources):
            for b in self.sources[i + 1:]:
                # integer disks at exactly r_a + r_b share their midpoint pixel
                if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 <= (a.radius + b.radius) ** 2:
                    raise InvariantError(f"sources overlap: {a} and {b}")

    @property
    def n(self) -> int:
        return len(self.sources)

    def validate(self, spec: LatticeSpec) -> None:
        for s in self.sources:
            if not s.fits(spec.size):
                raise InvariantError(f"{s} is not fully inside a {spec.size}^2 lattice")

    def mirrored(self, size: int) -> "SourceConfig":
        """Reflect every source across the vertical midline (x -> L-1-x)."""
        return SourceConfig(tuple(
            Source(size - 1 - s.cx, s.cy, s.radius, s.value) for s in self.sources))

    def translated(self, dx: int, dy: int) -> "SourceConfig":
        return SourceConfig(tuple(
            Source(s.cx + dx, s.cy + dy, s.radius, s.value) for s in self.sources))


@dataclass(frozen=True, eq=False)
class FieldGrid:
    """An L x L field, indexed ``values[y, x]`` (row-major)."""

    values: np.ndarray
    role: str = "input"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DimensionError(f"field grid must be square 2-D, got shape {v.shape}")
        if v.flags.writeable:
            v = v.copy()
            v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def disk_offsets(radius: int) -> np.ndarray:
    """Integer offsets (dy, dx) with dx^2 + dy^2 <= radius^2."""
    d = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    keep = dx * dx + dy * dy <= radius * radius
    return np.stack([dy[keep], dx[keep]], axis=1)


def source_mask(config: SourceConfig, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for s in config.sources:
        off = disk_offsets(s.radius)
        mask[s.cy + off[:, 0], s.cx + off[:, 1]] = True
    return mask


def rasterize_sources(config: SourceConfig, spec: LatticeSpec) -> FieldGrid:
    config.validate(spec)
    L = spec.size
    grid = np.zeros((L, L), dtype=np.float64)
    painted = np.zeros((L, L), dtype=bool)
    for s in config.sources:
        off = disk_offsets(s.radius)
        ys, xs = s.cy + off[:, 0], s.cx + off[:, 1]
        if painted[ys, xs].any():
            raise InvariantError(f"source at ({s.cx}, {s.cy}) overlaps another source")
        painted[ys, xs] = True
        grid[ys, xs] = s.value
    return FieldGrid(grid, "input")


@dataclass(frozen=True, eq=False)
class RegionSet:
    masks: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    @property
    def size(self) -> int:
        return self.masks["field"].shape[0]


def region_masks_array(input_values: np.ndarray, target_values: np.ndarray) -> dict:
    """Region masks from raw arrays; see :func:`compute_region_masks`."""
    if input_values.shape != target_values.shape:
        raise DimensionError(
            f"input {input_values.shape} and target {target_values.shape} differ in shape")
    sources = input_values > 0
    fieldm = ~sources
    masks = {"field": fieldm, "sources": sources}
    for name, (lo, hi, closed) in REGION_BOUNDS.items():
        upper = target_values <= hi if closed else target_values < hi
        masks[name] = fieldm & (target_values >= lo) & upper
    for m in masks.values():
        m.flags.writeable = False
    return masks


def compute_region_masks(input: FieldGrid, target: FieldGrid) -> RegionSet:
    """Split the lattice into source/field pixels and the R1-R3 value bands.

    Sources come from the input (``input > 0``); R1 = [0.2, 1], R2 = [0.1, 0.2),
    R3 = [0.05, 0.1) on target values over non-source pixels.
    """
    if input.role != "input" or target.role != "target":
        raise ValueError("expected an input grid and a target grid")
    return RegionSet(region_masks_array(input.values, target.values))


def area_fractions(regions: RegionSet) -> dict:
    total = regions.size ** 2
    return {name: float(np.count_nonzero(m)) / total for name, m in regions.masks.items()}


def source_pixel_count(sources: Sequence[Source]) -> int:
    return sum(len(disk_offsets(s.radius)) for s in sources)
