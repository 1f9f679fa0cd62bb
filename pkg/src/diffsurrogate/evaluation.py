"""Region-wise error reports, ensemble statistics, size scaling and inference matrices.

All errors are measured in the original field space: predictions of models
trained on sqrt-transformed targets are squared back first.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .errors import DimensionError, ValidationError
from .lattice import region_masks_array
from .losses import inverse_transform
from .network import SurrogateNet

REPORT_REGIONS = ("lattice", "field", "sources", "R1", "R2", "R3")


def mae_region(pred, target, mask) -> float | None:
    """Mean |pred - target| over ``mask``; ``None`` when the mask is empty."""
    pred, target, mask = np.asarray(pred), np.asarray(target), np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != target.shape:
        raise DimensionError("prediction, target and mask must share a shape")
    k = np.count_nonzero(mask)
    if k == 0:
        return None
    return float(np.abs(pred.astype(np.float64)[mask] - target.astype(np.float64)[mask]).sum() / k)


def sample_region_errors(pred, target, input) -> dict[str, float | None]:
    masks = region_masks_array(np.asarray(input), np.asarray(target))
    out = {"lattice": mae_region(pred, target, np.ones(np.shape(target), dtype=bool))}
    for name in REPORT_REGIONS[1:]:
        out[name] = mae_region(pred, target, masks[name])
    return out


@dataclass
class EvalReport:
    """Mean region MAE per source count; ``nan`` marks a region absent for every sample."""

    ns: list[int]
    values: np.ndarray                  # (len(ns), len(REPORT_REGIONS))
    counts: np.ndarray                  # samples contributing to each cell
    regions: tuple = REPORT_REGIONS

    def cell(self, n: int, region: str) -> float:
        return float(self.values[self.ns.index(n), self.regions.index(region)])

    def column(self, region: str) -> np.ndarray:
        return self.values[:, self.regions.index(region)]

    def n_averaged(self, region: str) -> float:
        """Average over source counts, skipping absent cells."""
        col = self.column(region)
        col = col[~np.isnan(col)]
        return float(col.mean()) if col.size else float("nan")

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", *self.regions, "samples"])
            for i, n in enumerate(self.ns):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in self.values[i]]
                w.writerow([n, *cells, int(self.counts[i].max())])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        regions = tuple(header[1:-1])
        ns = [int(r[0]) for r in body]
        vals = np.array([[float(c) if c else np.nan for c in r[1:-1]] for r in body])
        counts = np.array([[int(r[-1])] * len(regions) for r in body])
        return cls(ns, vals.reshape(len(ns), len(regions)), counts.reshape(len(ns), len(regions)), regions)


def predict_fields(net: SurrogateNet, inputs: np.ndarray, transform: str = "identity",
                   batch_size: int = 16) -> np.ndarray:
    return inverse_transform(transform, net.predict(inputs, batch_size))


def report_from_predictions(preds: np.ndarray, test: Dataset) -> EvalReport:
    if preds.shape != test.targets.shape:
        raise DimensionError(f"predictions {preds.shape} vs targets {test.targets.shape}")
    order = sorted(range(len(test)), key=lambda r: (int(test.ns[r]), int(test.indices[r])))
    ns = sorted(test.counts())
    sums = {(n, reg): [] for n in ns for reg in REPORT_REGIONS}
    for r in order:
        errs = sample_region_errors(preds[r], test.targets[r], test.inputs[r])
        for reg, v in errs.items():
            if v is not None:
                sums[(int(test.ns[r]), reg)].append(v)
    values = np.full((len(ns), len(REPORT_REGIONS)), np.nan)
    counts = np.zeros((len(ns), len(REPORT_REGIONS)), dtype=np.int64)
    for i, n in enumerate(ns):
        for j, reg in enumerate(REPORT_REGIONS):
            vals = sums[(n, reg)]
            counts[i, j] = len(vals)
            if vals:
                values[i, j] = math.fsum(vals) / len(vals)
    return EvalReport(ns, values, counts)


def evaluate_model(net: SurrogateNet, test: Dataset, transform: str = "identity") -> EvalReport:
    """Per-source-count, per-region MAE of ``net`` on ``test`` (order-invariant)."""
    if net.config.size != test.spec.size:
        raise DimensionError(f"network input {net.config.size} != test lattice {test.spec.size}")
    # canonical order fixes batch composition, so permuted test sets give identical reports
    order = sorted(range(len(test)), key=lambda r: (int(test.ns[r]), int(test.indices[r])))
    canon = test.select(order)
    preds = predict_fields(net, canon.inputs, transform)
    return report_from_predictions(preds, canon)


@dataclass
class EnsembleStats:
    ns: list[int]
    mean: np.ndarray
    std: np.ndarray
    regions: tuple = REPORT_REGIONS


def ensemble_stats(reports: Sequence[EvalReport]) -> EnsembleStats:
    """Cellwise mean and population standard deviation over reports."""
    if len(reports) < 2:
        raise ValidationError("ensemble statistics need at least two reports")
    first = reports[0]
    for r in reports[1:]:
        if r.ns != first.ns or r.values.shape != first.values.shape or r.regions != first.regions:
            raise DimensionError("reports differ in shape")
    stack = np.stack([r.values for r in reports])
    # shifting by the first report keeps identical ensembles at exactly zero spread
    dev = stack - stack[0]
    shift = dev.mean(axis=0)
    std = np.sqrt(np.maximum((dev * dev).mean(axis=0) - shift * shift, 0.0))
    return EnsembleStats(list(first.ns), stack[0] + shift, std, first.regions)


@dataclass
class ScalingCurve:
    region: str
    fractions: np.ndarray
    mae: np.ndarray
    slope: float
    intercept: float
    r2: float


def log_fit(x, y) -> tuple[float, float, float]:
    """Least squares ``y = intercept + slope * ln(x)``; returns (slope, intercept, R^2)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValidationError("a log fit needs at least two points")
    lx = np.log(x)
    dx = lx - lx.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise ValidationError("a log fit needs at least two distinct x values")
    dy = y - y[0]
    slope = float(dx @ dy) / sxx
    intercept = y[0] + dy.mean() - slope * lx.mean()
    resid = y - (intercept + slope * lx)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return float(slope), float(intercept), r2


def size_scaling_curve(reports: Mapping[float, EvalReport],
                       regions: Sequence[str] = REPORT_REGIONS) -> dict[str, ScalingCurve]:
    """Source-count-averaged MAE vs training fraction, with a fit against ln(fraction)."""
    if len(reports) < 2:
        raise ValidationError("size scaling needs at least two training fractions")
    fr = np.array(sorted(reports))
    out = {}
    for reg in regions:
        y = np.array([reports[f].n_averaged(reg) for f in fr])
        ok = ~np.isnan(y)
        slope, icpt, r2 = log_fit(fr[ok], y[ok])
        out[reg] = ScalingCurve(reg, fr, y, slope, icpt, r2)
    return out


@dataclass
class InferenceMatrix:
    """``raw[i, j]`` = MAE of the model trained on ``train_counts[j]`` sources,
    tested on ``test_counts[i]`` sources."""

    region: str
    train_counts: list[int]
    test_counts: list[int]
    raw: np.ndarray
    excluded: tuple = ()

    def included(self) -> list[int]:
        return [p for p in self.train_counts if p not in self.excluded]

    def normalized(self) -> np.ndarray:
        """Rows divided by their maximum over the non-excluded train counts."""
        cols = [self.train_counts.index(p) for p in self.included()]
        sub = self.raw[:, cols]
        return normalize_rows(sub)

    def row_average(self) -> dict[int, float]:
        """Mean over test counts of the raw errors, for each train count."""
        return {p: float(self.raw[:, j].mean()) for j, p in enumerate(self.train_counts)}

    def best_train_count(self) -> int:
        avg = {p: v for p, v in self.row_average().items() if p not in self.excluded}
        return min(avg, key=avg.get)

    def to_csv(self, path: str | os.PathLike, normalized: bool = False) -> None:
        data = self.normalized() if normalized else self.raw
        cols = self.included() if normalized else self.train_counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{self.region}: test_m \\ train_p", *cols])
            for i, m in enumerate(self.test_counts):
                w.writerow([m, *(repr(float(v)) for v in data[i])])

    def to_pgm(self, path: str | os.PathLike) -> None:
        """Row-normalised heat map, one byte per cell (rows = test counts)."""
        img = np.round(255 * self.normalized()).astype(np.uint8)
        h, w = img.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    peak = m.max(axis=1, keepdims=True)
    return np.divide(m, peak, out=np.zeros_like(m), where=peak > 0)


def cross_evaluate(models: Mapping[int, SurrogateNet], test_sets: Mapping[int, Dataset],
                   transform: str = "identity") -> dict[tuple[int, int], EvalReport]:
    if not models:
        raise ValidationError("no models given")
    cfgs = {m.config for m in models.values()}
    if len(cfgs) != 1:
        raise ValidationError("all models must share one NetConfig")
    return {(p, m): evaluate_model(net, ds, transform)
            for p, net in sorted(models.items()) for m, ds in sorted(test_sets.items())}


def inference_matrix(models: Mapping[int, SurrogateNet] | None, test_sets: Mapping[int, Dataset] | None,
                     region: str = "lattice", exclude: Sequence[int] = (),
                     reports: Mapping[tuple[int, int], EvalReport] | None = None) -> InferenceMatrix:
    """Cross-source-count error matrix for one region.

    Pass precomputed ``reports`` (from :func:`cross_evaluate`) to build
    matrices for several regions without re-running the models.
    """
    if reports is None:
        reports = cross_evaluate(models, test_sets)
    if not reports:
        raise ValidationError("no models given")
    ps = sorted({p for p, _ in reports})
    ms = sorted({m for _, m in reports})
    raw = np.empty((len(ms), len(ps)))
    for i, m in enumerate(ms):
        for j, p in enumerate(ps):
            raw[i, j] = reports[(p, m)].n_averaged(region)
    excl = tuple(p for p in exclude if p in ps)
    if len(excl) == len(ps):
        raise ValidationError("every train count was excluded")
    return InferenceMatrix(region, ps, ms, raw, excl)
