"""Pixel-weighted regression losses used to train the surrogate.

A loss is ``mean_i weight(y_i) * metric(yhat_i - y_i)`` over every pixel of
every sample in the batch. Weights emphasise the rare high-valued pixels:

* exp prefactor   ``exp(-(1 - y) / w)``
* step prefactor  ``1 + a * tanh(b * y)``

Per-epoch schedules can switch the prefactor during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError

METRICS = ("mae", "mse", "huber", "invhuber")
PREFACTORS = ("none", "exp", "step")
SCHEDULES = ("fixed", "toggle", "random")
TRANSFORMS = ("identity", "sqrt")


@dataclass(frozen=True)
class LossSpec:
    metric: str = "mae"
    prefactor: str = "exp"
    w: float = 1.0
    a: float = 4000.0
    b: float = 10.0
    delta: float = 0.5
    schedule: str = "fixed"
    period: int = 1
    p_step: float = 0.8
    transform: str = "identity"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ParameterError(f"unknown metric {self.metric!r}")
        if self.prefactor not in PREFACTORS:
            raise ParameterError(f"unknown prefactor {self.prefactor!r}")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.transform not in TRANSFORMS:
            raise ParameterError(f"unknown target transform {self.transform!r}")
        uses_exp = self.prefactor == "exp" or self.schedule != "fixed"
        uses_step = self.prefactor == "step" or self.schedule != "fixed"
        if uses_exp and not self.w > 0:
            raise ParameterError("exp prefactor needs w > 0")
        if uses_step and (self.a < 0 or self.b < 0):
            raise ParameterError("step prefactor needs a >= 0 and b >= 0")
        if self.metric in ("huber", "invhuber") and not self.delta > 0:
            raise ParameterError("Huber-type metrics need delta > 0")
        if self.schedule == "toggle" and self.period < 1:
            raise ParameterError("toggle period must be >= 1")
        if not 0.0 <= self.p_step <= 1.0:
            raise ParameterError("p_step must lie in [0, 1]")

    @property
    def alpha(self) -> int | None:
        """Power of the error term for MAE/MSE (None for Huber-type metrics)."""
        return {"mae": 1, "mse": 2}.get(self.metric)

    def with_prefactor(self, prefactor: str) -> "LossSpec":
        return LossSpec(**{**self.__dict__, "prefactor": prefactor, "schedule": "fixed"})


def prefactor_weight(spec: LossSpec, y, prefactor: str | None = None):
    kind = spec.prefactor if prefactor is None else prefactor
    y = np.asarray(y, dtype=np.float64) if np.isscalar(y) else y
    if kind == "exp":
        return np.exp(-(1.0 - y) / spec.w)
    if kind == "step":
        return 1.0 + spec.a * np.tanh(spec.b * y)
    if kind == "none":
        return np.ones_like(y)
    raise ParameterError(f"unknown prefactor {kind!r}")


def metric_value(spec: LossSpec, e):
    ae = np.abs(e)
    d = spec.delta
    if spec.metric == "mae":
        return ae
    if spec.metric == "mse":
        return e * e
    if spec.metric == "huber":
        return np.where(ae <= d, 0.5 * e * e, d * (ae - 0.5 * d))
    if spec.metric == "invhuber":
        # linear branch goes below zero for |e| < delta/2; minimum -delta^2/2 at e = 0
        return np.where(ae > d, 0.5 * e * e, d * (ae - 0.5 * d))
    raise ParameterError(f"unknown metric {spec.metric!r}")


def metric_derivative(spec: LossSpec, e):
    """d metric / d e, with subgradient 0 at e = 0."""
    d = spec.delta
    if spec.metric == "mae":
        return np.sign(e)
    if spec.metric == "mse":
        return 2.0 * e
    if spec.metric == "huber":
        return np.where(np.abs(e) <= d, e, d * np.sign(e))
    if spec.metric == "invhuber":
        return np.where(np.abs(e) > d, e, d * np.sign(e))
    raise ParameterError(f"unknown metric {spec.metric!r}")


def _check_shapes(pred, target):
    if np.shape(pred) != np.shape(target):
        raise DimensionError(f"prediction {np.shape(pred)} and target {np.shape(target)} differ")


def weighted_loss(spec: LossSpec, pred, target, prefactor: str | None = None) -> float:
    _check_shapes(pred, target)
    w = prefactor_weight(spec, target, prefactor)
    return float(np.mean(w * metric_value(spec, pred - target)))


def loss_gradient(spec: LossSpec, pred, target, prefactor: str | None = None):
    """Gradient of :func:`weighted_loss` with respect to ``pred``."""
    _check_shapes(pred, target)
    w = prefactor_weight(spec, target, prefactor)
    return w * metric_derivative(spec, pred - target) / np.size(pred)


def loss_and_gradient(spec: LossSpec, pred, target, prefactor: str | None = None):
    _check_shapes(pred, target)
    e = pred - target
    w = prefactor_weight(spec, target, prefactor)
    return float(np.mean(w * metric_value(spec, e))), w * metric_derivative(spec, e) / e.size


def schedule_select(spec: LossSpec, epoch: int, seed: int = 0) -> str:
    """Prefactor in force during ``epoch``.

    ``toggle`` starts with exp and flips every ``period`` epochs; ``random``
    picks step with probability ``p_step``, drawn from ``(seed, epoch)``.
    """
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if spec.schedule == "fixed":
        return spec.prefactor
    if spec.schedule == "toggle":
        return "exp" if (epoch // spec.period) % 2 == 0 else "step"
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5C4ED]))
    return "step" if rng.random() < spec.p_step else "exp"


def target_transform(kind: str, grid):
    if kind == "identity":
        return grid
    if kind == "sqrt":
        if np.any(np.asarray(grid) < 0):
            raise ValidationError("sqrt transform needs non-negative values")
        return np.sqrt(grid)
    raise ParameterError(f"unknown target transform {kind!r}")


def inverse_transform(kind: str, grid):
    if kind == "identity":
        return grid
    if kind == "sqrt":
        return np.square(grid)
    raise ParameterError(f"unknown target transform {kind!r}")
