"""Ground-truth steady states of D*lap(u) - gamma*u = 0 with clamped disk sources.

The lattice boundary is absorbing (u = 0) and source pixels hold their value.
The remaining "free" pixels are solved with Jacobi-preconditioned conjugate
gradients on the 5-point stencil; :func:`time_march_oracle` integrates the
time-dependent equation to the same state as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SolverError
from .lattice import FieldGrid, LatticeSpec, SourceConfig, rasterize_sources, source_mask

METHODS = ("direct-linear", "time-march")


@dataclass(frozen=True)
class SolverSettings:
    method: str = "direct-linear"
    tolerance: float = 1e-8
    max_iterations: int = 20_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown solver method {self.method!r}")
        if not self.tolerance > 0:
            raise ParameterError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")


def fixed_mask(config: SourceConfig, size: int) -> np.ndarray:
    """Pixels excluded from the unknowns: sources and the four boundary lines."""
    mask = source_mask(config, size)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return mask


def _neighbour_sum(u: np.ndarray) -> np.ndarray:
    # (N + S) + (W + E): the W/E pairing keeps the result bitwise mirror-equivariant
    out = np.zeros_like(u)
    out[1:-1, 1:-1] = (u[:-2, 1:-1] + u[2:, 1:-1]) + (u[1:-1, :-2] + u[1:-1, 2:])
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    # columns j and L-1-j are added first so the sum is invariant under mirroring
    p = a * b
    half = p.shape[1] // 2
    return float((p[:, :half] + p[:, ::-1][:, :half]).sum())


def _stencil_residual(u: np.ndarray, free: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    D, g = spec.diffusion, spec.decay
    return np.where(free, D * (_neighbour_sum(u) - 4.0 * u) - g * u, 0.0)


def residual_norm(field: FieldGrid | np.ndarray, config: SourceConfig, spec: LatticeSpec) -> float:
    """Relative infinity-norm of the stencil residual over free pixels.

    Normalised by the largest source coupling ``D * sum(fixed neighbours)``,
    i.e. the right-hand side of the eliminated linear system.
    """
    u = np.asarray(getattr(field, "values", field), dtype=np.float64)
    fixed = fixed_mask(config, spec.size)
    free = ~fixed
    clamped = np.where(fixed, u, 0.0)
    rhs = spec.diffusion * np.where(free, _neighbour_sum(clamped), 0.0)
    scale = np.abs(rhs).max()
    res = np.abs(_stencil_residual(u, free, spec)).max()
    return float(res / scale) if scale > 0 else float(res)


def solve_steady(config: SourceConfig, spec: LatticeSpec,
                 settings: SolverSettings | None = None) -> FieldGrid:
    settings = settings or SolverSettings()
    if settings.method != "direct-linear":
        raise ParameterError("solve_steady requires method='direct-linear'; "
                             "use time_march_oracle for time integration")
    L = spec.size
    D, g = spec.diffusion, spec.decay
    clamped = rasterize_sources(config, spec).values.copy()
    free = ~fixed_mask(config, L)

    def apply_a(x):
        return np.where(free, (4.0 * D + g) * x - D * _neighbour_sum(x), 0.0)

    b = D * np.where(free, _neighbour_sum(clamped), 0.0)
    bnorm = np.abs(b).max()
    inv_diag = 1.0 / (4.0 * D + g)
    tol = settings.tolerance

    x = np.zeros((L, L))
    it = 0
    rel = np.inf
    # outer loop restarts CG from the true residual if the recurrence drifted
    while it < settings.max_iterations:
        r = b - apply_a(x)
        rel = np.abs(r).max() / bnorm
        if rel <= tol:
            break
        z = r * inv_diag
        p = z.copy()
        rz = _dot(r, z)
        while it < settings.max_iterations:
            ap = apply_a(p)
            alpha = rz / _dot(p, ap)
            x += alpha * p
            r -= alpha * ap
            it += 1
            if np.abs(r).max() / bnorm <= 0.5 * tol:
                break
            z = r * inv_diag
            rz_new = _dot(r, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
    else:
        raise SolverError("conjugate gradient did not converge", rel, it)
    if not np.isfinite(x).all():
        raise SolverError("non-finite iterate", rel, it)

    u = np.where(free, x, clamped)
    return FieldGrid(u, "target")


def stable_time_step(spec: LatticeSpec) -> float:
    """Largest step for which the clamped explicit scheme stays monotone."""
    return 1.0 / (4.0 * spec.diffusion + spec.decay)


def time_march_oracle(config: SourceConfig, spec: LatticeSpec, dt: float | None = None,
                      t_end: float = 1e6, tol: float = 1e-13,
                      history: list | None = None) -> FieldGrid:
    """Forward-Euler march of du/dt = D*lap(u) - gamma*u from the rasterized input.

    Stops once the per-step change drops below ``tol`` (infinity norm) or at
    ``t_end``. If ``history`` is a list, a copy of the field is appended every
    step (only sensible on small lattices).
    """
    dt_max = stable_time_step(spec)
    dt = dt_max if dt is None else dt
    if not 0 < dt <= dt_max:
        raise ParameterError(f"dt={dt} violates the explicit stability bound {dt_max}")
    D, g = spec.diffusion, spec.decay
    u = rasterize_sources(config, spec).values.copy()
    free = ~fixed_mask(config, spec.size)
    t = 0.0
    while t < t_end:
        du = dt * _stencil_residual(u, free, spec)
        u += du
        t += dt
        if history is not None:
            history.append(u.copy())
        if np.abs(du).max() < tol:
            break
    return FieldGrid(u, "target")
