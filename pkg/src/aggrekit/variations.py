"""First and second order variations of the aggregation models.

With initial data eps*f1 + eps^2/2 * f2 the solution expands as
u = eps*uI + eps^2/2 * uII + O(eps^3), where

    duI/dt  = d lap uI,                      uI(0)  = f1
    duII/dt = d lap uII + 2 B(uI, uI),       uII(0) = f2

and B(a, b)_i = div(a_i * drift_i(b)) is the model's bilinear flux. The
direct solver below uses the same splitting as the nonlinear solver, so the
two routes differ only by the O(eps) expansion remainder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridError, NumericalFailure
from .forward import ModelOperator, ModelParams, Trajectory, _as_array, _time_index, simulate, step_schedule
from .torus import TorusGrid

DEFAULT_EPSILONS = (1e-2, 5e-3, 2.5e-3)


class HeatFlow:
    """Exact first variation evaluated lazily: uI(t) = exp(t d lap) f1 per species."""

    def __init__(self, grid: TorusGrid, d, f1):
        self.grid = grid
        self.d = np.atleast_1d(np.asarray(d, dtype=float))
        if np.any(self.d <= 0):
            raise ConfigError("diffusion coefficients must be positive")
        self.f1 = _as_array(f1, grid)
        self._hat = grid.fft(self.f1)
        self._real = not np.iscomplexobj(self.f1)

    def at(self, t: float) -> np.ndarray:
        g = self.grid
        sym = np.exp(-self.d.reshape((-1,) + (1,) * g.ndim) * g.k_squared * t)
        return g.ifft(self._hat * sym, real=self._real)


def solve_first_variation(grid: TorusGrid, d, f1, T: float, dt: float, times=None) -> Trajectory:
    """Heat evolution of f1 per species, sampled at ``times`` (default every step)."""
    f1 = _as_array(f1, grid)
    if not np.iscomplexobj(f1) and np.any(f1 < 0):
        raise ConfigError("first-order data must be non-negative")
    nsteps, idx = step_schedule(T, dt, np.arange(int(round(T / dt)) + 1) * dt if times is None else times)
    flow = HeatFlow(grid, d, f1)
    return Trajectory(grid, np.array([k * dt for k in idx]), np.stack([flow.at(k * dt) for k in idx]), dt,
                      {"model": "heat"})


def _midpoint_source(uI, params: ModelParams, dt: float):
    """Return a function n -> uI at t_n + dt/2 for a HeatFlow or a full-step Trajectory."""
    if isinstance(uI, HeatFlow):
        return lambda n: uI.at((n + 0.5) * dt)
    if isinstance(uI, Trajectory):
        g = uI.grid
        sym = np.exp(-params.d.reshape((-1,) + (1,) * g.ndim) * g.k_squared * dt / 2)

        def mid(n):
            k = _time_index(uI.times, n * dt)
            if k is None:
                raise GridError(f"uI trajectory has no sample at t={n * dt}; time grids differ")
            return g.apply_symbol(uI.states[k], sym)

        return mid
    raise ConfigError("uI must be a HeatFlow or a Trajectory")


def solve_second_variation(params: ModelParams, grid: TorusGrid, uI, f2, T: float, dt: float,
                           times=None) -> Trajectory:
    """Integrate duII/dt = d lap uII + 2 B(uI, uI) from uII(0) = f2."""
    nsteps, idx = step_schedule(T, dt, times)
    if isinstance(uI, Trajectory):
        if uI.grid != grid:
            raise GridError("uI lives on a different grid")
        step_times = np.arange(nsteps) * dt
        if len(uI.times) < nsteps or any(_time_index(uI.times, t) is None for t in step_times):
            raise GridError("uI trajectory must be sampled at every step time")
    op = ModelOperator(params, grid)
    mid = _midpoint_source(uI, params, dt)
    f2 = _as_array(f2, grid)
    u = f2.copy()
    lead = mid(0).shape
    if u.shape != lead:
        u = np.broadcast_to(u, lead).copy()
    if np.iscomplexobj(mid(0)):
        u = u.astype(complex)
    half = np.exp(-params.d.reshape((-1,) + (1,) * grid.ndim) * grid.k_squared * dt / 2)
    want = dict.fromkeys(idx)
    snaps = [u.copy()] if 0 in want else []
    for n in range(nsteps):
        u = grid.apply_symbol(u, half)
        if op.active:
            a = mid(n)
            u = u + dt * 2.0 * op.bilinear(a, a)
        u = grid.apply_symbol(u, half)
        if not np.all(np.isfinite(u)):
            raise NumericalFailure(f"non-finite second variation at step {n + 1}", stage="second_variation")
        if (n + 1) in want:
            snaps.append(u.copy())
    return Trajectory(grid, np.array([k * dt for k in idx]), np.stack(snaps), dt, {"model": params.model})


def solve_second_variation_m1(params, grid, uI, f2, T, dt, times=None) -> Trajectory:
    if params.model != "M1":
        raise ConfigError("model M1 parameters required")
    return solve_second_variation(params, grid, uI, f2, T, dt, times)


def solve_second_variation_m2(params, grid, uI, f2, T, dt, times=None) -> Trajectory:
    if params.model != "M2":
        raise ConfigError("model M2 parameters required")
    return solve_second_variation(params, grid, uI, f2, T, dt, times)


@dataclass
class VariationInput:
    f1: np.ndarray
    f2: np.ndarray
    epsilons: tuple = DEFAULT_EPSILONS

    def __post_init__(self):
        self.f1 = np.asarray(self.f1, dtype=float)
        self.f2 = np.asarray(self.f2, dtype=float)
        eps = np.asarray(self.epsilons, dtype=float)
        if np.any(self.f1 < 0):
            raise ConfigError("f1 must be non-negative at every node")
        if len(eps) < 2:
            raise ConfigError("need at least two epsilon values")
        if np.any(eps <= 0) or np.any(eps >= 1) or len(set(eps.tolist())) != len(eps):
            raise ConfigError("epsilons must be distinct values in (0, 1)")
        self.epsilons = tuple(sorted(eps.tolist(), reverse=True))


@dataclass
class VariationPair:
    uI: Trajectory
    uII: Trajectory
    residual: float
    solutions: dict = field(default_factory=dict)


def extract_variations(params: ModelParams, grid: TorusGrid, data: VariationInput, T: float, dt: float,
                       times=None, keep_solutions: bool = False) -> VariationPair:
    """Fit u(eps) = eps*a + eps^2/2 * b node-wise over the epsilon ladder."""
    eps = np.asarray(data.epsilons)
    runs = []
    for e in eps:
        try:
            tr = simulate(params, grid, e * data.f1 + 0.5 * e * e * data.f2, T, dt, times)
        except NumericalFailure as exc:
            raise NumericalFailure(f"nonlinear solve failed for eps={e}: {exc.message}",
                                   stage="extract_variations", eps=e) from exc
        runs.append(tr)
    U = np.stack([r.states for r in runs])
    V = np.stack([eps, 0.5 * eps ** 2], axis=1)
    flat = U.reshape(len(eps), -1)
    coef, *_ = np.linalg.lstsq(V, flat, rcond=None)
    fit = V @ coef
    scale = np.linalg.norm(flat)
    residual = float(np.linalg.norm(flat - fit) / scale) if scale > 0 else 0.0
    shape = U.shape[1:]
    a = coef[0].reshape(shape)
    b = coef[1].reshape(shape)
    t = runs[0].times
    sols = {float(e): r for e, r in zip(eps, runs)} if keep_solutions else {}
    return VariationPair(Trajectory(grid, t, a, dt), Trajectory(grid, t, b, dt), residual, sols)


def convergence_order(eps, errors) -> float:
    """Least-squares slope of log(error) against log(eps)."""
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ConvergenceStudy:
    scales: np.ndarray
    errors_I: np.ndarray
    errors_II: np.ndarray
    order_I: float
    order_II: float
    residuals: np.ndarray


def _relative(a, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a - b))


def variation_convergence(params: ModelParams, grid: TorusGrid, f1, f2, T: float, dt: float,
                          scales=DEFAULT_EPSILONS, times=None) -> ConvergenceStudy:
    """Extracted-vs-direct errors as the epsilon ladder shrinks.

    At each scale e the fit uses the three values (e, e/2, e/4); nonlinear
    runs shared between neighbouring scales are reused.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    scales = np.asarray(sorted(scales, reverse=True), dtype=float)
    flow = HeatFlow(grid, params.d, f1)
    _, idx = step_schedule(T, dt, times)
    uI = np.stack([flow.at(k * dt) for k in idx])
    uII = solve_second_variation(params, grid, flow, f2, T, dt, times).states
    cache = {}

    def run(e):
        key = float(e)
        if key not in cache:
            cache[key] = simulate(params, grid, e * f1 + 0.5 * e * e * f2, T, dt, times).states
        return cache[key]

    eI, eII, res = [], [], []
    for s in scales:
        eps = np.array([s, s / 2, s / 4])
        U = np.stack([run(e) for e in eps]).reshape(3, -1)
        V = np.stack([eps, 0.5 * eps ** 2], axis=1)
        coef, *_ = np.linalg.lstsq(V, U, rcond=None)
        res.append(float(np.linalg.norm(U - V @ coef) / max(np.linalg.norm(U), 1e-300)))
        eI.append(_relative(coef[0], uI.reshape(-1)))
        eII.append(_relative(coef[1], uII.reshape(-1)))
    eI, eII = np.array(eI), np.array(eII)
    return ConvergenceStudy(scales, eI, eII, convergence_order(scales, eI), convergence_order(scales, eII),
                            np.array(res))
