"""Recovery of a spatially varying diffusivity from first-order time series.

For the first variation du/dt = d(x) lap u, u(0) = f1, with d = 1 outside a
small region and m = 1 - 1/d, the Laplace transform at small p obeys

    h(x, p) = (u~(x, p) / ln p - g(x, p)) / D(p),
    D(p)    = (p ln p / 4 pi^2) (1/2 + gamma / ln p)^2,
    h      ~= H0 + H1 s + H2 s^2,   s = 1 / (ln p + 2 gamma),

where g is the d = 1 response divided by ln p. For a point source at q,

    H2(x) = 4 int ln(|x - r|/2) m(r) ln(|r - q|/2) dr,

a first-kind equation for m that is regularized with a gradient penalty.
The periodic box is treated as the plane: sources, receivers and m sit far
from the box edges so wrap-around is negligible over the data horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import exp1, k0

from .errors import AggrekitError, ConfigError, NonphysicalDiffusion, NumericalFailure
from .forward import MeasurementSet, SeriesRecorder, simulate_variable_heat
from .torus import Field, TorusGrid

GAMMA = float(np.euler_gamma)
P_MAX = float(np.exp(-2 * GAMMA))
DEFAULT_P_LADDER = tuple(np.geomspace(0.3, 0.02, 8))
# mean of ln|y| over a square cell of side h centred at the origin is ln h + CELL_LOG_OFFSET
CELL_LOG_OFFSET = -1.5 + np.pi / 4 + 0.5 * np.log(0.5)


# Laplace transform of sampled series


@dataclass
class TailFit:
    model: str
    coef: np.ndarray  # (n_basis, ...) per series
    start: float
    end: float
    residual: float
    anchored: bool = False  # c/t matched to the last sample because the fit was poor


def _tail_basis(model, t):
    t = np.asarray(t, dtype=float)
    if model == "inverse_t":
        return (1 / t)[..., None]
    lt = np.log(t)
    return np.stack([1 / t ** 2, lt / t ** 2, 1 / t ** 3, lt / t ** 3, lt ** 2 / t ** 3], -1)


TAIL_TOLERANCE = 1e-3


def fit_tail(times, values, model: str = "inverse_t", start_fraction: float | None = None) -> TailFit:
    """Least-squares tail model on the late part of the series.

    ``inverse_t`` fits c/t on the last decade [T/10, T]. When the series is
    not 1/t-like there (relative misfit above TAIL_TOLERANCE, e.g. exponential
    decay), c is matched to the last sample instead. ``log_algebraic``
    fits the basis {1/t^2, ln t/t^2, 1/t^3, ln t/t^3, ln^2 t/t^3} on [T/3, T],
    the decay of a compactly supported perturbation of the plane heat flow.
    """
    if model not in ("inverse_t", "log_algebraic"):
        raise ConfigError(f"unknown tail model {model!r}")
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    T = float(t[-1])
    frac = start_fraction if start_fraction is not None else (0.1 if model == "inverse_t" else 1 / 3)
    sel = t >= frac * T
    B = _tail_basis(model, t[sel])
    if sel.sum() < max(4, 2 * B.shape[-1]) or t[sel][0] <= 0:
        raise ConfigError("series too short to fit the tail", samples=int(sel.sum()))
    flat = v[sel].reshape(sel.sum(), -1)
    coef, *_ = np.linalg.lstsq(B, flat, rcond=None)
    scale = np.max(np.abs(flat)) if flat.size else 0.0
    res = float(np.max(np.abs(B @ coef - flat)) / scale) if scale > 0 else 0.0
    if model == "inverse_t" and res > TAIL_TOLERANCE:
        coef = (T * v[-1]).reshape(1, -1)
        return TailFit(model, coef.reshape((1,) + v.shape[1:]), T, T, res, anchored=True)
    return TailFit(model, coef.reshape((B.shape[-1],) + v.shape[1:]), float(t[sel][0]), T, res)


def _tail_integral(fit: TailFit, p) -> np.ndarray:
    """int_T^inf tail(t) exp(-p t) dt for every series."""
    T = fit.end
    if fit.model == "inverse_t":
        return fit.coef[0] * exp1(p * T)
    coef = fit.coef.reshape(fit.coef.shape[0], -1)
    out = np.empty(coef.shape[1], dtype=complex if np.iscomplexobj(p) else float)
    for k in range(coef.shape[1]):
        def f(t, part):
            val = (_tail_basis("log_algebraic", t) @ coef[:, k]) * np.exp(-p * t)
            return float(np.real(val) if part == 0 else np.imag(val))

        re, _ = quad(f, T, np.inf, args=(0,), limit=200, epsabs=1e-16, epsrel=1e-12)
        if np.iscomplexobj(p) or np.iscomplexobj(coef):
            im, _ = quad(f, T, np.inf, args=(1,), limit=200, epsabs=1e-16, epsrel=1e-12)
            out[k] = re + 1j * im
        else:
            out[k] = re
    return out.reshape(fit.coef.shape[1:])


def laplace_transform(times, values, p, tail: str | TailFit | None = "inverse_t"):
    """int_0^inf u(t) exp(-p t) dt from uniformly sampled values.

    Trapezoidal quadrature over the data window plus the analytic integral of
    a fitted tail beyond it (``tail=None`` truncates at the last sample).
    ``values`` has time on axis 0; any further axes are separate series.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    if np.real(p) <= 0:
        raise ConfigError("Laplace variable must have positive real part", p=complex(p))
    if len(t) < 2 or len(t) != len(v):
        raise ConfigError("series too short")
    steps = np.diff(t)
    if np.ptp(steps) > 1e-9 * max(steps.max(), 1e-300) or t[0] != 0:
        raise ConfigError("series must start at t = 0 with a uniform step")
    wts = np.exp(-p * t).reshape((-1,) + (1,) * (v.ndim - 1))
    body = np.trapezoid(v * wts, t, axis=0)
    if tail is None:
        return body
    fit = tail if isinstance(tail, TailFit) else fit_tail(t, v, tail)
    return body + _tail_integral(fit, p)


# comparison profiles


@dataclass(frozen=True)
class PointSource:
    """Unit-mass source at ``position``; ``width`` > 0 means a Gaussian of that standard deviation."""

    position: tuple
    width: float = 0.0
    mass: float = 1.0

    def sample(self, grid: TorusGrid) -> np.ndarray:
        if self.width <= 0:
            raise ConfigError("a point mass cannot be sampled on a grid; give a width")
        X = grid.coords()
        r2 = sum((x - q) ** 2 for x, q in zip(X, self.position))
        return self.mass * np.exp(-r2 / (2 * self.width ** 2)) / (2 * np.pi * self.width ** 2)


def _source_nodes(f1, grid):
    """(positions (k, 2), weights (k,), cell size) for a Field, grid array or PointSource."""
    if isinstance(f1, PointSource) and f1.width <= 0:
        return np.array([f1.position], dtype=float), np.array([f1.mass]), 0.0
    if isinstance(f1, PointSource):
        vals = f1.sample(grid)
    elif isinstance(f1, Field):
        grid, vals = f1.grid, f1.values
    else:
        vals = np.asarray(f1, dtype=float)
    if grid is None:
        raise ConfigError("a grid is needed to integrate against sampled data")
    X = grid.coords()
    keep = vals != 0
    pos = np.stack([x[keep] for x in X], -1)
    return pos, vals[keep] * grid.cell_volume, float(np.sqrt(grid.cell_volume))


def _log_half(r, cell):
    """ln(r/2), with distances inside half a cell replaced by the cell-averaged value."""
    r = np.asarray(r, dtype=float)
    if cell > 0:
        near = r < 0.5 * cell
        safe = np.where(near, 1.0, r)
        return np.where(near, np.log(cell) + CELL_LOG_OFFSET - np.log(2), np.log(safe / 2))
    if np.any(r == 0):
        raise NumericalFailure("receiver coincides with a point source")
    return np.log(r / 2)


def compute_g0(f1, x, p: float, grid: TorusGrid | None = None) -> complex:
    """Truncated small-p expansion of the d = 1 response divided by ln p.

    -(1/2 pi) int [1/2 + gamma/ln p + ln(|x-r|/2)/ln p + p|x-r|^2/8
                   + p|x-r|^2 ln(|x-r|/2)/(4 ln p) + (gamma - 1) p |x-r|^2/(4 ln p)] f1(r) dr
    """
    _check_p(p)
    pos, w, cell = _source_nodes(f1, grid)
    if len(w) == 0:
        return 0.0
    r = np.hypot(*(pos - np.asarray(x, dtype=float)).T)
    lp = np.log(p)
    L = _log_half(r, cell)
    r2 = r ** 2
    bracket = 0.5 + GAMMA / lp + L / lp + p * r2 / 8 + p * r2 * L / (4 * lp) + (GAMMA - 1) * p * r2 / (4 * lp)
    return float(-np.sum(bracket * w) / (2 * np.pi))


def compute_g(f1, x, p: float, grid: TorusGrid | None = None) -> float:
    """Exact d = 1 response divided by ln p: (1/ln p) int K0(sqrt(p)|x-r|)/(2 pi) f1(r) dr."""
    _check_p(p)
    pos, w, cell = _source_nodes(f1, grid)
    if len(w) == 0:
        return 0.0
    r = np.hypot(*(pos - np.asarray(x, dtype=float)).T)
    sp = np.sqrt(p)
    if cell > 0:
        near = r < 0.5 * cell
        avg = -(0.5 * np.log(p) + np.log(cell) + CELL_LOG_OFFSET - np.log(2)) - GAMMA
        G = np.where(near, avg, k0(sp * np.where(near, 1.0, r)))
    else:
        if np.any(r == 0):
            raise NumericalFailure("receiver coincides with a point source")
        G = k0(sp * r)
    return float(np.sum(G * w) / (2 * np.pi) / np.log(p))


def _check_p(p):
    if not (0 < p < P_MAX):
        raise ConfigError(f"p must lie in (0, exp(-2 gamma)) = (0, {P_MAX:.6f}), got {p}")


def expansion_denominator(p: float, gamma: float = GAMMA) -> float:
    lp = np.log(p)
    return (p * lp / (4 * np.pi ** 2)) * (0.5 + gamma / lp) ** 2


def compute_h(u_tilde, g, p: float, gamma: float = GAMMA):
    """h = (u~/ln p - g) / [(p ln p / 4 pi^2)(1/2 + gamma/ln p)^2]."""
    _check_p(p)
    D = expansion_denominator(p, gamma)
    if abs(D) < 1e-300:
        raise NumericalFailure("expansion denominator vanishes", p=p)
    return (np.asarray(u_tilde) / np.log(p) - np.asarray(g)) / D


# asymptotic coefficients


@dataclass
class LaplaceProfile:
    p_values: np.ndarray
    u_tilde: np.ndarray  # (n_p, n_receivers)
    g: np.ndarray  # comparison profile, same shape
    h_values: np.ndarray
    gamma: float = GAMMA
    comparison: str = "exact"

    def __post_init__(self):
        p = np.asarray(self.p_values, dtype=float)
        if np.any(p <= 0) or np.any(p >= P_MAX):
            raise ConfigError("p values must lie in (0, exp(-2 gamma))")
        if np.any(np.diff(p) >= 0):
            raise ConfigError("p values must be strictly decreasing")
        self.p_values = p


@dataclass
class AsymptoticCoefficients:
    H0: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    residual: np.ndarray
    flagged: np.ndarray
    tolerance: float


def expansion_variable(p, gamma: float = GAMMA):
    return 1.0 / (np.log(p) + 2 * gamma)


def extract_H(p_values, h, gamma: float = GAMMA, tolerance: float = 1e-2) -> AsymptoticCoefficients:
    """Per receiver least-squares fit h(p) = H0 + H1 s + H2 s^2, s = 1/(ln p + 2 gamma)."""
    p = np.asarray(p_values, dtype=float)
    h = np.asarray(h, dtype=float)
    if len(p) < 4:
        raise ConfigError("need at least four p values")
    if h.ndim == 1:
        h = h[:, None]
    s = expansion_variable(p, gamma)
    V = np.stack([np.ones_like(s), s, s * s], 1)
    sv = np.linalg.svd(V / np.linalg.norm(V, axis=0), compute_uv=False)
    if sv[-1] < 1e-10 * sv[0]:
        raise ConfigError("rank-deficient fit: p values too clustered", condition=float(sv[0] / sv[-1]))
    H, *_ = np.linalg.lstsq(V, h, rcond=None)
    norms = np.linalg.norm(h, axis=0)
    err = np.linalg.norm(V @ H - h, axis=0)
    res = np.where(norms > 0, err / np.where(norms > 0, norms, 1.0), 0.0)
    return AsymptoticCoefficients(H[0], H[1], H[2], res, res > tolerance, tolerance)


# Fredholm system


def gaussian_log(r, width: float):
    """Average of ln(|r - s|/2) over a Gaussian of standard deviation ``width`` centred at distance r."""
    r = np.asarray(r, dtype=float)
    if width <= 0:
        return np.log(r / 2)
    z = r ** 2 / (2 * width ** 2)
    small = z < 1e-12
    zs = np.where(small, 1.0, z)
    val = np.log(np.where(small, 1.0, r) / 2) + 0.5 * exp1(zs)
    # z -> 0 limit: ln(width) + (ln 2 - gamma)/2 - ln 2
    return np.where(small, np.log(width) + 0.5 * (np.log(2) - GAMMA) - np.log(2), val)


def disk_nodes(center, radius: float, spacing: float):
    """Lattice nodes of a given spacing inside a disk; returns (nodes, weights)."""
    c = np.asarray(center, dtype=float)
    n = int(np.floor(radius / spacing))
    ax = np.arange(-n, n + 1) * spacing
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    keep = X ** 2 + Y ** 2 < radius ** 2
    nodes = np.stack([X[keep] + c[0], Y[keep] + c[1]], -1)
    return nodes, np.full(len(nodes), spacing ** 2)


def ring_points(center, radius: float, count: int, phase: float = 0.0):
    a = phase + 2 * np.pi * np.arange(count) / count
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], -1)


@dataclass
class FredholmSystem:
    receivers: np.ndarray
    sources: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    A: np.ndarray
    pairs: list
    rhs: np.ndarray | None = None
    spacing: float | None = None

    def apply(self, m) -> np.ndarray:
        return self.A @ np.asarray(m, dtype=float)

    def with_rhs(self, rhs) -> "FredholmSystem":
        rhs = np.asarray(rhs, dtype=float).reshape(-1)
        if rhs.shape != (self.A.shape[0],):
            raise ConfigError("rhs length does not match the number of (receiver, source) pairs")
        return FredholmSystem(self.receivers, self.sources, self.nodes, self.weights, self.A, self.pairs, rhs,
                              self.spacing)


def assemble_fredholm(receivers, sources, nodes, weights=None, widths=0.0, spacing: float | None = None,
                      rhs=None) -> FredholmSystem:
    """Rows (receiver i, source j), columns nodes k:

        A[(i,j), k] = 4 ln(|x_i - r_k|/2) l_j(r_k) weight_k

    with l_j the log potential of source j (exact Gaussian average for a
    positive width). Receiver-node distances below half a cell use the
    cell-averaged logarithm.
    """
    X = np.atleast_2d(np.asarray(receivers, dtype=float))
    Q = np.atleast_2d(np.asarray(sources, dtype=float))
    R = np.atleast_2d(np.asarray(nodes, dtype=float))
    if weights is None:
        if spacing is None:
            raise ConfigError("give node weights or a lattice spacing")
        weights = np.full(len(R), spacing ** 2)
    w = np.asarray(weights, dtype=float)
    cell = float(spacing) if spacing is not None else float(np.sqrt(np.median(w)))
    widths = np.broadcast_to(np.asarray(widths, dtype=float), (len(Q),))
    dx = np.hypot(*(X[:, None, :] - R[None, :, :]).transpose(2, 0, 1))
    lx = _log_half(dx, cell)
    lq = []
    for q, s in zip(Q, widths):
        dq = np.hypot(*(R - q).T)
        if s > 0:
            lq.append(gaussian_log(dq, s))
        else:
            lq.append(_log_half(dq, cell))
    lq = np.array(lq)
    A = 4 * (lx[:, None, :] * lq[None, :, :] * w).reshape(len(X) * len(Q), len(R))
    if not np.all(np.isfinite(A)):
        raise NumericalFailure("non-finite Fredholm entries")
    pairs = [(i, j) for i in range(len(X)) for j in range(len(Q))]
    sys_ = FredholmSystem(X, Q, R, w, A, pairs, None, cell)
    return sys_.with_rhs(rhs) if rhs is not None else sys_


def gradient_operator(nodes, spacing: float) -> np.ndarray:
    """Forward differences on every lattice edge touching the node set; m = 0 off the set."""
    R = np.asarray(nodes, dtype=float)
    lat = np.round((R - R.min(0)) / spacing).astype(int)
    key = {tuple(v): k for k, v in enumerate(lat)}
    rows = []
    for k, base in enumerate(lat):
        for a in range(R.shape[1]):
            e = np.zeros_like(base)
            e[a] = 1
            fwd = key.get(tuple(base + e))
            row = np.zeros(len(R))
            row[k] -= 1 / spacing
            if fwd is not None:
                row[fwd] += 1 / spacing
            rows.append(row)
            if tuple(base - e) not in key:
                row = np.zeros(len(R))
                row[k] = 1 / spacing
                rows.append(row)
    return np.array(rows)


@dataclass
class TikhonovResult:
    m: np.ndarray
    d: np.ndarray
    alpha: float
    residual: float
    penalty: float
    sweep: list = field(default_factory=list)  # dicts: alpha, residual, penalty, norm


def _tikhonov(A, b, L, alpha):
    M = A.T @ A + alpha * (L.T @ L)
    return np.linalg.solve(M, A.T @ b)


def default_alphas(system: FredholmSystem, L, count: int = 41):
    scale = np.linalg.norm(system.A, 2) ** 2 / max(np.linalg.norm(L, 2) ** 2, 1e-300)
    return scale * np.geomspace(1e-14, 1e0, count)


def lcurve_corner(residuals, penalties) -> int:
    """Index of maximum curvature of the (log residual, log penalty) curve."""
    x = np.log(np.maximum(np.asarray(residuals), 1e-300))
    y = np.log(np.maximum(np.asarray(penalties), 1e-300))
    dx, dy = np.gradient(x), np.gradient(y)
    ddx, ddy = np.gradient(dx), np.gradient(dy)
    kappa = (dx * ddy - dy * ddx) / np.maximum((dx * dx + dy * dy) ** 1.5, 1e-300)
    kappa[[0, -1]] = -np.inf
    return int(np.argmax(kappa))


def solve_tikhonov(system: FredholmSystem, alpha: float | None = None, alphas=None, L=None) -> TikhonovResult:
    """min |A m - rhs|^2 + alpha |L m|^2 with L the Dirichlet lattice gradient.

    ``alpha=None`` picks the L-curve corner of the sweep; the sweep table is
    returned either way.
    """
    if system.rhs is None:
        raise ConfigError("system has no right-hand side")
    if alpha is not None and not alpha > 0:
        raise ConfigError("alpha must be positive")
    A, b = system.A, system.rhs
    if L is None:
        L = gradient_operator(system.nodes, system.spacing)
    grid_alphas = np.asarray(alphas if alphas is not None else default_alphas(system, L), dtype=float)
    sweep = []
    sols = []
    for a in grid_alphas:
        m = _tikhonov(A, b, L, a)
        sols.append(m)
        sweep.append({"alpha": float(a), "residual": float(np.linalg.norm(A @ m - b)),
                      "penalty": float(np.linalg.norm(L @ m)), "norm": float(np.linalg.norm(m))})
    if alpha is None:
        k = lcurve_corner([s["residual"] for s in sweep], [s["penalty"] for s in sweep])
        alpha, m = float(grid_alphas[k]), sols[k]
    else:
        m = _tikhonov(A, b, L, alpha)
    bad = np.nonzero(m >= 1)[0]
    if len(bad):
        raise NonphysicalDiffusion("recovered m >= 1 (nonphysical diffusion) at nodes " + str(bad.tolist()),
                                   stage="solve_tikhonov", nodes=bad, positions=system.nodes[bad])
    return TikhonovResult(m, 1 / (1 - m), float(alpha), float(np.linalg.norm(A @ m - b)),
                          float(np.linalg.norm(L @ m)), sweep)


# orchestration


@dataclass
class DiffusionConfig:
    p_values: tuple = DEFAULT_P_LADDER
    tail: str = "log_algebraic"
    comparison: str = "exact"  # or "g0"
    center: tuple = (0.0, 0.0)
    region_radius: float = 0.14
    node_spacing: float | None = None  # default five grid cells
    alpha: float | None = None
    fit_tolerance: float = 1e-2

    def __post_init__(self):
        p = np.asarray(self.p_values, dtype=float)
        if len(p) < 4 or np.any(p <= 0) or np.any(p >= P_MAX) or np.any(np.diff(p) >= 0):
            raise ConfigError("p ladder needs >= 4 strictly decreasing values in (0, exp(-2 gamma))")
        if self.comparison not in ("exact", "g0"):
            raise ConfigError(f"unknown comparison profile {self.comparison!r}")
        if self.region_radius <= 0:
            raise ConfigError("region radius must be positive")


@dataclass
class InversionReport:
    species: int
    receivers: np.ndarray
    sources: list
    profiles: list  # LaplaceProfile per source
    coefficients: list  # AsymptoticCoefficients per source
    system: FredholmSystem
    solution: TikhonovResult
    d_field: Field
    tail_residuals: list
    provenance: list
    forward_residual: float | None = None
    stage_residuals: dict = field(default_factory=dict)


def reference_series(grid: TorusGrid, f1, times, mask) -> np.ndarray:
    """d = 1 heat flow of f1 sampled at the masked nodes."""
    vals = np.asarray(f1.values if isinstance(f1, Field) else f1, dtype=float)
    ch = grid.fft(vals)
    out = np.empty((len(times), int(np.sum(mask))))
    for k, t in enumerate(times):
        out[k] = grid.ifft(ch * np.exp(-grid.k_squared * t), real=True)[mask]
    return out


def _staged(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except AggrekitError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise


def _species_series(ms: MeasurementSet, species):
    v = np.asarray(ms.values)
    if v.ndim == 2:
        if species not in (None, 0):
            raise ConfigError("measurement has a single species")
        return v
    if species is None:
        raise ConfigError("measurement carries several species; choose one")
    return v[:, species, :]


def laplace_profile(ms: MeasurementSet, source: PointSource, cfg: DiffusionConfig, species=None):
    """Transform one source's series into h over the p ladder; returns (profile, tail fit)."""
    grid = ms.grid
    X = grid.coords()
    receivers = np.stack([x[ms.mask] for x in X], -1)
    series = _species_series(ms, species)
    f1 = source.sample(grid)
    w = series - reference_series(grid, f1, ms.times, ms.mask)
    fit = _staged("laplace_transform", fit_tail, ms.times, w, cfg.tail)
    p = np.asarray(cfg.p_values)
    w_tilde = np.array([laplace_transform(ms.times, w, pk, fit) for pk in p])
    g_exact = np.array([[compute_g(f1, x, pk, grid) for x in receivers] for pk in p])
    u_tilde = w_tilde + np.log(p)[:, None] * g_exact
    if cfg.comparison == "exact":
        g = g_exact
    else:
        g = np.array([[compute_g0(f1, x, pk, grid) for x in receivers] for pk in p])
    h = np.array([compute_h(u_tilde[k], g[k], pk) for k, pk in enumerate(p)])
    return LaplaceProfile(p, u_tilde, g, h, GAMMA, cfg.comparison), fit, receivers


def invert_diffusion(measurements, sources, config: DiffusionConfig | None = None, species=None,
                     true_d=None) -> InversionReport:
    """Full pipeline over all sources for one species.

    ``measurements`` holds one MeasurementSet per source (every step of the
    series at the receiver nodes). ``true_d`` (a Field), when given, adds the
    forward-consistency residual |A m_true - H2| / |H2| on the grid nodes of the region.
    """
    cfg = config or DiffusionConfig()
    if len(measurements) != len(sources) or not sources:
        raise ConfigError("need one measurement set per source")
    grid = measurements[0].grid
    if grid.ndim != 2:
        raise ConfigError("diffusion recovery is available for two space dimensions only")
    profiles, coefs, tails, prov = [], [], [], []
    receivers = None
    for j, (ms, src) in enumerate(zip(measurements, sources)):
        if ms.grid != grid:
            raise ConfigError("all measurement sets must share one grid")
        prof, fit, rec = laplace_profile(ms, src, cfg, species)
        if receivers is None:
            receivers = rec
        elif rec.shape != receivers.shape or np.any(rec != receivers):
            raise ConfigError("all sources must use the same receivers")
        profiles.append(prof)
        tails.append(fit.residual)
        coefs.append(_staged("extract_H", extract_H, prof.p_values, prof.h_values, GAMMA, cfg.fit_tolerance))
        prov.append({"source": j, "species": species if species is not None else 0,
                     "position": list(map(float, src.position))})
    H2 = np.stack([c.H2 for c in coefs], 1).reshape(-1)  # (receiver, source) row order
    spacing = cfg.node_spacing or 5 * min(grid.spacing)
    nodes, weights = disk_nodes(cfg.center, cfg.region_radius, spacing)
    qs = np.array([s.position for s in sources], dtype=float)
    widths = [s.width for s in sources]
    system = _staged("assemble_fredholm", assemble_fredholm, receivers, qs, nodes, weights, widths, spacing, H2)
    sol = _staged("solve_tikhonov", solve_tikhonov, system, cfg.alpha)
    d_field = Field(grid, _nodes_to_grid(grid, nodes, spacing, sol.d))
    report = InversionReport(species if species is not None else 0, receivers, list(sources), profiles, coefs,
                             system, sol, d_field, tails, prov)
    report.stage_residuals = {
        "tail_fit_max": float(max(tails)),
        "coefficient_fit_max": float(max(float(np.max(c.residual)) for c in coefs)),
        "tikhonov_relative": float(sol.residual / max(np.linalg.norm(H2), 1e-300)),
    }
    if true_d is not None:
        report.forward_residual = forward_consistency(grid, true_d, receivers, qs, widths, H2, cfg)
        report.stage_residuals["forward_consistency"] = report.forward_residual
    return report


def region_mask(grid: TorusGrid, center, radius: float) -> np.ndarray:
    X = grid.coords()
    return sum((x - c) ** 2 for x, c in zip(X, center)) < radius ** 2


def forward_consistency(grid, true_d, receivers, sources, widths, H2, cfg: DiffusionConfig) -> float:
    """Relative l2 mismatch between H2 and the fine-grid operator applied to m = 1 - 1/d."""
    d = np.asarray(true_d.values if isinstance(true_d, Field) else true_d, dtype=float)
    m = 1 - 1 / d
    mask = region_mask(grid, cfg.center, cfg.region_radius * 1.5) & (m != 0)
    if not mask.any():
        return float(np.linalg.norm(H2) > 0)
    X = grid.coords()
    nodes = np.stack([x[mask] for x in X], -1)
    h = min(grid.spacing)
    sys_ = assemble_fredholm(receivers, sources, nodes, np.full(len(nodes), grid.cell_volume), widths, h)
    pred = sys_.apply(m[mask])
    return float(np.linalg.norm(pred - H2) / max(np.linalg.norm(H2), 1e-300))


def _nodes_to_grid(grid, nodes, spacing, values):
    """Bilinear interpolation of lattice node values onto grid nodes; 1 outside the lattice."""
    out = np.ones(grid.shape)
    origin = nodes.min(0)
    key = {tuple(np.round((r - origin) / spacing).astype(int)): v for r, v in zip(nodes, values)}
    X = grid.coords()
    lo = nodes.min(0) - spacing
    hi = nodes.max(0) + spacing
    box = (X[0] >= lo[0]) & (X[0] <= hi[0]) & (X[1] >= lo[1]) & (X[1] <= hi[1])
    for idx in zip(*np.nonzero(box)):
        x = (np.array([X[0][idx], X[1][idx]]) - origin) / spacing
        b = np.floor(x).astype(int)
        t = x - b
        acc = 0.0
        for ox in (0, 1):
            for oy in (0, 1):
                wgt = (t[0] if ox else 1 - t[0]) * (t[1] if oy else 1 - t[1])
                mval = 1 - 1 / key[(b[0] + ox, b[1] + oy)] if (b[0] + ox, b[1] + oy) in key else 0.0
                acc += wgt * mval
        out[idx] = 1 / (1 - acc)
    return out


def simulate_measurements(grid: TorusGrid, d, sources, receivers_mask, T: float, dt: float) -> list:
    """One first-order run per source, recorded at the receivers every step."""
    out = []
    for src in sources:
        rec = SeriesRecorder(receivers_mask)
        simulate_variable_heat(grid, d, src.sample(grid), T, dt, times=[T], observer=rec)
        t, v = rec.series()
        out.append(MeasurementSet(grid, receivers_mask, t, v, None, T))
    return out
