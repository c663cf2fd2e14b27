"""Recovery of interaction matrices and kernels from second-variation data.

A probe prescribes the first variation of one or two species. For complex
plane waves uI_a = exp(i xi_a.x) exp(lam_a t), lam_a = -d_a |xi_a|^2, the
second-variation source of species i is

    S_i = 2 sum_j c_ij div( uI_i * drift_ij(uI_j) ),

a sum of single Fourier modes at xi_i + xi_j with time profile
exp((lam_i + lam_j) t). Deconvolving the terminal snapshot mode by mode gives
S_i at each target mode; dividing by the unit-coefficient reference gives the
coupling c_ij (mu or nu), or, with the coupling known, the kernel transform.

Real probes 1 + a cos(xi.x) (used with the nonlinear solver) carry the same
target modes scaled by a_i a_j / 4.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonDivergenceSource, NonIdentifiable
from .forward import ModelOperator, ModelParams, Trajectory
from .torus import Field, TorusGrid
from .variations import HeatFlow, VariationInput, extract_variations, solve_second_variation


@dataclass(frozen=True)
class Pattern:
    kind: str  # "constant_one", "plane_wave" or "wave_pair"
    index: tuple = ()
    amplitude: float = 1.0
    partner: tuple = ()  # second frequency of a wave pair

    @staticmethod
    def constant_one() -> "Pattern":
        return Pattern("constant_one")

    @staticmethod
    def plane_wave(index, amplitude: float = 1.0) -> "Pattern":
        return Pattern("plane_wave", tuple(int(i) for i in np.atleast_1d(index)), float(amplitude))

    @staticmethod
    def wave_pair(index, partner, amplitude: float = 1.0) -> "Pattern":
        """exp(i eta.x) + exp(i zeta.x) in a single species."""
        return Pattern("wave_pair", tuple(int(i) for i in np.atleast_1d(index)), float(amplitude),
                       tuple(int(i) for i in np.atleast_1d(partner)))

    def label(self) -> str:
        if self.kind == "constant_one":
            return "1"
        if self.kind == "wave_pair":
            return f"pw{self.index}+pw{self.partner}"
        return f"pw{self.index}"


def _pad(index, ndim) -> np.ndarray:
    return np.array((list(index) + [0] * ndim)[:ndim], dtype=int)


@dataclass(frozen=True)
class ProbeSpec:
    """First-order patterns for one or two active species: ((species, Pattern), ...)."""

    patterns: tuple

    def __post_init__(self):
        pats = tuple((int(s), p) for s, p in self.patterns)
        if not 1 <= len(pats) <= 2:
            raise ConfigError("a probe activates one or two species")
        if len({s for s, _ in pats}) != len(pats):
            raise ConfigError("species listed twice in a probe")
        for _, p in pats:
            if p.kind not in ("plane_wave", "constant_one", "wave_pair"):
                raise ConfigError(f"unknown probe pattern {p.kind!r}")
            if p.kind != "constant_one" and not any(p.index):
                raise ConfigError("plane-wave probes need a nonzero lattice frequency")
            if p.kind == "wave_pair":
                if len(pats) != 1:
                    raise ConfigError("wave-pair patterns are single-species probes")
                if not any(p.partner) or tuple(p.partner) == tuple(p.index):
                    raise ConfigError("wave-pair frequencies must be nonzero and distinct")
        object.__setattr__(self, "patterns", pats)

    @property
    def species(self) -> tuple:
        return tuple(s for s, _ in self.patterns)

    def pattern(self, i) -> Pattern | None:
        for s, p in self.patterns:
            if s == i:
                return p
        return None

    def label(self) -> str:
        return "probe[" + ",".join(f"s{s}:{p.label()}" for s, p in self.patterns) + "]"

    def index(self, i, ndim) -> np.ndarray:
        p = self.pattern(i)
        if p is None or p.kind == "constant_one":
            return np.zeros(ndim, dtype=int)
        return _pad(p.index, ndim)

    def _waves(self, i, ndim) -> list:
        p = self.pattern(i)
        if p is None or p.kind == "constant_one":
            return []
        out = [_pad(p.index, ndim)]
        if p.kind == "wave_pair":
            out.append(_pad(p.partner, ndim))
        return out

    def rate(self, i, grid: TorusGrid, d) -> float:
        xi = grid.frequency(self.index(i, grid.ndim))
        return -float(np.atleast_1d(d)[i]) * float(xi @ xi)

    def target_rate(self, i, j, grid: TorusGrid, d) -> float:
        """Growth rate of the product term feeding target(i, j)."""
        p = self.pattern(i)
        if i == j and p is not None and p.kind == "wave_pair":
            zeta = grid.frequency(_pad(p.partner, grid.ndim))
            return self.rate(i, grid, d) - float(np.atleast_1d(d)[i]) * float(zeta @ zeta)
        return self.rate(i, grid, d) + self.rate(j, grid, d)

    def initial_data(self, grid: TorusGrid, n_species: int, form: str = "complex") -> np.ndarray:
        """Complex form: sum of exp(i xi.x) (or 1); raised form: 1 + a sum cos(xi.x) (or 1)."""
        X = grid.coords()
        out = np.zeros((n_species,) + grid.shape, dtype=complex if form == "complex" else float)
        for s, p in self.patterns:
            if s >= n_species:
                raise ConfigError(f"probe species {s} out of range")
            if p.kind == "constant_one":
                out[s] = 1.0
                continue
            phases = [sum(k * x for k, x in zip(grid.frequency(w), X)) for w in self._waves(s, grid.ndim)]
            if form == "complex":
                out[s] = p.amplitude * sum(np.exp(1j * ph) for ph in phases)
            elif form == "raised":
                if p.amplitude * len(phases) > 1:
                    raise ConfigError("raised-cosine amplitudes must sum to <= 1 to keep f1 >= 0")
                out[s] = 1.0 + p.amplitude * sum(np.cos(ph) for ph in phases)
            else:
                raise ConfigError(f"unknown probe form {form!r}")
        return out

    def readings(self) -> list:
        """(species i, partner j) pairs readable from this probe."""
        return [(i, j) for i in self.species for j in self.species]

    def target(self, i, j, ndim) -> np.ndarray:
        p = self.pattern(i)
        if i == j and p is not None and p.kind == "wave_pair":
            return _pad(p.index, ndim) + _pad(p.partner, ndim)
        return self.index(i, ndim) + self.index(j, ndim)

    def _components(self, s, ndim, form) -> list:
        """(frequency, tag) terms of the first variation of species s."""
        p = self.pattern(s)
        if p.kind == "constant_one":
            return [(np.zeros(ndim, dtype=int), "a")]
        waves = self._waves(s, ndim)
        out = [(w, t) for w, t in zip(waves, "ab")]
        if form == "raised":
            out += [(-w, t + "-") for w, t in zip(waves, "ab")]
            out.append((np.zeros(ndim, dtype=int), "1"))
        return out

    def check_collisions(self, grid: TorusGrid, form: str) -> None:
        """Reject probes whose target modes also receive an unintended product term."""
        nd = grid.ndim
        for i in self.species:
            if self.pattern(i).kind == "constant_one":
                continue
            terms = [(grid.mode_index(ci + cb), (ti, b, tb))
                     for b in self.species
                     for ci, ti in self._components(i, nd, form)
                     for cb, tb in self._components(b, nd, form)]
            for j in self.species:
                if i == j and self.pattern(i).kind == "wave_pair":
                    wanted = {("a", i, "b"), ("b", i, "a")}
                else:
                    wanted = {("a", j, "a")}
                t = grid.mode_index(self.target(i, j, nd))
                if not any(D.reshape(-1)[t[a]] for a, D in enumerate(grid.derivative_symbols)):
                    continue  # divergence removes this mode, nothing is read there
                if any(m == t and key not in wanted for m, key in terms):
                    raise ConfigError(f"frequency collision in {self.label()} for species {i}, partner {j}")


def diagonal_probe(i, index, amplitude=1.0) -> ProbeSpec:
    return ProbeSpec(((i, Pattern.plane_wave(index, amplitude)),))


def pair_probe(i, j, index_i, index_j, amp_i=1.0, amp_j=1.0) -> ProbeSpec:
    return ProbeSpec(((i, Pattern.plane_wave(index_i, amp_i)), (j, Pattern.plane_wave(index_j, amp_j))))


def default_schedule(n_species: int, ndim: int, base=None, amplitude: float = 1.0, form: str = "complex") -> list:
    """Single-species probes at ``base`` plus one pair probe per species pair.

    Complex pairs put i at 2*base and j at base. In raised form the constant
    background of i would also read j's wave at 2*base, so i stays at base and
    j moves to the perpendicular of base (2D) or to 4*base (1D).
    """
    base = np.array((list(np.atleast_1d(base if base is not None else 1)) + [0] * ndim)[:ndim], dtype=int)
    probes = [diagonal_probe(i, base, amplitude) for i in range(n_species)]
    if form == "raised":
        other = np.array([-base[1], base[0]]) if ndim == 2 else 4 * base
        pair = (base, other)
    else:
        pair = (2 * base, base)
    for i, j in itertools.combinations(range(n_species), 2):
        probes.append(pair_probe(i, j, *pair, amplitude, amplitude))
    return probes


def constant_schedule(n_species: int) -> list:
    """Constant first variations non-trivial for one species (or a pair) at a time."""
    probes = [ProbeSpec(((i, Pattern.constant_one()),)) for i in range(n_species)]
    for i, j in itertools.combinations(range(n_species), 2):
        probes.append(ProbeSpec(((i, Pattern.constant_one()), (j, Pattern.constant_one()))))
    return probes


@dataclass
class ProbeRecord:
    probe: ProbeSpec
    form: str
    T: float
    uII: np.ndarray  # (N,) + grid at time T
    d: np.ndarray


def run_probes(params: ModelParams, grid: TorusGrid, probes, T: float, dt: float, form: str = "complex",
               epsilons=None, batch: int = 256) -> list:
    """Generate terminal second-variation data for each probe (f2 = 0).

    ``complex`` uses the direct second-variation solver; ``raised`` extracts
    uII from nonlinear solves over the epsilon ladder.
    """
    out = []
    n = params.n_species
    for p in probes:
        p.check_collisions(grid, form)
    for start in range(0, len(probes), batch):
        chunk = probes[start:start + batch]
        f1 = np.stack([p.initial_data(grid, n, form) for p in chunk])
        if form == "complex":
            flow = HeatFlow(grid, params.d, f1)
            tr = solve_second_variation(params, grid, flow, np.zeros(f1.shape), T, dt)
            uT = tr.states[-1]
        else:
            kw = {} if epsilons is None else {"epsilons": tuple(epsilons)}
            vp = extract_variations(params, grid, VariationInput(f1, np.zeros(f1.shape), **kw), T, dt)
            uT = vp.uII.states[-1]
        for p, u in zip(chunk, uT):
            out.append(ProbeRecord(p, form, T, u, np.array(params.d)))
    return out


# deconvolution


def mode_transfer(a, rho, T):
    """int_0^T exp(-a (T - s)) exp(rho s) ds, stable near rho = -a."""
    a = np.asarray(a, dtype=float)
    rho = np.asarray(rho, dtype=float)
    z = (rho + a) * T
    small = np.abs(z) < 1e-8
    zs = np.where(small, 1.0, z)
    ratio = np.where(small, 1.0 + z / 2, np.expm1(zs) / zs)
    return np.exp(-a * T) * T * ratio


def _unrecoverable(a, F, T, tol):
    """Modes with no time to develop (|1 - exp(-aT)| < tol) or an underflowed transfer factor."""
    a = np.asarray(a, dtype=float)
    return (np.abs(np.expm1(-a * T)) < tol) | ~(np.abs(F) > 1e-290)


@dataclass
class SourceField:
    coefficients: np.ndarray
    grid: TorusGrid
    profile: str
    rate: object
    unrecoverable: np.ndarray

    @property
    def field(self) -> Field:
        vals = self.grid.ifft(self.coefficients)
        return Field(self.grid, vals)


def deconvolve_source(uII, d: float, T: float, grid: TorusGrid | None = None, rate=0.0,
                      mean_tol: float = 1e-10, flag_tol: float = 1e-12) -> SourceField:
    """Per-mode inversion of duII/dt = d lap uII + S(x) exp(rate t), uII(0) = 0."""
    if isinstance(uII, Trajectory):
        grid = uII.grid
        uII = uII.states[-1]
    if isinstance(uII, Field):
        grid = uII.grid
        uII = uII.values
    if d <= 0 or T <= 0:
        raise ConfigError("need d > 0 and T > 0")
    c = grid.fft(np.asarray(uII))
    scale = float(np.max(np.abs(c))) if c.size else 0.0
    zero = (0,) * grid.ndim
    if abs(c[(...,) + zero]).max() > mean_tol * max(scale, 1e-300) and scale > 0:
        raise NonDivergenceSource("zero mode of uII is not negligible; source is not a divergence",
                                  stage="deconvolve_source", zero_mode=float(abs(c[(...,) + zero]).max()))
    a = d * grid.k_squared
    rho = np.broadcast_to(np.asarray(rate, dtype=float), grid.shape)
    F = mode_transfer(a, rho, T)
    bad = _unrecoverable(a, F, T, flag_tol)
    bad[zero] = True
    S = np.where(bad, 0.0, c / np.where(bad, 1.0, F))
    return SourceField(S, grid, "constant" if np.all(rho == 0) else "exp", rate, bad)


def measured_mode(record: ProbeRecord, grid: TorusGrid, i: int, target) -> complex:
    """Deconvolved source coefficient of species i at a lattice target mode."""
    idx = grid.mode_index(target)
    xi = grid.wavenumbers
    k2 = sum(float(k.reshape(-1)[m]) ** 2 for k, m in zip(xi, idx))
    d_i = float(record.d[i])
    partners = [j for j in record.probe.species if np.array_equal(
        grid.mode_index(record.probe.target(i, j, grid.ndim)), idx)]
    j = partners[0]
    rate = record.probe.target_rate(i, j, grid, record.d)
    F = float(mode_transfer(d_i * k2, rate, record.T))
    if _unrecoverable(d_i * k2, F, record.T, 1e-12):
        raise NonIdentifiable("target mode is not recoverable from the terminal snapshot", stage="deconvolve")
    return complex(grid.fft(record.uII[i])[idx]) / F


def reference_mode(params: ModelParams, grid: TorusGrid, probe: ProbeSpec, i: int, j: int, form: str) -> complex:
    """Target-mode source coefficient for unit coupling c_ij and the known kernel."""
    n = params.n_species
    unit = np.zeros((n, n))
    unit[i, j] = 1.0
    op = ModelOperator(params.with_coupling(unit), grid)
    phi = probe.initial_data(grid, n, "complex")
    for s, p in probe.patterns:
        if p.kind != "constant_one":
            phi[s] /= p.amplitude
    R = 2.0 * op.bilinear(phi, phi)[i]
    target = grid.mode_index(probe.target(i, j, grid.ndim))
    value = complex(grid.fft(R)[target])
    pi, pj = probe.pattern(i), probe.pattern(j)
    amp = pi.amplitude * (pj.amplitude if j != i else pi.amplitude)
    if form == "raised":
        amp = amp / 4.0
    # scale of the largest source this kernel could produce at the target, so a
    # kernel symbol vanishing at the probe frequency reads as zero
    C = op.C[i, j]
    xi_t = np.linalg.norm(grid.frequency(probe.target(i, j, grid.ndim)))
    ref_norm = float(grid.volume * max(xi_t, 1.0) * np.max(np.sqrt(np.sum(np.abs(C) ** 2, axis=0))))
    return value * amp, ref_norm


# coupling recovery


@dataclass
class EntryEstimate:
    value: float
    residual: float
    probes: list


@dataclass
class RecoveryReport:
    kind: str
    matrix: np.ndarray | None = None
    entries: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)
    w_table: dict = field(default_factory=dict)
    w_fields: dict = field(default_factory=dict)
    gaps: dict = field(default_factory=dict)
    probe_log: list = field(default_factory=list)
    truth: dict = field(default_factory=dict)


def _zero_message(params):
    if params.model == "M1":
        return "non-identifiable: zero normalization"
    return "non-identifiable at available frequencies"


def recover_coupling(records, params: ModelParams, grid: TorusGrid, rel_tol: float = 1e-10) -> RecoveryReport:
    """Sequential recovery: diagonal entries from single-species probes, then
    off-diagonal entries with the recovered diagonal contribution removed."""
    n = params.n_species
    est = np.full((n, n), np.nan)
    entries = {}
    log = []
    for rec in records:
        log.append(rec.probe.label())
        if any(p.kind == "constant_one" for _, p in rec.probe.patterns):
            _constant_probe_check(rec, params, grid)
    singles = [r for r in records if len(r.probe.species) == 1]
    pairs = [r for r in records if len(r.probe.species) == 2]
    for rec in singles:
        (i,) = rec.probe.species
        if not np.isnan(est[i, i]):
            continue
        val, res = _project(rec, params, grid, i, i, rel_tol)
        if val is None:
            continue
        est[i, i] = val
        entries[(i, i)] = EntryEstimate(val, res, [rec.probe.label()])
    for rec in pairs:
        a, b = rec.probe.species
        for i, j in ((a, b), (b, a)):
            if not np.isnan(est[i, j]):
                continue
            val, res = _project(rec, params, grid, i, j, rel_tol)
            if val is None:
                continue
            est[i, j] = val
            src = entries.get((i, i))
            entries[(i, j)] = EntryEstimate(val, res, [rec.probe.label()] + (src.probes if src else []))
    missing = [(i, j) for i in range(n) for j in range(n) if np.isnan(est[i, j])]
    if missing:
        raise NonIdentifiable(_zero_message(params) + f"; entries {missing} have no informative probe",
                              stage="recover_coupling", entries=missing)
    kind = "mu" if params.model == "M1" else "nu"
    return RecoveryReport(kind, est, entries, probe_log=log)


def _constant_probe_check(rec, params, grid):
    for i, j in rec.probe.readings():
        unit = np.zeros((params.n_species,) * 2)
        unit[i, j] = 1.0
        op = ModelOperator(params.with_coupling(unit), grid)
        phi = rec.probe.initial_data(grid, params.n_species, "complex")
        R = op.bilinear(phi, phi)[i]
        if np.max(np.abs(R)) <= 1e-12 * max(1.0, np.max(np.abs(phi))):
            raise NonIdentifiable(_zero_message(params) + f" (reference source for entry ({i},{j}) "
                                  f"vanishes under {rec.probe.label()})", stage="recover_coupling",
                                  entry=[i, j])


def _project(rec, params, grid, i, j, rel_tol):
    """Coupling c_ij from the target mode xi_i + xi_j of species i.

    Each entry owns its own target mode, so the diagonal contribution already
    recovered lives on a different mode and drops out of the projection.
    """
    R, norm = reference_mode(params, grid, rec.probe, i, j, rec.form)
    if norm == 0 or abs(R) <= rel_tol * norm:
        return None, None
    m = measured_mode(rec, grid, i, rec.probe.target(i, j, grid.ndim))
    val = float(np.real(np.conj(R) * m) / abs(R) ** 2)
    res = float(abs(m - val * R) / max(abs(m), 1e-300))
    return val, res


def recover_coupling_joint(records, params: ModelParams, grid: TorusGrid, entry) -> float:
    """One-shot least squares for (c_ii, c_ij) over every mode that carries either entry."""
    i, j = entry
    A, y = [], []
    for rec in records:
        sp = rec.probe.species
        if i not in sp:
            continue
        for jj in sp:
            if jj not in (i, j):
                continue
            R, nrm = reference_mode(params, grid, rec.probe, i, jj, rec.form)
            row = [R if jj == i else 0.0, R if jj == j and j != i else 0.0]
            A.append(row)
            y.append(measured_mode(rec, grid, i, rec.probe.target(i, jj, grid.ndim)))
    A = np.array(A, dtype=complex)
    y = np.array(y, dtype=complex)
    Ar = np.vstack([A.real, A.imag])
    yr = np.concatenate([y.real, y.imag])
    sol, *_ = np.linalg.lstsq(Ar, yr, rcond=None)
    return float(sol[1] if j != i else sol[0])


def recover_mu(records, params: ModelParams, grid: TorusGrid) -> RecoveryReport:
    if params.model != "M1":
        raise ConfigError("recover_mu needs model M1 parameters (known kernels k)")
    return recover_coupling(records, params, grid)


def recover_nu(records, params: ModelParams, grid: TorusGrid) -> RecoveryReport:
    if params.model != "M2":
        raise ConfigError("recover_nu needs model M2 parameters (known kernels w)")
    return recover_coupling(records, params, grid)


# normalization constants of vector kernels


def normalization_constant(kernel, grid: TorusGrid, index=None) -> complex:
    """int_T div k(y) exp(-i xi.y) dy by node quadrature of the spectral divergence.

    ``index=None`` gives xi = 0, the plain torus integral of div k, which is
    zero for every periodic kernel.
    """
    vals = kernel.sample(grid) if hasattr(kernel, "sample") else np.asarray(kernel)
    div = grid.div(vals)
    X = grid.coords()
    xi = np.zeros(grid.ndim) if index is None else grid.frequency(index)
    phase = np.exp(-1j * sum(k * x for k, x in zip(xi, X)))
    return complex(np.sum(div * phase) * grid.cell_volume)


@dataclass
class NormalizationEstimate:
    value: complex
    index: tuple
    vanishing: bool
    probes: list


def recover_normalization(records, params: ModelParams, grid: TorusGrid, vanish_tol: float = 1e-10) -> dict:
    """Constants c_ij(xi) = i xi.khat_ij(xi) from the probe data with mu known.

    Plane-wave readings need the target xi_i + xi_j parallel to xi_j and
    unaliased. Constant probes return the xi = 0 constant, which the torus
    forces to vanish; it is reported and flagged.
    """
    if params.model != "M1":
        raise ConfigError("normalization constants belong to model M1 kernels")
    out = {}
    for rec in records:
        for i, j in rec.probe.readings():
            if (i, j) in out and not out[(i, j)].vanishing:
                continue
            mu = params.mu[i, j]
            if mu == 0:
                raise NonIdentifiable(f"non-identifiable: mu[{i},{j}] is zero", stage="recover_normalization",
                                      entry=[i, j])
            pi, pj = rec.probe.pattern(i), rec.probe.pattern(j)
            if pi.kind == "constant_one" or pj.kind == "constant_one":
                val = _constant_probe_constant(rec, grid, i)
                out[(i, j)] = NormalizationEstimate(val / mu, (0,) * grid.ndim, True, [rec.probe.label()])
                continue
            t = rec.probe.target(i, j, grid.ndim)
            xj = rec.probe.index(j, grid.ndim)
            if any(abs(int(c)) >= n // 2 for c, n in zip(t, grid.shape)):
                raise ConfigError(f"target mode {tuple(t)} is aliased; use a lower probe frequency")
            kt, kj = grid.frequency(t), grid.frequency(xj)
            if abs(abs(kt @ kj) - np.linalg.norm(kt) * np.linalg.norm(kj)) > 1e-12 * (kt @ kt + kj @ kj):
                raise ConfigError("normalization probes need xi_i parallel to xi_j")
            S = measured_mode(rec, grid, i, t)
            amp = pi.amplitude * (pj.amplitude if j != i else pi.amplitude)
            if rec.form == "raised":
                amp /= 4.0
            factor = 2.0 * mu * amp * (kt @ kj) / (kj @ kj)
            val = S / factor
            out[(i, j)] = NormalizationEstimate(val, tuple(int(c) for c in xj), abs(val) < vanish_tol,
                                                [rec.probe.label()])
    return out


def _constant_probe_constant(rec, grid, i) -> complex:
    """Source amplitude seen under constant probes: zero on the torus."""
    src = deconvolve_source(rec.uII[i], float(rec.d[i]), rec.T, grid, 0.0, mean_tol=1e-8)
    return complex(np.sum(np.abs(src.coefficients)) / grid.volume)


# kernel recovery


def lattice_indices(grid: TorusGrid, cutoff=None) -> list:
    """Half-lattice of nonzero integer indices with |m_a| <= cutoff_a (default N/2 - 2)."""
    cut = [n // 2 - 2 for n in grid.shape] if cutoff is None else list(np.broadcast_to(cutoff, (grid.ndim,)))
    rng = [range(-c, c + 1) for c in cut]
    out = []
    for m in itertools.product(*rng):
        if not any(m):
            continue
        first = next(v for v in m if v != 0)
        if first > 0:
            out.append(tuple(int(v) for v in m))
    return out


def _w_partner(grid, eta):
    """Species-i frequency for an off-diagonal kernel probe at eta."""
    nd = grid.ndim
    cands = []
    for m in itertools.product(range(-2, 3), repeat=nd):
        if any(m):
            cands.append(np.array(m))
    best, best_val = None, 0.0
    D = grid.derivative_symbols
    for c in cands:
        p = pair_probe(0, 1, c, eta)
        try:
            p.check_collisions(grid, "complex")
            p.check_collisions(grid, "raised")
        except ConfigError:
            continue
        t = grid.mode_index(c + eta)
        e = grid.mode_index(eta)
        val = abs(sum(complex(Da.reshape(-1)[t[a]]) * complex(Da.reshape(-1)[e[a]])
                      for a, Da in enumerate(D)))
        if val > best_val * (1 + 1e-12):
            best, best_val = c, val
    return best


def _self_partner(grid, eta):
    """zeta with D(eta + zeta).D(zeta) = 0, so the cross mode of a wave pair carries only what(eta)."""
    nd = grid.ndim
    cands = []
    for a in range(nd):
        c = np.zeros(nd, dtype=int)
        c[a] = -eta[a]
        cands.append(c)
    if nd == 2 and (eta[0] + eta[1]) % 2 == 0:
        h = eta // 2 if not np.any(eta % 2) else None
        for sgn in (1, -1):
            c = np.array([-eta[0] - sgn * eta[1], -eta[1] + sgn * eta[0]]) // 2
            cands.append(c)
        if h is not None:
            cands.append(-h)
    cands += [np.array(m) for m in itertools.product(range(-3, 4), repeat=nd)]
    scale = float(np.sum(eta ** 2) + 1) * (2 * np.pi) ** 2 / min(grid.period) ** 2
    best, best_val = None, 0.0
    for c in cands:
        if not np.any(c) or np.array_equal(c, eta) or not np.any(c + eta):
            continue
        t = c + eta
        if abs(_symbol_dot(grid, t, c)) > 1e-12 * scale:
            continue
        val = abs(_symbol_dot(grid, t, eta))
        if val <= best_val * (1 + 1e-12) or val <= 1e-9 * scale:
            continue
        p = ProbeSpec(((0, Pattern.wave_pair(eta, c)),))
        try:
            p.check_collisions(grid, "complex")
            p.check_collisions(grid, "raised")
        except ConfigError:
            continue
        best, best_val = c, val
    return best


def _plane_wave_ok(grid, eta) -> bool:
    scale = float(np.sum(eta ** 2) + 1) * (2 * np.pi) ** 2 / min(grid.period) ** 2
    return abs(_symbol_dot(grid, 2 * eta, eta)) > 1e-9 * scale


def w_probes(grid: TorusGrid, i: int, j: int, cutoff=None, amplitude: float = 1.0) -> list:
    """One probe per half-lattice frequency for kernel w_ij.

    Diagonal kernels use a single plane wave unless its doubled frequency sits
    on a zeroed derivative symbol; those fall back to a wave pair.
    """
    probes = []
    for m in lattice_indices(grid, cutoff):
        eta = np.array(m)
        if i == j:
            if _plane_wave_ok(grid, eta):
                probes.append(diagonal_probe(i, eta, amplitude))
                continue
            c = _self_partner(grid, eta)
            if c is not None:
                probes.append(ProbeSpec(((i, Pattern.wave_pair(eta, c, amplitude)),)))
        else:
            c = _w_partner(grid, eta)
            if c is None:
                continue
            probes.append(pair_probe(i, j, c, eta, amplitude, amplitude))
    return probes


def _symbol_dot(grid, t, e) -> complex:
    ti, ei = grid.mode_index(t), grid.mode_index(e)
    return sum(complex(Da.reshape(-1)[ti[a]]) * complex(Da.reshape(-1)[ei[a]])
               for a, Da in enumerate(grid.derivative_symbols))


def recover_w(records, params: ModelParams, grid: TorusGrid, entries=None, rel_tol: float = 1e-9) -> RecoveryReport:
    """Kernel transforms what_ij(eta) from plane-wave probes with nu known; w has zero mean."""
    n = params.n_species
    if entries is None:
        entries = sorted({(i, j) for rec in records for i, j in rec.probe.readings()
                          if len(rec.probe.species) == 1 or i != j})
    table = {e: {} for e in entries}
    for i, j in entries:
        if params.nu[i, j] == 0:
            raise NonIdentifiable(f"non-identifiable: nu[{i},{j}] is zero and no alternate probe exists",
                                  stage="recover_w", entry=[i, j])
    log = []
    for rec in records:
        log.append(rec.probe.label())
        sp = rec.probe.species
        for i, j in entries:
            if len(sp) == 1 and not (sp[0] == i == j):
                continue
            if len(sp) == 2 and not (i in sp and j in sp and i != j):
                continue
            eta = rec.probe.index(j, grid.ndim)
            t = rec.probe.target(i, j, grid.ndim)
            pat = rec.probe.pattern(i)
            if pat.kind == "wave_pair" and abs(_symbol_dot(grid, t, _pad(pat.partner, grid.ndim))) > \
                    1e-12 * max(abs(_symbol_dot(grid, t, t)), 1.0):
                raise ConfigError(f"{rec.probe.label()}: partner frequency is not orthogonal to the "
                                  f"cross mode, so what(eta) is not isolated")
            factor = 2.0 * params.nu[i, j] * _symbol_dot(grid, t, eta)
            pi, pj = rec.probe.pattern(i), rec.probe.pattern(j)
            amp = pi.amplitude * (pj.amplitude if j != i else pi.amplitude)
            if rec.form == "raised":
                amp /= 4.0
            scale = np.sqrt(sum(float(np.max(np.abs(k))) ** 2 for k in grid.wavenumbers))
            if abs(factor) <= rel_tol * abs(params.nu[i, j]) * scale ** 2:
                continue
            S = measured_mode(rec, grid, i, t)
            table[(i, j)][tuple(int(v) for v in eta)] = S / (factor * amp)
    report = RecoveryReport("w", probe_log=log)
    for e in entries:
        coef = np.zeros(grid.shape, dtype=complex)
        got = table[e]
        for m, v in got.items():
            coef[grid.mode_index(m)] = v
            coef[grid.mode_index(tuple(-np.array(m)))] = np.conj(v)
        coef[(0,) * grid.ndim] = 0.0
        full = dict(got)
        full.update({tuple(int(-v) for v in m): np.conj(v) for m, v in got.items()})
        report.w_table[e] = dict(sorted(full.items()))
        report.w_fields[e] = Field(grid, grid.ifft(coef, real=True))
        want = set(lattice_indices(grid))
        report.gaps[e] = sorted(want - set(got))
    return report
