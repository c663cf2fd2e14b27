"""Acceptance suite: one recorded PASS/FAIL line per criterion, at the stated tolerances."""
import json

import numpy as np
import pytest

from aggrekit import cli
from aggrekit import diffusion as dfn
from aggrekit import kernel_inversion as ki
from aggrekit.config import BumpConfig
from aggrekit.errors import NonIdentifiable
from aggrekit.forward import KernelSpec, ModelParams, SeriesRecorder, simulate, step_heat
from aggrekit.torus import Field, TorusGrid, convolve, mass
from aggrekit.variations import convergence_order, variation_convergence

from conftest import record_criterion

MU = np.array([[0.3, -0.1], [0.2, 0.4]])
NU = np.array([[0.5, 0.1], [-0.2, 0.3]])
EPS = (1e-2, 5e-3, 2.5e-3)


def k_vec():
    return KernelSpec("compact_radial_vector", "vector_kernel_k", radius=0.25)


def m1(mu=MU):
    k = k_vec()
    return ModelParams("M1", [0.05, 0.08], mu=mu, kernels=[[k, k], [k, k]])


def m2(nu=NU, w=None):
    w = w or KernelSpec("gaussian_bump", width=0.1)
    return ModelParams("M2", [0.05, 0.08], nu=nu, kernels=[[w, w], [w, w]])


def two_species(grid):
    X, Y = grid.coords()
    a = 0.5 + np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2) / 0.02)
    b = 0.8 + np.exp(-((X - 0.3) ** 2 + (Y - 0.6) ** 2) / 0.045)
    return np.stack([a, b])


def receiver_mask(grid, center, radius, count):
    mask = np.zeros(grid.shape, bool)
    for x in dfn.ring_points(center, radius, count):
        mask[grid.mode_index(np.round(x / np.array(grid.spacing)).astype(int))] = True
    return mask


class TestSpectral:
    def test_criterion_1_heat_eigenfunction(self):
        g = TorusGrid((64, 64))
        X, Y = g.coords()
        xi = g.frequency((3, -2))
        f = np.cos(xi[0] * X + xi[1] * Y)
        d = 0.05
        # one exact step, then a split trajectory whose decay stays O(1) so the relative error is not
        # dominated by roundoff in modes that do not decay
        one = step_heat(f, d, 0.1, g)
        tr = simulate(ModelParams("heat", [d]), g, f[None], 0.1, 1e-3, times=np.linspace(0, 0.1, 11))
        err = 0.0
        for t, u in [(0.1, one)] + list(zip(tr.times, tr.states[:, 0])):
            exact = np.exp(-d * (xi @ xi) * t) * f
            err = max(err, float(np.max(np.abs(u - exact)) / np.max(np.abs(exact))))
        ok = err <= 1e-12
        record_criterion(1, ok, f"plane-wave heat flow on 64^2: max relative error {err:.2e} (bound 1e-12)")
        assert ok

    def test_criterion_2_convolution_quadrature(self, rng):
        g = TorusGrid((16, 16))
        n = 16
        i = np.arange(n)
        di = (i[:, None] - i[None, :]) % n  # (target, source) index difference per axis
        worst = 0.0
        for _ in range(100):
            k = rng.standard_normal(g.shape)
            u = rng.standard_normal(g.shape)
            # sum_y k(x - y) u(y) dV, written out over all node pairs
            direct = np.einsum("acbd,bd->ac", k[di[:, None, :, None], di[None, :, None, :]], u) * g.cell_volume
            fast = convolve(Field(g, k), Field(g, u)).values
            worst = max(worst, float(np.max(np.abs(fast - direct))))
        ok = worst <= 1e-10
        record_criterion(2, ok, f"FFT vs direct convolution, 100 trials on 16^2: max error {worst:.2e} (bound 1e-10)")
        assert ok


class TestConservation:
    def test_criterion_3_mass_and_shift(self):
        g = TorusGrid((32, 32))
        f = two_species(g)
        m0 = np.array([mass(Field(g, c)) for c in f])
        drifts = {}
        for name, p in (("M1", m1()), ("M2", m2())):
            uT = simulate(p, g, f, 1.0, 1e-3).states[-1]
            drifts[name] = float(np.max(np.abs(np.array([mass(Field(g, c)) for c in uT]) - m0) / m0))
        p = m2()
        shifted = p.with_kernels([[KernelSpec("grid_sampled", values=k.sample(g) + 2.5) for k in row]
                                  for row in p.kernels])
        a = simulate(p, g, f, 0.5, 1e-3).states
        b = simulate(shifted, g, f, 0.5, 1e-3).states
        shift = float(np.max(np.abs(a - b)))
        ok = max(drifts.values()) <= 1e-10 and shift <= 1e-12
        record_criterion(3, ok, f"mass drift over 1000 steps M1 {drifts['M1']:.1e}, M2 {drifts['M2']:.1e} "
                                f"(bound 1e-10); w vs w+c max difference {shift:.1e} (bound 1e-12)")
        assert ok


class TestVariations:
    def test_criterion_4_epsilon_convergence(self):
        g = TorusGrid((32, 32))
        X, Y = g.coords()
        f1 = np.stack([1 + 0.5 * np.cos(2 * np.pi * X) * np.sin(2 * np.pi * Y),
                       1 + 0.3 * np.sin(2 * np.pi * (X + Y))])
        f2 = np.stack([np.cos(4 * np.pi * Y), np.zeros_like(X)])
        orders = {}
        for name, p in (("M1", m1()), ("M2", m2())):
            s = variation_convergence(p, g, f1, f2, 0.1, 1e-3, scales=EPS)
            orders[name] = (s.order_I, s.order_II)
        ok = all(min(o) >= 0.8 for o in orders.values())
        detail = ", ".join(f"{k} uI {a:.2f} uII {b:.2f}" for k, (a, b) in orders.items())
        record_criterion(4, ok, f"measured orders over eps ladder {EPS}: {detail} (bound 0.8)")
        assert ok


class TestDiffusionNull:
    def test_criterion_5_unit_diffusion(self):
        g = TorusGrid((256, 256), 8.0)
        c = (4.0, 4.0)
        h = g.spacing[0]
        srcs = [dfn.PointSource(tuple(q), 2 * h) for q in dfn.ring_points(c, 0.3, 3, 0.1)]
        mask = receiver_mask(g, c, 0.25, 12)
        ms = []
        for s in srcs:
            rec = SeriesRecorder(mask)
            simulate(ModelParams("heat", [1.0]), g, s.sample(g)[None], 1.5, 4e-3, times=[1.5], observer=rec)
            t, v = rec.series()
            ms.append(dfn.MeasurementSet(g, mask, t, v))
        ratios, fits, scale = {}, {}, {}
        for comparison in ("exact", "g0"):
            rep = dfn.invert_diffusion(ms, srcs, dfn.DiffusionConfig(center=c, comparison=comparison), species=0)
            ratios[comparison] = max(float(np.max(np.abs(co.H2) / np.max(np.abs(pr.h_values), axis=0)))
                                     for co, pr in zip(rep.coefficients, rep.profiles))
            fits[comparison] = max(float(np.max(co.residual)) for co in rep.coefficients)
            scale[comparison] = max(float(np.max(np.abs(pr.h_values))) for pr in rep.profiles)
        # the default pipeline decides; the truncated-profile route is reported alongside
        ok = ratios["exact"] <= 1e-3 and fits["exact"] <= 1e-2
        record_criterion(5, ok, f"d = 1 null test, 3 sources x 12 receivers: max |H2|/max|h| {ratios['exact']:.1e} "
                                f"(bound 1e-3, max|h| {scale['exact']:.0e}), fit residual {fits['exact']:.1e} "
                                f"(bound 1e-2); truncated profile: ratio {ratios['g0']:.1e}, "
                                f"max|h| {scale['g0']:.1f}, fit residual {fits['g0']:.1e}")
        assert ok


@pytest.fixture(scope="module")
def bump_inversion():
    """Far-field geometry: 512^2 box of side 8, smooth bump of height 0.1 at the centre."""
    g = TorusGrid((512, 512), 8.0)
    c = (4.0, 4.0)
    h = g.spacing[0]
    d = BumpConfig(center=list(c), amplitude=0.1).sample(g)
    srcs = [dfn.PointSource(tuple(q), 2 * h) for q in dfn.ring_points(c, 0.3, 6, 0.1)]
    mask = receiver_mask(g, c, 0.25, 12)
    ms = dfn.simulate_measurements(g, d, srcs, mask, 1.5, 4e-3)
    rep = dfn.invert_diffusion(ms, srcs, dfn.DiffusionConfig(center=c), true_d=Field(g, d))
    return g, d, rep


class TestDiffusionBump:
    def test_criterion_6_forward_consistency(self, bump_inversion):
        _, _, rep = bump_inversion
        res = rep.forward_residual
        ok = res <= 0.05
        record_criterion(6, ok, f"operator applied to true m vs extracted H2: relative l2 {res:.3f} (bound 0.05)")
        assert ok

    def test_criterion_7_tikhonov_recovery(self, bump_inversion):
        g, _, rep = bump_inversion
        nodes = rep.system.nodes
        truth = BumpConfig(center=[4.0, 4.0], amplitude=0.1)
        r = np.hypot(nodes[:, 0] - 4.0, nodes[:, 1] - 4.0)
        s = np.clip(r / truth.radius, 0, 1)
        d_nodes = 1 + truth.amplitude * np.where(r < truth.radius, np.cos(0.5 * np.pi * s) ** 4, 0.0)
        m_true = 1 - 1 / d_nodes
        err = float(np.linalg.norm(rep.solution.m - m_true) / np.linalg.norm(m_true))
        sweep = sorted(rep.solution.sweep, key=lambda e: e["alpha"])
        norms = np.array([e["norm"] for e in sweep])
        monotone = bool(np.all(np.diff(norms) <= 1e-12 * norms[0]))
        ok = err <= 0.2 and monotone
        record_criterion(7, ok, f"L-curve alpha {rep.solution.alpha:.2e}: relative l2 error in m {err:.3f} "
                                f"(bound 0.2) on {len(nodes)} nodes; |m| non-increasing in alpha: {monotone}")
        assert ok


class TestCouplingRecovery:
    def test_criterion_8_mu_nu(self):
        g = TorusGrid((32, 32))
        direct, orders = {}, {}
        for name, p, truth in (("mu", m1(), MU), ("nu", m2(), NU)):
            recover = ki.recover_mu if name == "mu" else ki.recover_nu
            recs = ki.run_probes(p, g, ki.default_schedule(2, 2), 0.2, 1e-3)
            direct[name] = float(np.max(np.abs(recover(recs, p, g).matrix - truth)))
            probes = ki.default_schedule(2, 2, amplitude=0.5, form="raised")
            errs = []
            for e in EPS:
                recs = ki.run_probes(p, g, probes, 0.2, 1e-3, form="raised", epsilons=(e, e / 2, e / 4))
                errs.append(float(np.max(np.abs(recover(recs, p, g).matrix - truth))))
            orders[name] = (convergence_order(EPS, errs), errs)
        ok = max(direct.values()) <= 1e-4 and min(o for o, _ in orders.values()) >= 0.8
        record_criterion(8, ok, f"direct data: mu error {direct['mu']:.1e}, nu error {direct['nu']:.1e} "
                                f"(bound 1e-4); eps-extracted order mu {orders['mu'][0]:.2f}, "
                                f"nu {orders['nu'][0]:.2f} (bound 0.8)")
        assert ok


class TestKernelRecovery:
    def test_criterion_9_w(self):
        g = TorusGrid((16, 16))
        errs, spurious, dominant = {}, None, None
        for name, w in (("gaussian", KernelSpec("gaussian_bump", width=0.12)),
                        ("cosine", KernelSpec("cosine_mode", frequency=(1, 0)))):
            p = ModelParams("M2", [0.05], nu=[[0.5]], kernels=[[w]])
            rep = ki.recover_w(ki.run_probes(p, g, ki.w_probes(g, 0, 0), 0.02, 5e-4), p, g)
            wt = w.sample(g)
            wt = wt - wt.mean()
            errs[name] = float(np.linalg.norm(rep.w_fields[(0, 0)].values - wt) / np.linalg.norm(wt))
            if name == "cosine":
                e = np.sort(np.abs(g.fft(rep.w_fields[(0, 0)].values)).ravel() ** 2)[::-1]
                dominant = int(np.sum(e > 1e-8 * e[0]))
                spurious = float(e[2:].sum() / e[0])
        ok = max(errs.values()) <= 1e-3 and dominant == 2 and spurious <= 1e-8
        record_criterion(9, ok, f"16^2, cutoff N/2-2: relative l2 gaussian {errs['gaussian']:.1e}, "
                                f"cosine {errs['cosine']:.1e} (bound 1e-3); cosine dominant modes {dominant}, "
                                f"spurious energy {spurious:.1e} of peak (bound 1e-8)")
        assert ok


class TestNonIdentifiability:
    def _cli_exit(self, tmp_path, verb, doc):
        cfg = tmp_path / f"{verb}-{len(list(tmp_path.iterdir()))}.json"
        cfg.write_text(json.dumps(doc))
        out = tmp_path / "runs"
        code = cli.main([verb, "--config", str(cfg), "--out", str(out)])
        errors = [json.loads(p.read_text())["error"] for p in out.glob(f"{verb}-*/error.json")]
        return code, errors

    def test_criterion_10_structured_errors(self, tmp_path, capsys):
        g = TorusGrid((32, 32))
        small = TorusGrid((16, 16))
        cases = {}

        p = m1()
        try:
            ki.recover_mu(ki.run_probes(p, g, ki.constant_schedule(2), 0.2, 1e-3), p, g)
        except NonIdentifiable as exc:
            cases["zero normalization"] = "zero normalization" in exc.message
        p = ModelParams("M2", [0.05], nu=[[0.0]], kernels=[[KernelSpec("gaussian_bump", width=0.1)]])
        try:
            ki.recover_w(ki.run_probes(p, small, ki.w_probes(small, 0, 0, cutoff=1), 0.02, 5e-4), p, small)
        except NonIdentifiable as exc:
            cases["zero nu"] = "nu" in exc.message
        p = m2(w=KernelSpec("cosine_mode", frequency=(2, 0)))
        try:
            ki.recover_nu(ki.run_probes(p, g, ki.default_schedule(2, 2, base=(1, 0)), 0.2, 1e-3), p, g)
        except NonIdentifiable as exc:
            cases["what zero"] = "available frequencies" in exc.message

        base = {"version": 1, "grid": {"shape": [16, 16]}}
        k = {"kind": "compact_radial_vector", "role": "vector_kernel_k"}
        docs = [
            ("invert-advection", {**base, "model": "M1", "params": {"d": [0.05], "mu": [[0.3]], "kernel": k},
                                  "probes": {"constant": True}}),
            ("invert-kernel", {**base, "model": "M2",
                               "params": {"d": [0.05], "nu": [[0.0]], "kernel": {"kind": "gaussian_bump"}},
                               "probes": {"T": 0.02, "dt": 5e-4, "cutoff": 1}}),
            ("invert-advection", {**base, "model": "M2",
                                  "params": {"d": [0.05], "nu": [[0.5]],
                                             "kernel": {"kind": "cosine_mode", "frequency": [2, 0]}},
                                  "probes": {"base": [1, 0]}}),
        ]
        exits = []
        for verb, doc in docs:
            code, errors = self._cli_exit(tmp_path, verb, doc)
            exits.append(code == 4 and bool(errors) and set(errors) == {"NonIdentifiable"})
        capsys.readouterr()
        ok = len(cases) == 3 and all(cases.values()) and all(exits)
        record_criterion(10, ok, f"NonIdentifiable raised for {sorted(cases)}; CLI exit 4 with error.json: "
                                 f"{sum(exits)}/3")
        assert ok
