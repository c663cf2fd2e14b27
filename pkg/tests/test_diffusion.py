import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import dblquad, quad
from scipy.special import k0

from aggrekit import diffusion as dfn
from aggrekit.errors import ConfigError, NonphysicalDiffusion
from aggrekit.forward import MeasurementSet
from aggrekit.torus import Field, TorusGrid


def gaussian_heat(t, r, sigma):
    """Plane heat flow (d = 1) of a unit Gaussian of std sigma, at distance r."""
    v = sigma ** 2 + 2 * t
    return np.exp(-r ** 2 / (2 * v)) / (2 * np.pi * v)


class TestLaplaceTransform:
    def test_exponential(self):
        a = 2.0
        t = np.arange(0, 20 / a + 1e-12, 1e-3)
        for p in (0.01, 0.1, 1.0):
            val = dfn.laplace_transform(t, np.exp(-a * t), p)
            assert val == pytest.approx(1 / (p + a), rel=1e-6)

    def test_zero_series(self):
        t = np.linspace(0, 5, 501)
        assert dfn.laplace_transform(t, np.zeros((501, 3)), 0.1) == pytest.approx(np.zeros(3), abs=0)

    def test_refined_quadrature_oracle(self):
        r, sigma, p = 0.3, 0.05, 0.05
        t = np.arange(0, 50 + 1e-9, 1e-3)
        tf = np.arange(0, 200 + 1e-9, 1e-4)
        coarse = dfn.laplace_transform(t, gaussian_heat(t, r, sigma), p)
        fine = dfn.laplace_transform(tf, gaussian_heat(tf, r, sigma), p)
        assert coarse == pytest.approx(fine, rel=1e-4)

    def test_plane_green_function(self):
        # transform of the plane heat flow of a narrow Gaussian is close to K0(sqrt(p) r) / 2 pi
        r, p = 0.3, 0.05
        tf = np.arange(0, 200 + 1e-9, 1e-4)
        val = dfn.laplace_transform(tf, gaussian_heat(tf, r, 1e-3), p)
        assert val == pytest.approx(k0(np.sqrt(p) * r) / (2 * np.pi), rel=1e-4)

    def test_log_algebraic_tail(self):
        t = np.arange(0, 30 + 1e-9, 0.01)
        u = (1 + np.log(1 + t)) / (1 + t) ** 2
        fine = np.arange(0, 3000 + 1e-9, 0.01)
        ref = dfn.laplace_transform(fine, (1 + np.log(1 + fine)) / (1 + fine) ** 2, 0.05, tail=None)
        assert dfn.laplace_transform(t, u, 0.05, tail="log_algebraic") == pytest.approx(ref, rel=1e-5)

    @pytest.mark.parametrize("p", [0.0, -1.0])
    def test_nonpositive_p(self, p):
        with pytest.raises(ConfigError):
            dfn.laplace_transform(np.linspace(0, 1, 11), np.ones(11), p)

    def test_too_short(self):
        with pytest.raises(ConfigError):
            dfn.laplace_transform(np.linspace(0, 1, 3), np.ones(3), 0.1)

    def test_nonuniform(self):
        with pytest.raises(ConfigError):
            dfn.laplace_transform(np.array([0, 0.1, 0.3, 0.4]), np.ones(4), 0.1, tail=None)


class TestComparisonProfiles:
    def test_g0_zero_source(self):
        g = TorusGrid((16, 16))
        assert dfn.compute_g0(Field(g, np.zeros(g.shape)), (0.5, 0.5), 0.1) == 0.0

    def test_g0_point_mass(self):
        q, x, p = (0.1, 0.2), (0.4, 0.6), 0.01
        r = np.hypot(0.3, 0.4)
        lp, L = np.log(p), np.log(r / 2)
        bracket = (0.5 + np.euler_gamma / lp + L / lp + p * r * r / 8 + p * r * r * L / (4 * lp)
                   + (np.euler_gamma - 1) * p * r * r / (4 * lp))
        assert dfn.compute_g0(dfn.PointSource(q), x, p) == pytest.approx(-bracket / (2 * np.pi), rel=1e-14)

    def test_g0_matches_k0_expansion(self):
        # the bracket is the small-argument expansion of K0 divided by ln p
        q, x, p = (0.0, 0.0), (0.2, 0.0), 1e-4
        exact = k0(np.sqrt(p) * 0.2) / (2 * np.pi) / np.log(p)
        assert dfn.compute_g0(dfn.PointSource(q), x, p) == pytest.approx(exact, rel=1e-6)
        assert dfn.compute_g(dfn.PointSource(q), x, p) == pytest.approx(exact, rel=1e-14)

    def test_g0_width_refinement(self):
        g = TorusGrid((512, 512))
        q, x, p = (0.5, 0.5), (0.8, 0.5), 0.05
        point = dfn.compute_g0(dfn.PointSource(q), x, p)
        errs = [abs(dfn.compute_g0(dfn.PointSource(q, w), x, p, g) / point - 1) for w in (0.02, 0.01, 0.005)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[-1] < 1e-3

    def test_p_range(self):
        with pytest.raises(ConfigError):
            dfn.compute_g0(dfn.PointSource((0, 0)), (0.1, 0), 0.4)

    def test_point_source_needs_width_on_grid(self):
        with pytest.raises(ConfigError):
            dfn.PointSource((0, 0)).sample(TorusGrid((8, 8)))


class TestProfileH:
    def test_unit_diffusion_gives_zero(self):
        p = 0.05
        g = np.array([0.3, -0.1])
        assert np.all(dfn.compute_h(np.log(p) * g, g, p) == 0)

    def test_affine_negative_control(self):
        p, ut, g = 0.05, np.array([0.2]), np.array([0.1])
        h = dfn.compute_h(ut, g, p)
        assert not np.allclose(dfn.compute_h(3 * ut, 3 * g, p), h)
        assert dfn.compute_h(3 * ut, 3 * g, p) == pytest.approx(3 * h)

    def test_formula(self):
        p, ut, g = 0.01, 0.7, 0.2
        lp = np.log(p)
        D = p * lp / (4 * np.pi ** 2) * (0.5 + np.euler_gamma / lp) ** 2
        assert dfn.compute_h(ut, g, p) == pytest.approx((ut / lp - g) / D, rel=1e-14)

    def test_round_trip(self):
        p, g, h = 0.02, 0.15, np.array([1.3, -0.4])
        ut = np.log(p) * (g + h * dfn.expansion_denominator(p))
        assert dfn.compute_h(ut, g, p) == pytest.approx(h, rel=1e-12)


class TestExtractH:
    def test_exact_model(self):
        p = np.geomspace(1e-3, 1e-6, 8)
        s = dfn.expansion_variable(p)
        c = dfn.extract_H(p, 2 + 3 * s + 4 * s * s)
        assert (c.H0[0], c.H1[0], c.H2[0]) == pytest.approx((2, 3, 4), abs=1e-8)
        assert not c.flagged[0]

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
    def test_exact_model_default_ladder(self, a, b, c):
        p = np.array(dfn.DEFAULT_P_LADDER)
        s = dfn.expansion_variable(p)
        out = dfn.extract_H(p, a + b * s + c * s * s)
        assert out.H0[0] == pytest.approx(a, abs=1e-8)
        assert out.H1[0] == pytest.approx(b, abs=1e-8)
        assert out.H2[0] == pytest.approx(c, abs=1e-8)

    def test_zero_data(self):
        c = dfn.extract_H(dfn.DEFAULT_P_LADDER, np.zeros((8, 3)))
        assert np.all(c.H2 == 0) and np.all(c.residual == 0)

    def test_contamination(self):
        # sqrt(p) remainder with amplitude 2.5% of the largest coefficient
        p = np.array(dfn.DEFAULT_P_LADDER)
        s = dfn.expansion_variable(p)
        clean = 2 + 3 * s + 4 * s * s
        h = clean + 0.025 * 4 * np.sqrt(p)
        c = dfn.extract_H(p, h)
        assert c.H2[0] == pytest.approx(4, rel=1e-2)
        assert c.H1[0] == pytest.approx(3, rel=1e-2)
        assert c.H0[0] == pytest.approx(2, rel=1e-2)

    def test_flags_bad_fit(self):
        p = np.array(dfn.DEFAULT_P_LADDER)
        c = dfn.extract_H(p, np.sin(40 * p))
        assert c.flagged[0]

    def test_rank_deficient(self):
        with pytest.raises(ConfigError, match="rank-deficient"):
            dfn.extract_H(1e-3 * (1 - 1e-13 * np.arange(5)), np.ones(5))

    def test_needs_four_values(self):
        with pytest.raises(ConfigError):
            dfn.extract_H([0.1, 0.05, 0.01], np.ones(3))


class TestQuadrature:
    def test_cell_log_offset(self):
        # mean of ln|y| over the unit square: 8 polar wedges, radial part integrated numerically too
        def wedge(th):
            R = 0.5 / np.cos(th)
            return quad(lambda r: r * np.log(r), 0, R, epsabs=1e-14)[0]

        val = 8 * quad(wedge, 0, np.pi / 4, epsabs=1e-14)[0]
        assert dfn.CELL_LOG_OFFSET == pytest.approx(val, abs=1e-10)

    def test_cell_log_offset_cartesian(self):
        val, _ = dblquad(lambda y, x: 0.5 * np.log(x * x + y * y), 1e-12, 0.5, 1e-12, 0.5, epsabs=1e-12)
        assert dfn.CELL_LOG_OFFSET == pytest.approx(4 * val, abs=1e-7)

    @pytest.mark.parametrize("r_over_w", [0.3, 1.0, 4.0])
    def test_gaussian_log(self, r_over_w):
        w = 0.02
        r = r_over_w * w

        def inner(rho):
            f = lambda th: np.exp(-((r + rho * np.cos(th)) ** 2 + (rho * np.sin(th)) ** 2) / (2 * w * w))
            ang, _ = quad(f, 0, 2 * np.pi, epsabs=1e-14)
            return np.log(rho / 2) * rho * ang / (2 * np.pi * w * w)

        ref, _ = quad(inner, 0, r + 12 * w, limit=200, epsabs=1e-12, points=[r])
        assert dfn.gaussian_log(r, w) == pytest.approx(ref, abs=1e-8)

    def test_gaussian_log_limits(self):
        w = 0.01
        assert dfn.gaussian_log(0.0, w) == pytest.approx(dfn.gaussian_log(1e-9, w), abs=1e-8)
        assert dfn.gaussian_log(1.0, w) == pytest.approx(np.log(0.5), abs=1e-12)


class TestFredholm:
    def test_single_entry(self):
        x, r, q, wt = (0.3, 0.0), (0.0, 0.1), (-0.2, -0.2), 0.01
        s = dfn.assemble_fredholm([x], [q], [r], [wt], spacing=0.1)
        hand = 4 * np.log(np.hypot(0.3, 0.1) / 2) * np.log(np.hypot(0.2, 0.3) / 2) * wt
        assert s.A.shape == (1, 1)
        assert s.A[0, 0] == pytest.approx(hand, rel=1e-14)

    def test_zero_m(self):
        nodes, w = dfn.disk_nodes((0, 0), 0.1, 0.02)
        s = dfn.assemble_fredholm(dfn.ring_points((0, 0), 0.2, 5), dfn.ring_points((0, 0), 0.3, 3), nodes, w,
                                  spacing=0.02, rhs=np.zeros(15))
        assert np.all(s.apply(np.zeros(len(nodes))) == s.rhs)

    def test_row_order(self):
        nodes, w = dfn.disk_nodes((0, 0), 0.05, 0.02)
        X, Q = dfn.ring_points((0, 0), 0.2, 3), dfn.ring_points((0, 0), 0.3, 2, 0.1)
        s = dfn.assemble_fredholm(X, Q, nodes, w, spacing=0.02)
        single = dfn.assemble_fredholm(X[2:3], Q[1:2], nodes, w, spacing=0.02)
        assert s.pairs[2 * 2 + 1] == (2, 1)
        assert np.array_equal(s.A[2 * 2 + 1], single.A[0])

    def test_coincident_uses_cell_average(self):
        h = 0.01
        s = dfn.assemble_fredholm([(0.0, 0.0)], [(0.3, 0.0)], [(0.0, 0.0)], [h * h], spacing=h)
        expected = 4 * (np.log(h) + dfn.CELL_LOG_OFFSET - np.log(2)) * np.log(0.15) * h * h
        assert np.isfinite(s.A).all()
        assert s.A[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_rhs_length(self):
        s = dfn.assemble_fredholm([(0.3, 0)], [(0, 0.3)], [(0, 0)], [1e-4], spacing=0.01)
        with pytest.raises(ConfigError):
            s.with_rhs([1.0, 2.0])

    def test_disk_nodes(self):
        nodes, w = dfn.disk_nodes((1.0, 2.0), 0.1, 0.05)
        assert len(nodes) == 9 and w == pytest.approx(np.full(9, 0.0025), rel=1e-14)
        assert np.all(np.hypot(*(nodes - (1.0, 2.0)).T) < 0.1)


def _toy_system(n_nodes=5):
    nodes, w = dfn.disk_nodes((0, 0), 0.12, 0.04)
    X = dfn.ring_points((0, 0), 0.25, 12)
    Q = dfn.ring_points((0, 0), 0.3, 6, 0.1)
    return dfn.assemble_fredholm(X, Q, nodes, w, 0.02 / 2.355, spacing=0.04)


class TestTikhonov:
    def test_zero_rhs(self):
        s = _toy_system()
        out = dfn.solve_tikhonov(s.with_rhs(np.zeros(s.A.shape[0])), alpha=1e-6)
        assert np.all(out.m == 0) and np.all(out.d == 1)

    def test_small_alpha_gives_least_squares(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((20, 5)))
        nodes = np.stack([np.arange(5) * 0.1, np.zeros(5)], -1)
        b = 0.1 * rng.standard_normal(20)
        s = dfn.FredholmSystem(None, None, nodes, np.ones(5), Q, [], b, 0.1)
        out = dfn.solve_tikhonov(s, alpha=1e-12)
        assert out.m == pytest.approx(Q.T @ b, abs=1e-8)

    def test_sweep_monotone(self):
        s = _toy_system()
        m_true = 0.1 * np.exp(-np.sum(s.nodes ** 2, 1) / 0.005)
        out = dfn.solve_tikhonov(s.with_rhs(s.apply(m_true)))
        pen = [r["penalty"] for r in out.sweep]
        res = [r["residual"] for r in out.sweep]
        assert np.all(np.diff(pen) <= 1e-12 * max(pen))
        assert np.all(np.diff(res) >= -1e-12 * max(res))
        assert out.alpha in [r["alpha"] for r in out.sweep]

    def test_recovers_noiseless(self):
        s = _toy_system()
        m_true = 0.1 * np.exp(-np.sum(s.nodes ** 2, 1) / 0.005)
        s = s.with_rhs(s.apply(m_true))
        sweep = dfn.solve_tikhonov(s).sweep
        errs = [np.linalg.norm(dfn.solve_tikhonov(s, alpha=r["alpha"]).m - m_true) for r in sweep[::5]]
        assert min(errs) / np.linalg.norm(m_true) < 0.2
        norms = [r["norm"] for r in sweep]
        assert np.all(np.diff(norms) <= 0)

    def test_nonphysical(self):
        s = _toy_system()
        with pytest.raises(NonphysicalDiffusion, match="nonphysical diffusion") as info:
            dfn.solve_tikhonov(s.with_rhs(s.apply(np.full(len(s.nodes), 1.5))), alpha=1e-14)
        assert len(info.value.details["nodes"]) > 0
        assert info.value.stage == "solve_tikhonov"

    def test_alpha_positive(self):
        s = _toy_system()
        with pytest.raises(ConfigError):
            dfn.solve_tikhonov(s.with_rhs(np.zeros(s.A.shape[0])), alpha=0.0)

    def test_gradient_operator_constant(self):
        nodes, _ = dfn.disk_nodes((0, 0), 0.1, 0.02)
        L = dfn.gradient_operator(nodes, 0.02)
        # interior differences vanish on constants; boundary edges see m = 0 outside
        assert np.linalg.matrix_rank(L) == len(nodes)


class TestConfig:
    def test_ladder_validation(self):
        with pytest.raises(ConfigError):
            dfn.DiffusionConfig(p_values=(0.01, 0.02, 0.03, 0.04))
        with pytest.raises(ConfigError):
            dfn.DiffusionConfig(p_values=(0.5, 0.1, 0.05, 0.01))
        with pytest.raises(ConfigError):
            dfn.DiffusionConfig(comparison="other")

    def test_default_ladder(self):
        p = np.array(dfn.DEFAULT_P_LADDER)
        assert len(p) == 8 and np.all(p < dfn.P_MAX) and np.all(np.diff(p) < 0)


class TestPipeline:
    def test_rejects_1d(self):
        g = TorusGrid((64,))
        mask = np.zeros(64, bool)
        mask[3] = True
        ms = MeasurementSet(g, mask, np.linspace(0, 1, 11), np.zeros((11, 1)))
        with pytest.raises(ConfigError, match="two space dimensions"):
            dfn.invert_diffusion([ms], [dfn.PointSource((0.1,), 0.02)])

    def test_unit_diffusion_recovered(self):
        g = TorusGrid((64, 64), 2.0)
        c = (1.0, 1.0)
        srcs = [dfn.PointSource(tuple(q), 2 * g.spacing[0]) for q in dfn.ring_points(c, 0.3, 2)]
        mask = np.zeros(g.shape, bool)
        for x in dfn.ring_points(c, 0.25, 6):
            mask[tuple(np.round(x / g.spacing).astype(int))] = True
        ms = dfn.simulate_measurements(g, np.ones(g.shape), srcs, mask, 0.3, 1e-2)
        rep = dfn.invert_diffusion(ms, srcs, dfn.DiffusionConfig(center=c, node_spacing=0.1))
        assert np.max(np.abs(rep.d_field.values - 1)) < 1e-2
        assert [pr["source"] for pr in rep.provenance] == [0, 1]

    def test_species_selection(self):
        g = TorusGrid((64, 64), 2.0)
        c = (1.0, 1.0)
        src = dfn.PointSource((1.3, 1.0), 2 * g.spacing[0])
        mask = np.zeros(g.shape, bool)
        for x in dfn.ring_points(c, 0.25, 6):
            mask[tuple(np.round(x / g.spacing).astype(int))] = True
        (ms,) = dfn.simulate_measurements(g, np.ones(g.shape), [src], mask, 0.3, 1e-2)
        junk = ms.values + 5.0
        both = MeasurementSet(g, mask, ms.times, np.stack([junk, ms.values], 1))
        cfg = dfn.DiffusionConfig(center=c, node_spacing=0.1)
        rep = dfn.invert_diffusion([both], [src], cfg, species=1)
        ref = dfn.invert_diffusion([ms], [src], cfg)
        assert np.array_equal(rep.solution.m, ref.solution.m)
        assert rep.provenance[0]["species"] == 1
        with pytest.raises(ConfigError):
            dfn.invert_diffusion([both], [src], cfg)

    def test_uniqueness_witness(self):
        from aggrekit.config import BumpConfig

        g = TorusGrid((128, 128), 4.0)
        c = (2.0, 2.0)
        srcs = [dfn.PointSource(tuple(q), 2 * g.spacing[0]) for q in dfn.ring_points(c, 0.3, 2)]
        mask = np.zeros(g.shape, bool)
        for x in dfn.ring_points(c, 0.25, 8):
            mask[tuple(np.round(x / g.spacing).astype(int))] = True
        fields = [BumpConfig(center=list(c), amplitude=a).sample(g) for a in (0.1, 0.15)]
        assert np.linalg.norm(fields[0] - fields[1]) >= 0.05
        H2 = []
        for d in fields:
            ms = dfn.simulate_measurements(g, d, srcs, mask, 1.5, 4e-3)
            H2.append(dfn.invert_diffusion(ms, srcs, dfn.DiffusionConfig(center=c, node_spacing=0.125)).system.rhs)
        assert np.linalg.norm(H2[0] - H2[1]) / np.linalg.norm(H2[0]) >= 0.01
