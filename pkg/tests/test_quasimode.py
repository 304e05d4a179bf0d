import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from heisenberg_obs.errors import ParameterError
from heisenberg_obs.evolution import SourceSpec, evolve_mode
from heisenberg_obs.mode_operator import Grid1D
from heisenberg_obs.quasimode import (
    CutoffPair,
    _mode_log_energies,
    build_quasimode,
    cex_mode,
    cex_quotient,
    error_bound_sweep,
    fit_log_rate,
    gaussian_G,
    quasimode_error,
    smooth_ramp,
    tmin_scan,
    unbounded_quasimode,
)

SMALL = lambda p: Grid1D(400)  # noqa: E731


class TestGaussian:
    def test_value_at_zero(self):
        assert gaussian_G(0.0) == pytest.approx(0.7511255444649425, rel=1e-15)

    def test_unit_norm(self):
        val, _ = quad(lambda x: gaussian_G(x) ** 2, -12, 12, epsabs=1e-13, epsrel=1e-13)
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_hermite_ground_state(self):
        x = np.linspace(-6, 6, 41)
        np.testing.assert_allclose(-gaussian_G(x, 2) + x**2 * gaussian_G(x), gaussian_G(x), atol=1e-10)

    def test_flush(self):
        assert gaussian_G(40.0) == 0.0 and gaussian_G(37.0) > 0.0
        assert gaussian_G(-1e3, 2) == 0.0


class TestCutoffs:
    def test_ramp_ends(self):
        assert smooth_ramp(0.0) == 0.0 and smooth_ramp(1.0) == 1.0
        assert smooth_ramp(0.5) == pytest.approx(0.5)

    @pytest.mark.parametrize("s", [0.1, 0.37, 0.5, 0.8, 0.95])
    def test_ramp_derivatives(self, s):
        h, h2 = 1e-5, 1e-4
        d1 = (smooth_ramp(s + h) - smooth_ramp(s - h)) / (2 * h)
        d2 = (smooth_ramp(s + h2) - 2 * smooth_ramp(s) + smooth_ramp(s - h2)) / h2**2
        assert smooth_ramp(s, 1) == pytest.approx(d1, rel=1e-5)
        assert smooth_ramp(s, 2) == pytest.approx(d2, rel=1e-3, abs=1e-4)

    def test_flattened_ends_are_continuous(self):
        # values and derivatives at the clamp points are already below 1e-200
        for s in (0.002, 0.998):
            for d in (1, 2):
                assert abs(float(smooth_ramp(s + 1e-9, d))) < 1e-200
        assert 1 - smooth_ramp(0.998 - 1e-9) < 1e-200

    @pytest.mark.parametrize("a", [-0.5, 0.0, 0.5])
    def test_pair_conditions(self, a):
        c = CutoffPair.for_region(a)
        assert c.theta(1, 1.0) == 1.0 and c.theta(1, -1.0) == 0.0
        assert c.theta(-1, -1.0) == 1.0 and c.theta(-1, 1.0) == 0.0
        x = np.linspace(a, 1, 101)
        assert not np.any(c.theta(-1, x)) and c.supports_region(a)

    def test_chain_rule(self):
        c = CutoffPair(-0.3, 0.2)
        x, h = 0.6, 1e-5
        for s in (-1, 1):
            fd = (c.theta(s, x + h) - c.theta(s, x - h)) / (2 * h)
            assert c.theta(s, x, 1) == pytest.approx(fd, rel=1e-6)

    def test_invalid_edges(self):
        with pytest.raises(ParameterError):
            CutoffPair(-1.0, 0.0)


class TestQuasiMode:
    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(-20, 20), p=st.floats(0.5, 60), t=st.floats(0, 2),
           a=st.floats(-0.9, 0.9))
    def test_boundary_zero(self, n, p, t, a):
        qm = build_quasimode(n, p, CutoffPair.for_region(a), 2.0, Grid1D(16))
        assert np.all(qm.K(t, np.array([-1.0, 1.0])) == 0.0)

    def test_error_zero_at_start(self):
        qm = build_quasimode(6, 8.0, CutoffPair.for_region(-0.5), 0.2, Grid1D(300))
        assert quasimode_error(qm, 0.0) == 0.0
        assert quasimode_error(qm, 0.2) > 0.0

    def test_residual_second_order(self):
        errs = []
        for m in (200, 400, 800):
            qm = build_quasimode(9, 12.0, CutoffPair.for_region(-0.5), 0.1, Grid1D(m))
            errs.append(np.max(np.abs(qm.discrete_residual(0.05) - qm.E(0.05))))
        assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)
        assert errs[1] / errs[2] == pytest.approx(4, rel=0.1)

    def test_forcing_sign(self):
        # the boundary correction is removed by (+p + d^2 - V) theta, checked against the residual
        qm = build_quasimode(3, 5.0, CutoffPair(-0.2, 0.1), 1.0, Grid1D(1600))
        r, e = qm.discrete_residual(0.3), qm.E(0.3)
        assert np.max(np.abs(r - e)) <= 1e-4 * np.max(np.abs(e))

    def test_error_is_duhamel_of_residual(self):
        qm = build_quasimode(6, 8.0, CutoffPair.for_region(-0.5), 0.3, Grid1D(300))
        src = SourceSpec.general(lambda t: -qm.discrete_residual(t), samples=801)
        w = evolve_mode(qm.params, np.zeros(qm.grid.size), src, 0.3, grid=qm.grid).states[-1]
        direct = qm.evolve([0.3]).states[0] - qm.K(0.3)
        assert np.max(np.abs(w - direct)) <= 1e-5 * np.max(np.abs(direct))

    @pytest.mark.parametrize("t", [0.05, 0.2])
    def test_duhamel_bound(self, t):
        qm = build_quasimode(6, 8.0, CutoffPair.for_region(-0.5), 0.2, Grid1D(600))
        bound = math.sqrt(t * qm.forcing_energy(t))
        assert quasimode_error(qm, t) <= bound * 1.01

    def test_forcing_energy_closed_form(self):
        qm = build_quasimode(2, 4.0, CutoffPair(), 1.0, Grid1D(200))
        f = lambda s: qm.grid.dx * np.sum(qm.E(s) ** 2)
        val, _ = quad(f, 0, 0.7, epsrel=1e-12)
        assert qm.forcing_energy(0.7) == pytest.approx(val, rel=1e-10)

    def test_invalid(self):
        with pytest.raises(ParameterError):
            build_quasimode(1, 0.0)
        with pytest.raises(ParameterError):
            cex_mode(1.0, 3)


class TestCex:
    def test_small_k(self):
        r = cex_quotient(-0.5, 0.02, 1)
        assert (r.n, r.p) == (0, 1.0)
        assert 0 < r.ratio < math.inf and math.isfinite(r.log_ratio)

    def test_final_energy_matches_trajectory(self):
        r = cex_quotient(0.0, 0.1, 6, Grid1D(500))
        qm = build_quasimode(3, 6.0, CutoffPair.for_region(0.0), 0.1, Grid1D(500))
        g = qm.evolve([0.1]).states[0]
        assert r.final_energy == pytest.approx(qm.grid.dx * np.sum(np.abs(g) ** 2), rel=1e-10)

    def test_log_space_survives_underflow(self):
        r = cex_quotient(0.5, 12.0, 40, Grid1D(400))
        assert r.log_final_energy < -900 and math.isfinite(r.log_ratio)

    def test_final_slope(self):
        ks = [8, 12, 16, 24, 32, 40]
        for T in (0.14, 0.56):
            lf = [cex_quotient(0.5, T, k).log_final_energy for k in ks]
            assert fit_log_rate(ks, lf) == pytest.approx(-2 * T, rel=0.15)


class TestScan:
    def test_signs_and_crossover(self):
        a = 0.5
        th = (1 + a) ** 2 / 8
        scan = tmin_scan(a, [8, 12, 16, 24, 32], [th / 4, th / 2, th, 2 * th, 4 * th])
        assert scan.slope_at(th / 4) < 0 <= scan.slope_at(4 * th)
        assert scan.T_hat is not None and abs(scan.T_hat - th) <= 0.35 * th
        assert scan.monotone
        assert scan.to_csv().splitlines()[0] == "a,T,k,log_obs_energy,log_final_energy,log_ratio"
        assert len(scan.rows) == 25

    def test_bad_k_list(self):
        with pytest.raises(ParameterError):
            tmin_scan(0.0, [8, 12, 10, 16, 20], [0.1, 0.2])
        with pytest.raises(ParameterError):
            tmin_scan(0.0, [8, 12], [0.1, 0.2])


class TestErrorBound:
    def test_single_constant(self):
        rep = error_bound_sweep(0.5, [8, 12, 16, 24, 32, 40], 0.1, grid_rule=lambda p: Grid1D(1000))
        assert rep.ok and rep.fitted_c > 0
        # decays at least as fast as e^{-k((1 - alpha)^2 - eps)/2}, eps = 0.05 (1 - alpha)^2
        assert rep.decay_rate <= 0.95 * rep.predicted_rate
        assert len(rep.rows) == 6


class TestUnbounded:
    def test_single_node_is_midpoint_mode(self):
        a, k, T = -0.5, 4, 0.05
        alpha = (1 - a) / 2
        u = unbounded_quasimode(a, k, T, 1, grid_rule=SMALL)
        (lo, lf), = _mode_log_energies(k, k / alpha + 0.5, a, [T], CutoffPair.for_region(a), Grid1D(400))
        assert u.log_ratio == pytest.approx(lo - lf, abs=1e-12)

    def test_refinement(self):
        u8 = unbounded_quasimode(0.0, 6, 0.1, 8, grid_rule=SMALL)
        u16 = unbounded_quasimode(0.0, 6, 0.1, 16, grid_rule=SMALL)
        assert math.exp(u8.log_obs_energy - u16.log_obs_energy) == pytest.approx(1, abs=1e-6)
        assert math.exp(u8.log_final_energy - u16.log_final_energy) == pytest.approx(1, abs=1e-6)
