import math

import numpy as np
import pytest

from heisenberg_obs.carleman import (
    _assemble,
    alpha_weight,
    build_corpus,
    build_weight,
    carleman_check,
    carleman_terms,
    certify_weight,
    identity_residual,
    m_param,
    make_element,
    p1_p2_split,
    z_transform,
)
from heisenberg_obs.errors import CertificationError, DomainError, ParameterError
from heisenberg_obs.mode_operator import Grid1D, ModeParams


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(40, seed=0)


@pytest.fixture(scope="module")
def weight():
    return build_weight(-0.5, 0.5)


class TestWeight:
    @pytest.mark.parametrize("ab", [(-0.5, 0.5), (-1.0, 1.0), (0.9, 1.0), (-1.0, -0.95), (0.0, 0.1)])
    def test_certified(self, ab):
        w = build_weight(*ab)
        cert = w.certification
        assert cert["certified"] and all(v >= 1e-3 for v in cert["margins"].values())
        assert w(1.0, 1) > 0 > w(-1.0, 1)
        x = np.linspace(-1, 1, 4001)
        assert w(x).min() >= 1.0

    def test_interior_minimum(self, weight):
        x = np.linspace(-1, 1, 4001)
        xm = x[np.argmin(weight(x))]
        assert weight.a_prime < xm < weight.b_prime

    @pytest.mark.parametrize("deriv", [0, 1, 2, 3])
    def test_c3_at_knots(self, deriv):
        w = build_weight(-0.3, 0.6)
        for k in (w.a_prime, w.b_prime):
            lo, hi = w(k - 1e-12, deriv), w(k + 1e-12, deriv)
            assert hi == pytest.approx(lo, rel=1e-6, abs=1e-6)

    def test_analytic_derivatives(self, weight):
        x, h = np.array([-0.8, -0.1, 0.2, 0.7]), 1e-5
        for d in (1, 2, 3):
            fd = (weight(x + h, d - 1) - weight(x - h, d - 1)) / (2 * h)
            np.testing.assert_allclose(weight(x, d), fd, rtol=1e-6, atol=1e-6)

    def test_retry_escalates(self):
        w = build_weight(-1.0, 1.0)
        assert w.certification["attempts"] == 2

    def test_retry_exhausted(self):
        with pytest.raises(CertificationError) as err:
            build_weight(-1.0, 1.0, dips=(0.5,))
        assert err.value.diagnostics["attempts"][0]["beta_ge_1"] < 1e-3

    def test_invalid_interval(self):
        with pytest.raises(ParameterError):
            build_weight(0.5, 0.5)

    def test_csv(self, weight):
        assert weight.to_csv(11).splitlines()[0] == "x,beta,beta_prime,beta_second"

    def test_uncertified_reported(self):
        cert = certify_weight(_assemble(-1.0, 1.0, 0.5))
        assert not cert["ok"]["beta_ge_1"] and cert["ok"]["beta_second_negative"]


class TestFormulas:
    @pytest.mark.parametrize("args,M", [((1, 1, 2, 3), 5), ((1, 1, 0, 0), 2), ((2, 1, 2, 3), 10),
                                        ((1, 0.5, -4, 1), 1.25)])
    def test_m_param(self, args, M):
        assert m_param(*args).M == pytest.approx(M, rel=1e-15)

    def test_alpha(self, weight):
        x = np.array([-0.7, 0.0, 0.4])
        np.testing.assert_allclose(alpha_weight(weight, 3.0, 0.5, 1.0, x), 12.0 * weight(x))
        np.testing.assert_allclose(alpha_weight(weight, 6.0, 0.5, 1.0, x),
                                   2 * alpha_weight(weight, 3.0, 0.5, 1.0, x))
        assert np.all(np.exp(-alpha_weight(weight, 1.0, 1 / 200, 1.0, x))
                      <= np.exp(-alpha_weight(weight, 1.0, 0.5, 1.0, x)))
        with pytest.raises(DomainError):
            alpha_weight(weight, 1.0, 0.0, 1.0, x)

    def test_alpha_partials(self, weight):
        x, t, h = np.array([-0.6, 0.1]), 0.3, 1e-6
        fd_t = (alpha_weight(weight, 2.0, t + h, 1.0, x) - alpha_weight(weight, 2.0, t - h, 1.0, x)) / (2 * h)
        np.testing.assert_allclose(alpha_weight(weight, 2.0, t, 1.0, x, "t"), fd_t, rtol=1e-6)

    def test_z_transform(self, weight):
        grid = Grid1D(50)
        times = np.array([1e-4, 0.5, 1 - 1e-4])
        g = np.ones((3, grid.size))
        z = z_transform(g, weight, 2.0, 1.0, times, grid)
        assert not np.any(z_transform(0 * g, weight, 2.0, 1.0, times, grid))
        assert np.all(z[0] == 0) and np.all(z[2] == 0)
        assert np.all(np.abs(z[1]) <= math.exp(-2.0 / 0.25))


def manufactured(m, nt, w, M=1.0, T=1.0, params=ModeParams(1, 2.0)):
    grid = Grid1D(m)
    x = grid.interior
    times = T * (np.arange(nt) + 0.5) / nt
    c = np.cos(np.pi * x / 2)
    g = (1 + times[:, None] ** 2) * c
    gt = 2 * times[:, None] * c
    Pg = gt + (np.pi / 2) ** 2 * g + params.potential(x)[None, :] * g
    return identity_residual(g, Pg, w, M, params, T, times, grid), (g, Pg, gt, times, grid, params)


class TestSplit:
    def test_identity_second_order(self, weight):
        errs = [manufactured(m, nt, weight)[0] for m, nt in ((50, 100), (100, 200), (200, 400))]
        assert errs[0] / errs[1] == pytest.approx(4, rel=0.15)
        assert errs[1] / errs[2] == pytest.approx(4, rel=0.15)

    def test_flat_alpha_region(self):
        # beta' = 0 makes alpha_x = 0, so P2 z = dz/dt
        w = build_weight(-0.5, 0.5)
        w.middle = np.zeros(8)
        w.middle[0] = 1.5
        w.dip = 0.0  # arms become the constant 2 with zero derivatives
        grid, times = Grid1D(30), np.linspace(0.1, 0.9, 9)
        z = np.random.default_rng(0).normal(size=(9, grid.size))
        zt = np.random.default_rng(1).normal(size=(9, grid.size))
        _, P2 = p1_p2_split(z, w, 1.0, ModeParams(0, 0.0), 1.0, times, grid, zt)
        np.testing.assert_array_equal(P2, zt)

    def test_homogeneous_solution(self, weight):
        grid = Grid1D(200)
        el = make_element(0, 1, 2.0, 1.0, grid, np.sin(np.pi * (grid.interior + 1) / 2), nodes=32)
        from heisenberg_obs.evolution import dt_g
        from heisenberg_obs.fourier_stack import ModeField

        gt = np.array([dt_g(el.params, ModeField(grid, gi)).values for gi in el.g])
        res = identity_residual(el.g, el.Pg, weight, 1.0, el.params, 1.0, el.times, grid, gt=gt)
        # Pg = 0 so this is an absolute residual; the weighted solution is O(e^-4)
        assert res < 1e-4


class TestCheck:
    def test_zero_element(self, weight):
        grid = Grid1D(60)
        el = make_element(0, 0, 0.0, 1.0, grid, np.zeros(grid.size), nodes=16)
        lhs, rhs, _ = carleman_terms(el, weight, 2.0, -0.5, 0.5)
        assert lhs == 0.0 and rhs == 0.0
        rep = carleman_check([el], -0.5, 0.5, weight)
        assert rep.C1 == 0.0 and not rep.violations

    def test_homogeneous_full_interval(self):
        grid = Grid1D(100)
        w = build_weight(-1.0, 1.0)
        els = [make_element(i, n, p, 1.0, grid, np.sin(np.pi * (grid.interior + 1) / 2), nodes=32)
               for i, (n, p) in enumerate([(0, 0.0), (2, 1.0), (1, 3.0)])]
        for el in els:
            lhs, rhs, _ = carleman_terms(el, w, m_param(1, 1.0, el.params.n, el.params.p).M, -1, 1)
            assert 0 < rhs <= lhs  # RHS is just the observation term, part of the LHS
        rep = carleman_check(els, -1.0, 1.0, w)
        assert rep.C1 > 0

    def test_scaling(self, corpus, weight):
        el = corpus[3]
        M = m_param(1, el.T, el.params.n, el.params.p).M
        l1, r1, s1 = carleman_terms(el, weight, M, -0.5, 0.5)
        l2, r2, s2 = carleman_terms(el.scaled(10.0), weight, M, -0.5, 0.5)
        assert s1 == s2
        assert l2 == pytest.approx(100 * l1, rel=1e-12) and r2 == pytest.approx(100 * r1, rel=1e-12)
        scaled = [e.scaled(10.0) for e in corpus]
        assert carleman_check(scaled, -0.5, 0.5, weight).C1 == pytest.approx(
            carleman_check(corpus, -0.5, 0.5, weight).C1, rel=1e-12)

    def test_corpus_certifies_held_out(self, corpus, weight):
        rep = carleman_check(corpus, -0.5, 0.5, weight, C2=1.0)
        assert rep.ok and len(rep.train_ids) == 20 and len(rep.held_ids) == 20
        assert set(rep.to_json()) >= {"C1", "weight_margins", "worst_element", "split_seed"}

    def test_time_quadrature_converged(self, weight):
        grid = Grid1D(100)
        g0 = np.sin(np.pi * (grid.interior + 1) / 2)
        a = carleman_terms(make_element(0, 3, 2.0, 1.0, grid, g0, nodes=64), weight, 5.0, -0.5, 0.5)
        b = carleman_terms(make_element(0, 3, 2.0, 1.0, grid, g0, nodes=128), weight, 5.0, -0.5, 0.5)
        assert a[0] == pytest.approx(b[0], rel=1e-8) and a[1] == pytest.approx(b[1], rel=1e-8)

    def test_larger_M_with_margin_fit(self, corpus, weight):
        # refitting with a safety factor keeps every held-out element certified as M grows
        for C2 in (1.0, 2.0, 4.0):
            assert carleman_check(corpus, -0.5, 0.5, weight, C2=C2, fit_mode="half-min").ok

    def test_large_M_representable(self, corpus, weight):
        rep = carleman_check(corpus, -0.5, 0.5, weight, C2=50.0, fit_mode="half-min")
        assert all(math.isfinite(r) and r > 0 for r in rep.ratios.values())

    def test_empty(self):
        with pytest.raises(ParameterError):
            carleman_check([], -0.5, 0.5)
