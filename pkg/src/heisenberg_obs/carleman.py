"""Carleman weights and a numerical check of the global Carleman estimate for a mode.

The weight ``beta`` is built from three pieces on ``[-1, a']``, ``[a', b']``
and ``[b', 1]``: two concave quadratic arms (so ``beta'' < 0`` there by
construction) joined by a degree-7 Hermite piece that matches value and
three derivatives at both knots, which makes ``beta`` globally C^3.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificationError, DomainError, ParameterError
from .evolution import SourceSpec, evolve_mode
from .mode_operator import Grid1D, ModeParams

ALPHA_FLUSH = 700.0
DEFAULT_DIPS = (0.5, 0.35, 0.25, 0.15, 0.1, 0.06, 0.035, 0.02, 0.012)


def _septic_hermite(h: float, left, right) -> np.ndarray:
    """Coefficients (ascending powers of ``u = x - x0``) matching
    ``(f, f', f'', f''')`` at ``u = 0`` and ``u = h``."""
    A = np.zeros((8, 8))
    rhs = np.concatenate([left, right]).astype(float)
    for d in range(4):
        A[d, d] = math.factorial(d)
        for k in range(d, 8):
            A[4 + d, k] = math.factorial(k) / math.factorial(k - d) * h ** (k - d)
    return np.linalg.solve(A, rhs)


@dataclass
class CarlemanWeight:
    a: float
    b: float
    a_prime: float
    b_prime: float
    dip: float
    middle: np.ndarray
    certification: dict = field(default_factory=dict)

    @property
    def level(self) -> float:
        """Value ``1 + delta`` of ``beta`` at ``a'`` and ``b'``."""
        return 2.0 - self.dip

    def _arms(self, x, deriv):
        D, L, R = self.dip, self.a_prime + 1.0, 1.0 - self.b_prime
        u, v = x + 1.0, 1.0 - x
        if deriv == 0:
            left = 2.0 - D / (2 * L) * u - D / (2 * L * L) * u * u
            right = 2.0 - D / (2 * R) * v - D / (2 * R * R) * v * v
        elif deriv == 1:
            left = -D / (2 * L) - D / (L * L) * u
            right = D / (2 * R) + D / (R * R) * v
        elif deriv == 2:
            left = np.full_like(x, -D / (L * L))
            right = np.full_like(x, -D / (R * R))
        else:
            left = right = np.zeros_like(x)
        return left, right

    def __call__(self, x, deriv: int = 0):
        """``beta`` or its derivative of order ``deriv <= 3``."""
        if deriv not in (0, 1, 2, 3):
            raise ParameterError("deriv must be 0..3")
        x = np.asarray(x, dtype=float)
        left, right = self._arms(x, deriv)
        c = np.polynomial.polynomial.polyder(self.middle, deriv) if deriv else self.middle
        mid = np.polynomial.polynomial.polyval(x - self.a_prime, c)
        return np.where(x <= self.a_prime, left, np.where(x >= self.b_prime, right, mid))

    def to_csv(self, samples: int = 201) -> str:
        x = np.linspace(-1, 1, samples)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "beta", "beta_prime", "beta_second"])
        for row in zip(x, self(x), self(x, 1), self(x, 2)):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _assemble(a, b, dip) -> CarlemanWeight:
    ap, bp = a + (b - a) / 4, b - (b - a) / 4
    L, R = ap + 1.0, 1.0 - bp
    lvl = 2.0 - dip
    left = [lvl, -3 * dip / (2 * L), -dip / (L * L), 0.0]
    right = [lvl, 3 * dip / (2 * R), -dip / (R * R), 0.0]
    return CarlemanWeight(a, b, ap, bp, dip, _septic_hermite(bp - ap, left, right))


def certify_weight(w: CarlemanWeight, samples: int = 10_000, margin: float = 1e-3) -> dict:
    """Check the four weight hypotheses on a uniform sample; margins are reported."""
    x = np.linspace(-1.0, 1.0, samples)
    arms = (x <= w.a_prime) | (x >= w.b_prime)
    beta, d1, d2 = w(x), w(x, 1), w(x, 2)
    m = {
        "beta_ge_1": float(beta.min() - 1.0),
        "beta_prime_nonzero": float(np.abs(d1[arms]).min()),
        "beta_prime_ends": float(min(w(1.0, 1), -w(-1.0, 1))),
        "beta_second_negative": float(-d2[arms].max()),
    }
    return {"margins": m, "ok": {k: v >= margin for k, v in m.items()},
            "certified": all(v >= margin for v in m.values()), "samples": samples,
            "margin": margin}


def build_weight(a: float, b: float, dips=DEFAULT_DIPS, samples: int = 10_000,
                 margin: float = 1e-3) -> CarlemanWeight:
    """Certified weight for the observation interval ``(a, b)``.

    Each retry lowers the dip ``beta(+-1) - beta(a')``, which flattens the
    middle piece; up to eight retries follow the first attempt.
    """
    if not -1.0 <= a < b <= 1.0:
        raise ParameterError(f"need -1 <= a < b <= 1, got ({a}, {b})")
    attempts = []
    for dip in dips:
        w = _assemble(a, b, dip)
        cert = certify_weight(w, samples, margin)
        attempts.append({"dip": dip, **cert["margins"]})
        if cert["certified"]:
            w.certification = {**cert, "attempts": len(attempts)}
            return w
    raise CertificationError("no certified weight after retries", {"attempts": attempts})


@dataclass(frozen=True)
class CarlemanParams:
    M: float
    C2: float
    T: float
    n: int
    p: float


def m_param(C2: float, T: float, n: int, p: float) -> CarlemanParams:
    if not (C2 > 0 and T > 0):
        raise ParameterError("C2 and T must be positive")
    return CarlemanParams(C2 * max(T + T * T, (abs(n) + p) * T * T), C2, T, n, p)


def _check_times(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t >= T):
        raise DomainError("times must lie strictly inside (0, T)")
    return t


def alpha_weight(w: CarlemanWeight, M: float, t, T: float, x, deriv: str = ""):
    """``alpha = M beta(x) / (t (T - t))`` or one of its partials ``'t'``, ``'x'``, ``'xx'``.

    ``t`` and ``x`` broadcast against each other.
    """
    t = _check_times(t, T)
    s = t * (T - t)
    if deriv == "":
        return M * w(x) / s
    if deriv == "t":
        return -M * w(x) * (T - 2 * t) / s**2
    if deriv == "x":
        return M * w(x, 1) / s
    if deriv == "xx":
        return M * w(x, 2) / s
    raise ParameterError(f"unknown derivative {deriv!r}")


def _decay(alpha):
    return np.where(alpha > ALPHA_FLUSH, 0.0, np.exp(-np.minimum(alpha, ALPHA_FLUSH)))


def z_transform(g, w: CarlemanWeight, M: float, T: float, times, grid: Grid1D):
    """``z = g e^{-alpha}`` on ``times x grid.interior``; ``alpha > 700`` flushes to 0."""
    times = _check_times(times, T)
    al = alpha_weight(w, M, times[:, None], T, grid.interior[None, :])
    return np.asarray(g) * _decay(al)


def _dx(z, dx):
    """Central first difference with zero boundary values."""
    zp = np.pad(z, [(0, 0), (1, 1)])
    return (zp[:, 2:] - zp[:, :-2]) / (2 * dx)


def _dxx(z, dx):
    zp = np.pad(z, [(0, 0), (1, 1)])
    return (zp[:, 2:] - 2 * z + zp[:, :-2]) / dx**2


def p1_p2_split(z, w: CarlemanWeight, M: float, params: ModeParams, T: float, times,
                grid: Grid1D, zt=None):
    """``(P1 z, P2 z)`` with discrete x-derivatives and analytic alpha derivatives.

    ``zt`` defaults to a second-order finite difference in time on ``times``.
    """
    times = _check_times(times, T)
    z = np.asarray(z)
    x = grid.interior[None, :]
    tt = times[:, None]
    if zt is None:
        zt = np.gradient(z, times, axis=0, edge_order=2)
    a_t = alpha_weight(w, M, tt, T, x, "t")
    a_x = alpha_weight(w, M, tt, T, x, "x")
    a_xx = alpha_weight(w, M, tt, T, x, "xx")
    V = params.potential(grid.interior)[None, :]
    P1 = -_dxx(z, grid.dx) + (a_t - a_x**2 - a_xx) * z + V * z
    P2 = zt - 2 * a_x * _dx(z, grid.dx)
    return P1, P2


def identity_residual(g, Pg, w, M, params, T, times, grid, gt=None) -> float:
    """``max |e^{-alpha} P g - (P1 z + P2 z)| / max |e^{-alpha} P g|`` (or absolute if that is 0)."""
    times = _check_times(times, T)
    al = alpha_weight(w, M, times[:, None], T, grid.interior[None, :])
    e = _decay(al)
    z = np.asarray(g) * e
    zt = None
    if gt is not None:
        zt = (np.asarray(gt) - alpha_weight(w, M, times[:, None], T, grid.interior[None, :], "t")
              * np.asarray(g)) * e
    P1, P2 = p1_p2_split(z, w, M, params, T, times, grid, zt)
    lhs = np.asarray(Pg) * e
    scale = np.max(np.abs(lhs))
    err = np.max(np.abs(lhs - P1 - P2))
    return float(err / scale) if scale > 0 else float(err)


@dataclass
class CorpusElement:
    """A mode solution sampled at Gauss-Legendre times in ``(0, T)``."""

    id: int
    params: ModeParams
    T: float
    grid: Grid1D
    times: np.ndarray
    weights: np.ndarray
    g: np.ndarray
    Pg: np.ndarray

    def scaled(self, c: float) -> "CorpusElement":
        return CorpusElement(self.id, self.params, self.T, self.grid, self.times, self.weights,
                             c * self.g, c * self.Pg)


def gauss_times(T: float, nodes: int):
    x, wt = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * T * (x + 1.0), 0.5 * T * wt


def make_element(id_, n, p, T, grid, g0, h0=None, h1=None, nodes=64) -> CorpusElement:
    """Solve ``P g = h0 + t h1`` from ``g0``; linear-in-time sources are represented exactly."""
    params = ModeParams(int(n), float(p))
    times, wt = gauss_times(T, nodes)
    src = None
    h0 = np.zeros(grid.size) if h0 is None else np.asarray(h0, dtype=float)
    h1 = np.zeros(grid.size) if h1 is None else np.asarray(h1, dtype=float)
    if np.any(h0) or np.any(h1):
        src = SourceSpec.general(lambda t: h0 + t * h1, samples=3)
    g = evolve_mode(params, g0, src, T, output_times=times, grid=grid).states
    Pg = h0[None, :] + times[:, None] * h1[None, :]
    return CorpusElement(id_, params, T, grid, times, wt, np.real_if_close(g), Pg)


def build_corpus(size: int = 40, n_values=range(9), p_values=range(9), T_values=(0.5, 1.0, 2.0),
                 m: int = 200, nodes: int = 64, seed: int = 0, source_fraction: float = 0.5):
    """Seeded random corpus: smooth random initial data, half of it with a random source."""
    rng = np.random.default_rng(seed)
    grid = Grid1D(m)
    x = grid.interior
    combos = [(n, p, T) for n in n_values for p in p_values for T in T_values]
    picks = rng.choice(len(combos), size=size, replace=size > len(combos))
    out = []
    basis = np.array([np.sin(j * np.pi * (x + 1) / 2) for j in range(1, 7)])
    for i, idx in enumerate(picks):
        n, p, T = combos[int(idx)]
        g0 = rng.normal(size=6) / np.arange(1, 7) @ basis
        h0 = h1 = None
        if rng.random() < source_fraction:
            h0 = rng.normal(size=6) @ basis
            h1 = rng.normal(size=6) @ basis / T
        out.append(make_element(i, n, p, T, grid, g0, h0, h1, nodes))
    return out


def carleman_terms(el: CorpusElement, w: CarlemanWeight, M: float, a: float, b: float):
    """``(LHS with C1 = 1, RHS, log_scale)`` of the Carleman inequality for one element.

    Both sides are multiplied by ``e^{log_scale}``, the inverse of the largest
    possible weight ``e^{-4 M min(beta) / T^2}``, so they stay representable
    for large ``M``; the inequality is unchanged.
    """
    g, grid = np.asarray(el.g), el.grid
    s = el.times * (el.T - el.times)
    x = grid.interior
    xm = grid.nodes[:-1] + grid.dx / 2
    shift = 4.0 * M * float(min(w(x).min(), w(xm).min())) / el.T**2
    e_nodes = _decay(M * w(x)[None, :] / s[:, None] - shift)
    e_mid = _decay(M * w(xm)[None, :] / s[:, None] - shift)
    gp = np.pad(g, [(0, 0), (1, 1)])
    grad2 = np.abs(np.diff(gp, axis=1) / grid.dx) ** 2
    sigma = (M / s)
    dx_term = sigma * grid.dx * np.sum(grad2 * e_mid, axis=1)
    g2e = np.abs(g) ** 2 * e_nodes
    zero_term = sigma**3 * grid.dx * np.sum(g2e, axis=1)
    lhs = float(el.weights @ (dx_term + zero_term))
    src = grid.dx * np.sum(np.abs(el.Pg) ** 2 * e_nodes, axis=1)
    obs = sigma**3 * (g2e @ grid.interval_weights(a, b))
    rhs = float(el.weights @ (src + obs))
    return lhs, rhs, shift


@dataclass
class CarlemanReport:
    C1: float
    C2: float
    seed: int
    train_ids: list
    held_ids: list
    ratios: dict
    violations: list
    worst_element: int | None
    weight_margins: dict
    fit_mode: str

    @property
    def ok(self) -> bool:
        return self.C1 > 0 and not self.violations

    def to_json(self) -> dict:
        return {
            "C1": self.C1, "C2": self.C2, "split_seed": self.seed, "fit_mode": self.fit_mode,
            "train_ids": self.train_ids, "held_out_ids": self.held_ids,
            "violations": self.violations, "worst_element": self.worst_element,
            "weight_margins": self.weight_margins, "corpus_size": len(self.ratios),
        }


def carleman_check(corpus, a: float, b: float, w: CarlemanWeight | None = None, C2: float = 1.0,
                   fit_mode: str = "min", seed: int = 0, slack: float = 1e-6) -> CarlemanReport:
    """Fit ``C1`` on a 50/50 training split and verify ``C1 LHS <= RHS (1 + slack)`` on the rest.

    ``fit_mode='min'`` takes the smallest training ratio ``RHS/LHS``;
    ``'half-min'`` takes half of it.  Elements with ``LHS = 0`` (``g = 0``)
    pass trivially and do not enter the fit.
    """
    if not corpus:
        raise ParameterError("corpus is empty")
    if fit_mode not in ("min", "half-min"):
        raise ParameterError(f"unknown fit mode {fit_mode!r}")
    w = w or build_weight(a, b)
    terms = {}
    for el in corpus:
        M = m_param(C2, el.T, el.params.n, el.params.p).M
        terms[el.id] = carleman_terms(el, w, M, a, b)
    ids = [el.id for el in corpus]
    perm = np.random.default_rng(seed).permutation(len(ids))
    half = len(ids) // 2 if len(ids) > 1 else 1
    train = sorted(ids[i] for i in perm[:half])
    held = sorted(ids[i] for i in perm[half:])
    ratios = {i: (r / l if l > 0 else math.inf) for i, (l, r, _) in terms.items()}
    fin = [(ratios[i], i) for i in train if math.isfinite(ratios[i])]
    if not fin:
        C1, worst = 0.0, None
    else:
        C1, worst = min(fin)  # ties resolve to the smaller id
        if fit_mode == "half-min":
            C1 *= 0.5
    violations = []
    for i in held:
        l, r, sh = terms[i]
        if C1 * l > r * (1 + slack):
            violations.append({"id": i, "lhs": l, "rhs": r, "log_scale": sh, "ratio": ratios[i]})
    if violations:
        worst = min(violations, key=lambda v: v["ratio"])["id"]
    return CarlemanReport(C1, C2, seed, train, held, ratios, violations, worst,
                          w.certification.get("margins", {}), fit_mode)
