"""Observability constants on truncated spaces and the spectral inequality in y.

Every constant is the largest eigenvalue of a pencil ``(Q_N, Q_D)`` where
``Q_N`` is the final-time energy and ``Q_D`` the space-time energy seen by the
observation region.  On eigenfunction bases both forms are explicit: time
integrals of ``exp(-(lam_i + lam_j) t)`` are done in closed form, x integrals
use the exact piecewise-linear quadrature of the grid, and y integrals use the
analytic Gram matrix of ``exp(i k y)`` over the observation arcs.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import mpmath
import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog, nnls

from .errors import ConditioningError, DegenerateInputError, ParameterError
from .fourier_stack import ModeField
from .mode_operator import Grid1D, ModeParams, eigensystem

TWO_PI = 2.0 * math.pi
FULL_TORUS = ((-math.pi, math.pi),)


@dataclass(frozen=True)
class ObservationRegion:
    """``(a, b) x (union of y arcs) x T``; ``y_arcs=None`` means the full torus."""

    a: float = -1.0
    b: float = 1.0
    y_arcs: tuple | None = None

    def __post_init__(self):
        if not -1.0 <= self.a < self.b <= 1.0:
            raise ParameterError(f"need -1 <= a < b <= 1, got ({self.a}, {self.b})")
        arcs = FULL_TORUS if self.y_arcs is None else tuple(
            (float(c), float(d)) for c, d in self.y_arcs
        )
        if not arcs:
            raise ParameterError("at least one y arc is required")
        arcs = tuple(sorted(arcs))
        for c, d in arcs:
            if not -math.pi <= c < d <= math.pi:
                raise ParameterError(f"arc ({c}, {d}) must satisfy -pi <= c < d <= pi")
        for (_, d0), (c1, _) in zip(arcs, arcs[1:]):
            if c1 < d0:
                raise ParameterError("y arcs overlap")
        object.__setattr__(self, "y_arcs", arcs)

    @property
    def arc_length(self) -> float:
        return sum(d - c for c, d in self.y_arcs)

    @property
    def full_torus(self) -> bool:
        return abs(self.arc_length - TWO_PI) < 1e-14


def arc_gram(arcs, N: int) -> np.ndarray:
    """Hermitian Gram ``G[m, n] = sum_arcs int exp(i (n - m) y) dy`` for ``|m|, |n| <= N``.

    With this ordering ``int_arcs |sum_n b_n e^{iny}|^2 dy = b^H G b``.
    """
    k = np.arange(-N, N + 1)
    diff = k[None, :] - k[:, None]
    G = np.zeros(diff.shape, complex)
    nz = diff != 0
    for c, d in arcs:
        G[~nz] += d - c
        G[nz] += (np.exp(1j * diff[nz] * d) - np.exp(1j * diff[nz] * c)) / (1j * diff[nz])
    return G


def _arc_gram_mp(arcs, N: int):
    I = mpmath.mpc(0, 1)
    size = 2 * N + 1
    G = mpmath.matrix(size, size)
    for r in range(size):
        for s in range(size):
            kk = s - r
            acc = mpmath.mpc(0)
            for c, d in arcs:
                c, d = mpmath.mpf(c), mpmath.mpf(d)
                acc += (d - c) if kk == 0 else (mpmath.exp(I * kk * d) - mpmath.exp(I * kk * c)) / (I * kk)
            G[r, s] = acc
    return G


@dataclass(frozen=True)
class SpectralInequality:
    N: int
    sigma_min: float
    implied_constant: float
    refined: bool


def spectral_inequality_constant(y_arcs, N: int, refine_below: float = 1e-8,
                                 dps: int = 50) -> SpectralInequality:
    """Smallest eigenvalue of the arc Gram and ``1 / sqrt(sigma_min)``.

    Gram matrices of short arcs are exponentially ill-conditioned in ``N``;
    when ``sigma_min / trace`` drops below ``refine_below`` it is recomputed
    in extended precision so that the double-precision floor does not
    masquerade as a saturating spectral constant.
    """
    if N < 0:
        raise ParameterError("N must be nonnegative")
    arcs = ObservationRegion(y_arcs=y_arcs).y_arcs
    G = arc_gram(arcs, N)
    sigma = float(sla.eigvalsh(G)[0])
    refined = False
    if sigma < refine_below * G.shape[0] * G[0, 0].real:
        with mpmath.workdps(dps):
            ev = mpmath.eighe(_arc_gram_mp(arcs, N), eigvals_only=True)
            sigma = float(min(ev))
        refined = True
    return SpectralInequality(N, sigma, 1.0 / math.sqrt(sigma), refined)


def pair_time_integral(mu, t0: float, t1: float) -> np.ndarray:
    """``int_{t0}^{t1} exp(-mu t) dt`` elementwise, stable for small ``mu``."""
    mu = np.asarray(mu, dtype=float)
    span = t1 - t0
    safe = np.where(mu == 0, 1.0, mu)
    val = np.exp(-safe * t0) * (-np.expm1(-safe * span)) / safe
    return np.where(mu == 0, span, val)


def gauss_legendre_time_integral(mu, t0: float, t1: float, nodes: int) -> np.ndarray:
    """Gauss-Legendre approximation of :func:`pair_time_integral`."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * (t1 - t0) * (x + 1) + t0
    mu = np.asarray(mu, dtype=float)
    return 0.5 * (t1 - t0) * np.tensordot(np.exp(-np.multiply.outer(mu, t)), w, axes=1)


def _time_matrix(mu, t0, t1, time_nodes):
    if time_nodes is None:
        return pair_time_integral(mu, t0, t1)
    prev = gauss_legendre_time_integral(mu, t0, t1, time_nodes)
    nodes = time_nodes
    while nodes < 4096:
        nodes *= 2
        cur = gauss_legendre_time_integral(mu, t0, t1, nodes)
        if np.max(np.abs(cur - prev)) <= 1e-8 * np.max(np.abs(cur)):
            return cur
        prev = cur
    return prev


def observation_energy(es, coeffs, a: float, b: float, t0: float, t1: float,
                       rel_cut: float = 1e-13, time_nodes: int | None = None) -> float:
    """``int_{t0}^{t1} int_a^b |sum_k c_k e^{-lam_k t} v_k(x)|^2 dx dt``.

    Coefficients below ``rel_cut`` times the largest are dropped, which keeps
    localized data (few significant modes) cheap on fine grids.
    """
    coeffs = np.asarray(coeffs)
    mag = np.abs(coeffs)
    if not np.any(mag):
        return 0.0
    keep = mag >= rel_cut * mag.max()
    c = coeffs[keep]
    lam = es.eigenvalues[keep]
    V = es.eigenvectors[:, keep]
    W = (V * es.grid.interval_weights(a, b)[:, None]).T @ V
    E = _time_matrix(lam[:, None] + lam[None, :], t0, t1, time_nodes)
    return float(np.real(np.conj(c) @ (W * E) @ c))


def mode_obs_quotient(params: ModeParams, g0, region, T: float,
                      grid: Grid1D | None = None, time_nodes: int | None = None) -> float:
    """``||g(T)||^2 / int_0^T int_a^b |g|^2`` for the homogeneous mode equation."""
    if isinstance(g0, ModeField):
        grid, g0 = g0.grid, g0.values
    if grid is None:
        raise ParameterError("grid is required when g0 is a plain array")
    a, b = (region.a, region.b) if isinstance(region, ObservationRegion) else region
    es = eigensystem(params, grid)
    c = es.project(np.asarray(g0, dtype=complex))
    num = float(np.sum(np.abs(c) ** 2 * np.exp(-2 * es.eigenvalues * T)))
    den = observation_energy(es, c, a, b, 0.0, T, time_nodes=time_nodes)
    if den <= 0.0:
        raise DegenerateInputError("observation energy vanishes (zero solution)")
    return num / den


@dataclass
class ObsConstantResult:
    value: float
    conditioning: float
    truncation: dict
    jitter: float
    argmax: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _largest_pencil_eigenvalue(QN, QD, diagnostics):
    """Largest ``mu`` with ``QN x = mu QD x``; jitter only if Cholesky fails."""
    dim = QD.shape[0]
    scale = float(np.real(np.trace(QD))) / dim
    conditioning = float(sla.eigvalsh(QD)[0])
    for jitter in (0.0, 1e-12 * scale, 1e-10 * scale, 1e-8 * scale):
        Qj = QD + jitter * np.eye(dim)
        try:
            L = sla.cholesky(Qj, lower=True)
        except sla.LinAlgError:
            continue
        Li = sla.solve_triangular(L, np.eye(dim), lower=True)
        S = Li @ QN @ Li.conj().T
        S = 0.5 * (S + S.conj().T)
        w, v = sla.eigh(S)
        x = sla.solve_triangular(L.conj().T, v[:, -1], lower=False)
        return float(w[-1]), conditioning, jitter, x
    raise ConditioningError(
        "observation form is numerically indefinite after maximal jitter",
        dict(diagnostics, smallest_eigenvalue=conditioning, trace_scale=scale),
    )


def _mode_basis(params, grid, K_x):
    es = eigensystem(params, grid)
    k = min(K_x, grid.size)
    return es.eigenvalues[:k], es.eigenvectors[:, :k]


def obs_constant_truncated(region: ObservationRegion, T: float, N: int, P: int,
                           grid: Grid1D, K_x: int = 24, time_nodes: int | None = None,
                           z_length: float = TWO_PI) -> ObsConstantResult:
    """Observability constant of the truncated 3D problem.

    The space is spanned by the ``K_x`` lowest eigenfunctions of every mode
    ``|n| <= N``, ``|k| <= P``.  z integration is diagonal in ``p`` so the
    pencil splits into one block per ``p``; the constant is the largest
    block eigenvalue.
    """
    if N < 0 or P < 0 or K_x < 1:
        raise ParameterError("need N, P >= 0 and K_x >= 1")
    if not T > 0:
        raise ParameterError("T must be positive")
    G = arc_gram(region.y_arcs, N)
    w_x = grid.interval_weights(region.a, region.b)
    best = (-math.inf, math.inf, 0.0, {})
    for kz in range(-P, P + 1):
        p = kz * TWO_PI / z_length
        lams, vecs = zip(*(_mode_basis(ModeParams(n, p), grid, K_x) for n in range(-N, N + 1)))
        lam = np.concatenate(lams)
        V = np.concatenate(vecs, axis=1)
        sizes = [len(l) for l in lams]
        owner = np.repeat(np.arange(2 * N + 1), sizes)
        Wx = (V * w_x[:, None]).T @ V
        Et = _time_matrix(lam[:, None] + lam[None, :], 0.0, T, time_nodes)
        QD = z_length * G[np.ix_(owner, owner)] * Wx * Et
        QN = np.diag(TWO_PI * z_length * np.exp(-2 * lam * T)).astype(complex)
        val, cond, jit, _ = _largest_pencil_eigenvalue(QN, QD, {"p": p, "T": T})
        if val > best[0]:
            best = (val, min(cond, best[1]), max(jit, best[2]), {"p": p})
        else:
            best = (best[0], min(cond, best[1]), max(jit, best[2]), best[3])
    truncation = {"N": N, "P": P, "m": grid.m, "K_x": K_x,
                  "time_nodes": "exact" if time_nodes is None else time_nodes}
    return ObsConstantResult(best[0], best[1], truncation, best[2], best[3])


def mode_obs_constant(params: ModeParams, a: float, b: float, T: float, grid: Grid1D,
                      K_x: int = 24, time_nodes: int | None = None) -> float:
    """Mode-level constant ``kappa_{n,p}(T)``: sup of the quotient over the
    span of the ``K_x`` lowest eigenfunctions."""
    lam, V = _mode_basis(params, grid, K_x)
    Wx = (V * grid.interval_weights(a, b)[:, None]).T @ V
    QD = Wx * _time_matrix(lam[:, None] + lam[None, :], 0.0, T, time_nodes)
    QN = np.diag(np.exp(-2 * lam * T))
    val, *_ = _largest_pencil_eigenvalue(QN, QD, {"n": params.n, "p": params.p, "T": T})
    return val


@dataclass
class EnvelopeFit:
    c3: float
    c4: float
    feasible: bool
    max_residual: float
    lsq_coefficients: tuple
    lsq_rms: float
    violations: list
    branch_n2: dict
    table: list = field(repr=False)

    @property
    def C4_ratio(self) -> float:
        """Decay constant in the normalized form ``c3 (1 + 1/T + |p| - C4 min(|p|, p^2) T)``."""
        return self.c4 / self.c3 if self.c3 > 0 else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "p", "T", "kappa", "log_kappa"])
        for row in self.table:
            w.writerow([row["n"], row["p"], row["T"], repr(row["kappa"]), repr(row["log_kappa"])])
        return buf.getvalue()

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "table"}
        d["C4_ratio"] = self.C4_ratio
        return d


def _envelope_lp(F, y):
    """Tightest L1 envelope ``F @ c >= y`` with ``c >= 0``."""
    res = linprog(
        c=F.sum(axis=0), A_ub=-F, b_ub=-y, bounds=[(0, None)] * F.shape[1], method="highs"
    )
    return res


def fit_observability_envelope(a: float, b: float, T, sweep, grid: Grid1D,
                               K_x: int = 24, tol: float = 1e-9) -> EnvelopeFit:
    """Fit ``log kappa_{n,p}(T) <= c3 (1 + 1/T + |p|) - c4 min(|p|, p^2) T``.

    ``T`` may be a scalar or a list of horizons.  The envelope is the
    tightest (L1) majorant with nonnegative constants, found by linear
    programming; an ordinary nonnegative least-squares fit is reported
    alongside.  ``feasible`` means a majorant with ``c4 > 0`` exists.  The
    ``|n| > 2|p|`` modes are also fitted against ``c3 (1 + 1/T) - c4 n^2 T``.
    """
    Ts = np.atleast_1d(np.asarray(T, dtype=float))
    sweep = list(sweep)
    if not sweep or np.any(Ts <= 0):
        raise ParameterError("sweep must be nonempty and T positive")
    table = []
    for t in Ts:
        for n, p in sweep:
            kappa = mode_obs_constant(ModeParams(n, p), a, b, float(t), grid, K_x)
            table.append({"n": int(n), "p": float(p), "T": float(t),
                          "kappa": kappa, "log_kappa": math.log(kappa)})
    n_arr = np.array([r["n"] for r in table], dtype=float)
    p_arr = np.abs(np.array([r["p"] for r in table]))
    t_arr = np.array([r["T"] for r in table])
    y = np.array([r["log_kappa"] for r in table])
    F = np.column_stack([1 + 1 / t_arr + p_arr, -np.minimum(p_arr, p_arr**2) * t_arr])

    res = _envelope_lp(F, y)
    c3, c4 = (float(v) for v in res.x) if res.success else (math.nan, math.nan)
    resid = y - F @ np.array([c3, c4])
    violations = [table[i] for i in np.flatnonzero(resid > tol * (1 + abs(y)))]
    feasible = bool(res.success and c4 > 0 and not violations)
    coef, rnorm = nnls(F, y) if np.all(np.isfinite(F)) else (np.full(2, np.nan), np.nan)

    branch = {"count": 0}
    mask = np.abs(n_arr) > 2 * p_arr
    if mask.sum() >= 2:
        Fb = np.column_stack([1 + 1 / t_arr[mask], -(n_arr[mask] ** 2) * t_arr[mask]])
        rb = _envelope_lp(Fb, y[mask])
        ok = bool(rb.success and rb.x[1] > 0)
        branch = {"count": int(mask.sum()), "feasible": ok,
                  "c3": float(rb.x[0]) if rb.success else math.nan,
                  "c4": float(rb.x[1]) if rb.success else math.nan}
    return EnvelopeFit(c3, c4, feasible, float(resid.max()), tuple(float(v) for v in coef),
                       float(rnorm / math.sqrt(len(y))), violations, branch, table)
