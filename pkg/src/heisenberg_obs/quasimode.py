"""Gaussian quasi-modes and the small-time non-observability scan.

For a mode ``(n, p)`` with ``p > 0`` the function

    K(t, x) = p^{1/4} { G(sqrt(p)(x + n/p)) - sum_s G(sqrt(p)(s + n/p)) theta_s(x) } e^{-pt}

vanishes at ``x = +-1`` and solves the mode equation up to a forcing ``E``
that is exponentially small when the Gaussian centre ``-n/p`` sits inside
``(-1, 1)``.  Choosing ``(n, p) = ([alpha k], k)`` with ``alpha = (1 - a)/2``
puts the centre at the same distance from ``a`` and from ``-1``, which makes
the observation ``(a, 1)`` lose against the final energy when ``T`` is small.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ParameterError
from .evolution import Trajectory, evolve_mode
from .mode_operator import Grid1D, ModeParams, assemble_operator, eigensystem
from .observability import observation_energy

# exp(-700) is close to the smallest normal double; everything below is flushed
GAUSS_FLUSH = 700.0
PI_M14 = math.pi ** -0.25


def gaussian_G(x, deriv: int = 0):
    """``G(x) = pi^{-1/4} e^{-x^2/2}`` or its first/second derivative."""
    x = np.asarray(x, dtype=float)
    e = 0.5 * x * x
    g = np.where(e > GAUSS_FLUSH, 0.0, PI_M14 * np.exp(-np.minimum(e, GAUSS_FLUSH)))
    if deriv == 0:
        return g
    if deriv == 1:
        return -x * g
    if deriv == 2:
        return (x * x - 1.0) * g
    raise ParameterError("deriv must be 0, 1 or 2")


_RAMP_LO, _RAMP_HI = 0.002, 0.998


def smooth_ramp(s, deriv: int = 0):
    """C-infinity step, 0 for ``s <= 0`` and 1 for ``s >= 1``.

    ``ramp(s) = expit(1/(1-s) - 1/s)`` inside ``(0, 1)``.  Within 0.002 of
    the ends it differs from 0 or 1 by less than ``e^{-495}`` and is set
    to the end value, so the endpoint identities are exact.
    """
    s = np.asarray(s, dtype=float)
    inner = (s > _RAMP_LO) & (s < _RAMP_HI)
    si = np.where(inner, s, 0.5)
    u = 1.0 / (1.0 - si) - 1.0 / si
    r = expit(u)
    if deriv == 0:
        return np.where(inner, r, np.where(s >= _RAMP_HI, 1.0, 0.0))
    du = 1.0 / (1.0 - si) ** 2 + 1.0 / si**2
    rr = r * (1.0 - r)
    if deriv == 1:
        return np.where(inner, rr * du, 0.0)
    if deriv == 2:
        d2u = 2.0 / (1.0 - si) ** 3 - 2.0 / si**3
        return np.where(inner, rr * ((1.0 - 2.0 * r) * du * du + d2u), 0.0)
    raise ParameterError("deriv must be 0, 1 or 2")


@dataclass(frozen=True)
class CutoffPair:
    """``theta_+`` rises from 0 at ``plus_edge`` to 1 at ``x = 1``;
    ``theta_-`` falls from 1 at ``x = -1`` to 0 at ``minus_edge``.

    ``theta_-`` vanishes on ``[minus_edge, 1]``, so the support condition
    against an observation set ``(a, 1)`` is ``minus_edge <= a``.
    """

    minus_edge: float = 0.0
    plus_edge: float = 0.0

    def __post_init__(self):
        for e in (self.minus_edge, self.plus_edge):
            if not -1.0 < e < 1.0:
                raise ParameterError(f"cutoff edges must lie in (-1, 1), got {e}")

    @classmethod
    def for_region(cls, a: float) -> "CutoffPair":
        return cls(minus_edge=a, plus_edge=a)

    def theta(self, sigma: int, x, deriv: int = 0):
        x = np.asarray(x, dtype=float)
        if sigma == 1:
            w = 1.0 - self.plus_edge
            return smooth_ramp((x - self.plus_edge) / w, deriv) / w**deriv
        if sigma == -1:
            w = self.minus_edge + 1.0
            return smooth_ramp((self.minus_edge - x) / w, deriv) * (-1.0 / w) ** deriv
        raise ParameterError("sigma must be +1 or -1")

    def supports_region(self, a: float) -> bool:
        return self.minus_edge <= a


def _scaled_arg(x, n, p):
    return math.sqrt(p) * (np.asarray(x, dtype=float) + n / p)


@dataclass
class QuasiMode:
    params: ModeParams
    cutoffs: CutoffPair
    T: float
    grid: Grid1D
    amplitudes: dict = field(init=False)

    def __post_init__(self):
        n, p = self.params.n, self.params.p
        # same expression as in K so the boundary cancellation is exact
        self.amplitudes = {s: float(gaussian_G(_scaled_arg(float(s), n, p))) for s in (-1, 1)}
        self._traj = None

    @property
    def center(self) -> float:
        return -self.params.n / self.params.p

    def K(self, t: float, x=None):
        """Closed-form ``K_{n,p}(t, x)``; defaults to the interior grid nodes."""
        n, p = self.params.n, self.params.p
        x = self.grid.interior if x is None else np.asarray(x, dtype=float)
        body = gaussian_G(_scaled_arg(x, n, p))
        for s in (-1, 1):
            body = body - self.amplitudes[s] * self.cutoffs.theta(s, x)
        return p**0.25 * body * math.exp(-p * t)

    def E(self, t: float, x=None):
        """Closed-form forcing ``(d_t - d_x^2 + (px+n)^2) K``."""
        n, p = self.params.n, self.params.p
        x = self.grid.interior if x is None else np.asarray(x, dtype=float)
        V = (p * x + n) ** 2
        out = np.zeros_like(x)
        for s in (-1, 1):
            th = self.cutoffs.theta(s, x)
            out = out + self.amplitudes[s] * (p * th + self.cutoffs.theta(s, x, 2) - V * th)
        return p**0.25 * out * math.exp(-p * t)

    def discrete_residual(self, t: float):
        """``d_t K + A K`` on the interior nodes, with the exact ``d_t K = -p K``."""
        k = self.K(t)
        return -self.params.p * k + assemble_operator(self.params, self.grid).apply(k)

    def evolve(self, times) -> Trajectory:
        return evolve_mode(self.params, self.K(0.0), None, max(self.T, max(times)),
                           output_times=times, grid=self.grid)

    @property
    def G_num(self) -> Trajectory:
        """True solution from ``K(0)`` sampled on 11 uniform times in ``[0, T]``."""
        if self._traj is None:
            self._traj = self.evolve(np.linspace(0.0, self.T, 11))
        return self._traj

    def forcing_energy(self, t: float) -> float:
        """``int_0^t ||E(s)||^2 ds`` in closed form (``E`` decays like ``e^{-ps}``)."""
        e0 = self.grid.dx * float(np.sum(self.E(0.0) ** 2))
        p = self.params.p
        return e0 * -math.expm1(-2 * p * t) / (2 * p)


def quasimode_grid(p: float, m_min: int = 2000, per_width: float = 120.0) -> Grid1D:
    """Grid resolving the Gaussian width ``1/sqrt(p)`` with ``per_width`` cells per unit sqrt(p)."""
    return Grid1D(max(m_min, int(math.ceil(per_width * math.sqrt(abs(p))))))


def build_quasimode(n: int, p: float, cutoffs: CutoffPair | None = None, T: float = 1.0,
                    grid: Grid1D | None = None) -> QuasiMode:
    if not p > 0:
        raise ParameterError(f"quasi-modes need p > 0, got {p}")
    if not T > 0:
        raise ParameterError("T must be positive")
    return QuasiMode(ModeParams(int(n), float(p)), cutoffs or CutoffPair(),
                     float(T), grid or quasimode_grid(p))


def quasimode_error(qm: QuasiMode, t: float) -> float:
    """``||G_num(t) - K(t)||_{L^2(-1,1)}``."""
    if not 0 <= t <= qm.T:
        raise ParameterError(f"t must lie in [0, {qm.T}]")
    g = qm.evolve([t]).states[0]
    d = g - qm.K(t)
    return math.sqrt(qm.grid.dx * float(np.sum(np.abs(d) ** 2)))


def error_shape(n: int, p: float) -> float:
    """``(p^2 + n^2) p^{-1/4} max_s e^{-(p/2)(s + n/p)^2}``."""
    e = min(0.5 * p * (s + n / p) ** 2 for s in (-1, 1))
    return (p * p + n * n) * p**-0.25 * math.exp(-e)


def cex_mode(a: float, k: int) -> tuple[int, float]:
    """``([alpha k], k)`` with ``alpha = (1 - a)/2``."""
    if not -1 < a < 1:
        raise ParameterError(f"a must lie in (-1, 1), got {a}")
    if k < 1:
        raise ParameterError("k must be >= 1")
    return int(math.floor((1 - a) / 2 * k)), float(k)


@dataclass(frozen=True)
class CexResult:
    k: float
    n: int
    p: float
    T: float
    log_obs_energy: float
    log_final_energy: float

    @property
    def log_ratio(self) -> float:
        return self.log_obs_energy - self.log_final_energy

    @property
    def obs_energy(self) -> float:
        return math.exp(self.log_obs_energy)

    @property
    def final_energy(self) -> float:
        return math.exp(self.log_final_energy)

    @property
    def ratio(self) -> float:
        return math.exp(self.log_ratio)


def _mode_log_energies(n: int, p: float, a: float, T_list, cutoffs: CutoffPair, grid: Grid1D):
    """``(log int_0^T int_a^1 |G|^2, log ||G(T)||^2)`` for each ``T``."""
    qm = build_quasimode(n, p, cutoffs, max(T_list), grid)
    es = eigensystem(qm.params, grid)
    c = es.project(qm.K(0.0))
    mag2 = np.abs(c) ** 2
    nz = mag2 > 0
    out = []
    for T in T_list:
        log_final = float(logsumexp(np.log(mag2[nz]) - 2 * es.eigenvalues[nz] * T))
        obs = observation_energy(es, c, a, 1.0, 0.0, T)
        out.append((math.log(obs) if obs > 0 else -math.inf, log_final))
    return out


def cex_quotient(a: float, T: float, k: int, grid: Grid1D | None = None,
                 cutoffs: CutoffPair | None = None) -> CexResult:
    """Observation over ``(0,T) x (a,1)`` against final energy for the mode ``([alpha k], k)``."""
    return _cex_results(a, [T], k, grid, cutoffs)[0]


def _cex_results(a, T_list, k, grid=None, cutoffs=None) -> list[CexResult]:
    n, p = cex_mode(a, k)
    cutoffs = cutoffs or CutoffPair.for_region(a)
    if not cutoffs.supports_region(a):
        raise ParameterError("theta_- must vanish on (a, 1)")
    if min(T_list) <= 0:
        raise ParameterError("T must be positive")
    grid = grid or quasimode_grid(p)
    return [CexResult(float(k), n, p, float(T), lo, lf)
            for T, (lo, lf) in zip(T_list, _mode_log_energies(n, p, a, T_list, cutoffs, grid))]


def _slope(k, y, log_term: bool) -> float:
    k = np.asarray(k, dtype=float)
    cols = [k, np.log(k), np.ones_like(k)] if log_term else [k, np.ones_like(k)]
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), np.asarray(y, dtype=float), rcond=None)
    return float(coef[0])


def fit_log_rate(k, values_log, log_term: bool = False) -> float:
    """Slope ``s`` of ``log value ~ s k (+ gamma log k) + c``."""
    if len(k) < 2 + log_term:
        raise ParameterError("not enough points for the fit")
    return _slope(k, values_log, log_term)


@dataclass
class TminScan:
    a: float
    k_list: list
    T_list: list
    rows: list
    slopes: dict
    T_hat: float | None
    threshold: float
    monotone: bool
    fit_model: str
    diagnostics: list = field(default_factory=list)

    @property
    def relative_error(self) -> float | None:
        if self.T_hat is None:
            return None
        return abs(self.T_hat - self.threshold) / self.threshold

    def slope_at(self, T: float) -> float:
        return self.slopes[float(T)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "T", "k", "log_obs_energy", "log_final_energy", "log_ratio"])
        for r in self.rows:
            w.writerow([repr(self.a), repr(r.T), repr(r.k), repr(r.log_obs_energy),
                        repr(r.log_final_energy), repr(r.log_ratio)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "a": self.a,
            "fit_model": self.fit_model,
            "slopes": {repr(T): s for T, s in self.slopes.items()},
            "T_hat": self.T_hat,
            "threshold": self.threshold,
            "relative_error": self.relative_error,
            "monotone": self.monotone,
            "diagnostics": self.diagnostics,
        }


def _crossover(T_list, slopes):
    """First sign change of ``s(T)`` from negative to nonnegative, linearly interpolated."""
    for (T0, s0), (T1, s1) in zip(zip(T_list, slopes), zip(T_list[1:], slopes[1:])):
        if s0 < 0 <= s1:
            return T0 + (T1 - T0) * (-s0) / (s1 - s0)
    return None


def _scan(a, k_list, T_list, energies, log_term, workers):
    """Shared driver: ``energies(k) -> list[CexResult]`` over ``T_list``."""
    k_list = list(k_list)
    T_list = sorted(float(T) for T in T_list)
    if len(k_list) < 5 or any(b <= a_ for a_, b in zip(k_list, k_list[1:])):
        raise ParameterError("k_list must be increasing with at least 5 entries")
    if len(T_list) < 2:
        raise ParameterError("need at least two T values")
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            per_k = list(ex.map(energies, k_list))
    else:
        per_k = [energies(k) for k in k_list]
    rows = [r for T_idx in range(len(T_list)) for r in (res[T_idx] for res in per_k)]
    slopes = []
    for i, T in enumerate(T_list):
        y = [res[i].log_ratio for res in per_k]
        slopes.append(_slope(k_list, y, log_term))
    diagnostics = []
    monotone = all(s1 >= s0 for s0, s1 in zip(slopes, slopes[1:]))
    if not monotone:
        diagnostics.append("slope s(T) is not monotone in T")
    T_hat = _crossover(T_list, slopes)
    if T_hat is None:
        diagnostics.append("no sign change of s(T) inside the T range")
    threshold = (1 + a) ** 2 / 8
    return TminScan(a, k_list, T_list, rows, dict(zip(T_list, slopes)), T_hat, threshold,
                    monotone, "k+logk" if log_term else "k", diagnostics)


def tmin_scan(a: float, k_list, T_list, log_term: bool = True, workers: int = 1,
              grid_rule=quasimode_grid) -> TminScan:
    """Slope of ``log ratio`` in ``k`` for each ``T`` and its sign change ``T_hat``.

    The default fit ``log ratio ~ s k + gamma log k + c`` absorbs the
    algebraic prefactors of the Gaussian tail and of the time integral.
    """
    def energies(k):
        n, p = cex_mode(a, k)
        return _cex_results(a, T_list_sorted, k, grid_rule(p))

    T_list_sorted = sorted(float(T) for T in T_list)
    return _scan(a, k_list, T_list_sorted, energies, log_term, workers)


@dataclass
class ErrorBoundReport:
    rows: list
    fitted_c: float
    violations: list
    decay_rate: float
    predicted_rate: float

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {"fitted_c": self.fitted_c, "violations": self.violations,
                "decay_rate": self.decay_rate, "predicted_rate": self.predicted_rate}


def error_bound_sweep(a: float, k_list, T: float, times: int = 5, slack: float = 1e-6,
                      grid_rule=quasimode_grid) -> ErrorBoundReport:
    """Fit one constant for ``err <= c * error_shape`` on the even-indexed ``k`` and
    check it on the odd-indexed ones.  ``err`` is the max over ``times`` uniform
    instants in ``[0, T]``.
    """
    rows = []
    tt = np.linspace(0.0, T, times)
    for k in k_list:
        n, p = cex_mode(a, k)
        qm = build_quasimode(n, p, CutoffPair.for_region(a), T, grid_rule(p))
        traj = qm.evolve(tt)
        errs = [math.sqrt(qm.grid.dx * float(np.sum(np.abs(traj.states[i] - qm.K(t)) ** 2)))
                for i, t in enumerate(tt)]
        err = max(errs)
        rows.append({"k": k, "n": n, "p": p, "error": err, "shape": error_shape(n, p),
                     "ratio": err / error_shape(n, p)})
    train, held = rows[0::2], rows[1::2]
    c = max(r["ratio"] for r in train)
    violations = [r for r in held if r["error"] > c * r["shape"] * (1 + slack)]
    ks = [r["k"] for r in rows]
    # exponential rate after removing the algebraic prefactor (p^2 + n^2) p^{-1/4}
    rate = fit_log_rate(ks, [math.log(r["error"] / ((r["p"] ** 2 + r["n"] ** 2) * r["p"] ** -0.25))
                             for r in rows])
    alpha = (1 - a) / 2
    return ErrorBoundReport(rows, c, violations, rate, -((alpha - 1) ** 2) / 2)


@dataclass(frozen=True)
class UnboundedResult:
    k: int
    T: float
    nodes: int
    log_obs_energy: float
    log_final_energy: float

    @property
    def log_ratio(self) -> float:
        return self.log_obs_energy - self.log_final_energy


def _unbounded_results(a, T_list, k, nodes, grid_rule=quasimode_grid):
    if nodes < 1:
        raise ParameterError("need at least one quadrature node")
    if not -1 < a < 1 or k < 1:
        raise ParameterError("need -1 < a < 1 and k >= 1")
    alpha = (1 - a) / 2
    x, w = np.polynomial.legendre.leggauss(nodes)
    lo = k / alpha
    ps = lo + 0.5 * (x + 1.0)
    logw = np.log(0.5 * w)
    cut = CutoffPair.for_region(a)
    per_node = [_mode_log_energies(int(k), float(p), a, T_list, cut, grid_rule(p)) for p in ps]
    out = []
    # Plancherel in z contributes the same 2 pi to both energies
    l2pi = math.log(2 * math.pi)
    for i, T in enumerate(T_list):
        lo_e = np.array([e[i][0] for e in per_node])
        lf_e = np.array([e[i][1] for e in per_node])
        out.append(UnboundedResult(int(k), float(T), nodes,
                                   float(logsumexp(logw + lo_e)) + l2pi,
                                   float(logsumexp(logw + lf_e)) + l2pi))
    return out


def unbounded_quasimode(a: float, k: int, T: float, p_quadrature_nodes: int = 8,
                        grid_rule=quasimode_grid) -> UnboundedResult:
    """Energies of the wave packet ``int G_{k,p} e^{ipz} dp`` over ``p in (k/alpha, 1 + k/alpha)``."""
    return _unbounded_results(a, [float(T)], k, p_quadrature_nodes, grid_rule)[0]


def unbounded_scan(a: float, k_list, T_list, nodes: int = 8, log_term: bool = True,
                   workers: int = 1, grid_rule=quasimode_grid) -> TminScan:
    T_sorted = sorted(float(T) for T in T_list)
    return _scan(a, k_list, T_sorted,
                 lambda k: _unbounded_results(a, T_sorted, k, nodes, grid_rule),
                 log_term, workers)
