"""Lipschitz stability of the inverse source problem.

With ``g' + A g = R(t, x) h`` and ``g(0) = g0`` the measured quantity is

    ratio = ||h||^2 / (int_{T0}^{T1} int_omega |d_t g|^2 + ||A g(T1)||^2).

For ``R`` constant the whole computation stays in the eigenbasis: ``d_t g``
has coefficients ``(r h_k - lam_k c_k) exp(-lam_k t)`` and the observation
term is a closed-form pair integral.  General ``R`` goes through
:func:`evolve_mode` and the spectral ``d_t g`` at Gauss-Legendre nodes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, ParameterError
from .evolution import SourceSpec, dt_g, evolve_mode
from .fourier_stack import FourierStack, ModeField, parseval_norm
from .mode_operator import Grid1D, ModeParams, eigensystem
from .observability import (
    TWO_PI,
    ObservationRegion,
    _mode_basis,
    _time_matrix,
    arc_gram,
    fit_observability_envelope,
    obs_constant_truncated,
    observation_energy,
)

DEFAULT_TIME_NODES = 48
DEFAULT_SOURCE_SAMPLES = 257


@dataclass(frozen=True)
class SourceModel:
    """Source ``R(t, x) h``.

    ``R`` and ``dR`` are vectorized callables of ``(t, x)``.  ``h`` is a
    :class:`FourierStack` for 3D runs or a :class:`ModeField` for one mode.
    ``constant`` is set when ``R`` is the constant function, which enables
    the closed-form path.
    """

    R: Callable
    dR: Callable
    rho0: float
    h: FourierStack | ModeField
    constant: float | None = None

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ParameterError(f"rho0 must be positive, got {self.rho0}")
        if not isinstance(self.h, (FourierStack, ModeField)):
            raise ParameterError("h must be a FourierStack or a ModeField")

    @classmethod
    def constant_one(cls, h, value: float = 1.0) -> "SourceModel":
        if not value > 0:
            raise ParameterError("constant R must be positive")
        return cls(lambda t, x: np.full(np.shape(x), value),
                   lambda t, x: np.zeros(np.shape(x)), value, h, float(value))

    @property
    def grid(self) -> Grid1D:
        return self.h.grid

    def with_h(self, h) -> "SourceModel":
        return SourceModel(self.R, self.dR, self.rho0, h, self.constant)

    def check(self, T0: float, T1: float, samples: int = 65) -> None:
        """``R(T1, x) >= rho0`` on the grid and finite ``R``, ``dR`` on a time lattice."""
        x = self.grid.interior
        if np.any(np.asarray(self.R(T1, x)) < self.rho0):
            raise DomainError(f"R(T1, x) drops below rho0 = {self.rho0}")
        for t in np.linspace(0.0, T1, samples):
            if not (np.all(np.isfinite(self.R(t, x))) and np.all(np.isfinite(self.dR(t, x)))):
                raise DomainError(f"R or dR is not finite at t = {t}")

    def smallness(self, T0: float, T1: float, nodes: int = 64) -> float:
        """``(1/rho0) (int_{T0}^{T1} ||dR(t)||_inf^2 dt)^{1/2}``."""
        if self.constant is not None:
            return 0.0
        u, w = np.polynomial.legendre.leggauss(nodes)
        t = 0.5 * (T1 - T0) * (u + 1) + T0
        x = self.grid.nodes
        sup2 = np.array([np.max(np.abs(self.dR(ti, x))) ** 2 for ti in t])
        return math.sqrt(0.5 * (T1 - T0) * float(w @ sup2)) / self.rho0


def eta_threshold(rho0: float, C10: float) -> float:
    """Smallness threshold ``rho0 / (2 sqrt(C10))``."""
    if not (rho0 > 0 and C10 > 0):
        raise ParameterError("rho0 and C10 must be positive")
    return rho0 / (2.0 * math.sqrt(C10))


def _check_window(T0, T1):
    if not 0.0 <= T0 < T1:
        raise ParameterError(f"need 0 <= T0 < T1, got ({T0}, {T1})")


def _region_ab(region):
    return (region.a, region.b) if isinstance(region, ObservationRegion) else tuple(region)


@dataclass(frozen=True)
class ModeStabilityTerms:
    numerator: float
    observation: float
    final: float

    @property
    def denominator(self) -> float:
        return self.observation + self.final

    @property
    def ratio(self) -> float:
        if self.numerator == 0.0:
            return 0.0
        return self.numerator / self.denominator if self.denominator > 0 else math.inf

    @property
    def violation_candidate(self) -> bool:
        """Nonzero source that leaves no trace in the measurements."""
        return self.numerator > 0 and not self.denominator > 0


def _gauss_nodes(T0, T1, nodes):
    u, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (T1 - T0) * (u + 1) + T0, 0.5 * (T1 - T0) * w


def _mode_dt_numeric(params, model, h, g0, T0, T1, nodes, samples):
    """``d_t g`` at Gauss nodes in ``(T0, T1)`` and final coefficients."""
    grid = model.grid
    t, w = _gauss_nodes(T0, T1, nodes)
    src = SourceSpec.separable(model.R, h, samples)
    traj = evolve_mode(params, g0, src, T1, np.append(t, T1), grid)
    x = grid.interior
    gt = np.array([
        dt_g(params, ModeField(grid, traj.states[i]), ModeField(grid, model.R(ti, x) * h)).values
        for i, ti in enumerate(t)
    ])
    return t, w, gt, traj.coefficients[-1]


def _mode_final_coeffs(es, r, hk, c0, T1):
    lam = es.eigenvalues
    return c0 * np.exp(-lam * T1) + r * hk * (-np.expm1(-lam * T1)) / lam


def mode_stability_terms(params: ModeParams, model: SourceModel, region, T0: float, T1: float,
                         g0=None, time_nodes: int = DEFAULT_TIME_NODES,
                         source_samples: int = DEFAULT_SOURCE_SAMPLES) -> ModeStabilityTerms:
    """Numerator and the two denominator terms for one mode."""
    _check_window(T0, T1)
    if not isinstance(model.h, ModeField):
        raise ParameterError("a single-mode run needs h as a ModeField")
    a, b = _region_ab(region)
    grid = model.grid
    h = np.asarray(model.h.values, dtype=complex)
    g0 = np.zeros(grid.size, complex) if g0 is None else np.asarray(
        g0.values if isinstance(g0, ModeField) else g0, dtype=complex)
    num = grid.dx * float(np.sum(np.abs(h) ** 2))
    es = eigensystem(params, grid)
    lam = es.eigenvalues
    if model.constant is not None:
        hk, c0 = es.project(h), es.project(g0)
        d = model.constant * hk - lam * c0
        obs = observation_energy(es, d, a, b, T0, T1)
        cT = _mode_final_coeffs(es, model.constant, hk, c0, T1)
    else:
        _, w, gt, cT = _mode_dt_numeric(params, model, h, g0, T0, T1, time_nodes, source_samples)
        wx = grid.interval_weights(a, b)
        obs = float(w @ (np.abs(gt) ** 2 @ wx))
    final = float(np.sum((lam * np.abs(cT)) ** 2))
    return ModeStabilityTerms(num, obs, final)


def mode_stability_ratio(params: ModeParams, model: SourceModel, region, T0: float, T1: float,
                         g0=None, time_nodes: int = DEFAULT_TIME_NODES) -> float:
    """``||h||^2 / (int_{T0}^{T1} int_a^b |d_t g|^2 + ||A g(T1)||^2)``; infinite when a
    nonzero source is invisible (see :attr:`ModeStabilityTerms.violation_candidate`)."""
    return mode_stability_terms(params, model, region, T0, T1, g0, time_nodes).ratio


def mode_stability_constant(params: ModeParams, region, T0: float, T1: float, grid: Grid1D,
                            K_x: int = 24, value: float = 1.0) -> float:
    """Largest ratio over ``h`` in the span of the ``K_x`` lowest eigenfunctions,
    for constant ``R = value`` and ``g0 = 0``."""
    _check_window(T0, T1)
    a, b = _region_ab(region)
    lam, V = _mode_basis(params, grid, K_x)
    Wx = (V * grid.interval_weights(a, b)[:, None]).T @ V
    Q = Wx * _time_matrix(lam[:, None] + lam[None, :], T0, T1, None)
    Q[np.diag_indices_from(Q)] += np.expm1(-lam * T1) ** 2
    smallest = sla.eigvalsh(value**2 * Q, subset_by_index=[0, 0])[0]
    return math.inf if smallest <= 0 else 1.0 / float(smallest)


@dataclass
class SweepReport:
    T0: float
    T1: float
    region: tuple
    rows: list = field(repr=False)
    max_ratio: float = 0.0
    argmax: tuple = ()
    stabilized: bool = False
    violation_candidates: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "p", "ratio"])
        for r in self.rows:
            w.writerow([r["n"], r["p"], repr(r["ratio"])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "rows"}


def uniform_stability_sweep(region, T0: float, T1: float, sweep, grid: Grid1D,
                            family="worst", K_x: int = 24, workers: int = 1) -> SweepReport:
    """Maximum stability ratio over a frequency sweep.

    ``family="worst"`` takes, for each mode, the largest ratio over sources
    in the span of the ``K_x`` lowest eigenfunctions with ``R = 1``.  A
    callable ``family(params, grid) -> SourceModel`` fixes one source per
    mode instead.  The maximum counts as stabilized when the upper half of
    the sweep (ordered by ``|n| + |p|``) stays within 1.5 times the maximum
    of the lower half.
    """
    _check_window(T0, T1)
    sweep = sorted({(int(n), float(p)) for n, p in sweep}, key=lambda s: (abs(s[0]) + abs(s[1]), s))
    if not sweep:
        raise ParameterError("sweep must be nonempty")

    def one(np_):
        params = ModeParams(*np_)
        if family == "worst":
            return mode_stability_constant(params, region, T0, T1, grid, K_x), False
        terms = mode_stability_terms(params, family(params, grid), region, T0, T1)
        return terms.ratio, terms.violation_candidate

    with ThreadPoolExecutor(max(1, workers)) as ex:
        results = list(ex.map(one, sweep))
    rows = [{"n": n, "p": p, "ratio": r} for (n, p), (r, _) in zip(sweep, results)]
    ratios = np.array([r["ratio"] for r in rows])
    i = int(np.argmax(ratios))  # first index on ties
    half = max(1, len(rows) // 2)
    early = float(ratios[:half].max())
    late = float(ratios[half:].max()) if len(rows) > half else early
    return SweepReport(T0, T1, _region_ab(region), rows, float(ratios[i]), sweep[i],
                       bool(late <= 1.5 * early),
                       [sweep[j] for j, (_, v) in enumerate(results) if v])


def default_T_star(a: float, b: float, grid: Grid1D | None = None,
                   T_values=(0.5, 1.0, 2.0), sweep=None) -> float:
    """``4 / C4`` from the observability envelope fit; ``inf`` when no decay is found."""
    grid = Grid1D(200) if grid is None else grid
    if sweep is None:
        sweep = [(n, float(p)) for n in (0, 1, 2, 4) for p in (0, 1, 2, 4)]
    c4 = fit_observability_envelope(a, b, list(T_values), sweep, grid, K_x=16).C4_ratio
    return 4.0 / c4 if c4 > 0 else math.inf


@dataclass
class StabilityReport:
    ratio: float
    numerator: float
    observation: float
    final: float
    smallness: float
    eta: float
    C10: float
    T_star: float
    T0: float
    T1: float
    passes: dict
    seeds: dict = field(default_factory=dict)
    per_mode: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.passes.values())

    def aggregate_ratio(self) -> float:
        """Ratio rebuilt from per-mode terms with the ``2 pi z_length`` weight.

        Equal to :attr:`ratio` when the y arcs cover the torus, because the
        Gram matrix is then diagonal."""
        num = sum(r["weight"] * r["numerator"] for r in self.per_mode)
        den = sum(r["weight"] * (r["observation"] + r["final"]) for r in self.per_mode)
        if num == 0.0:
            return 0.0
        return num / den if den > 0 else math.inf

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "per_mode"}
        d["passed"] = self.passed
        return json.loads(json.dumps(d, default=float))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "k", "numerator", "observation", "final", "ratio"])
        for r in self.per_mode:
            den = r["observation"] + r["final"]
            ratio = 0.0 if r["numerator"] == 0 else (r["numerator"] / den if den > 0 else math.inf)
            w.writerow([r["n"], r["k"], repr(r["numerator"]), repr(r["observation"]),
                        repr(r["final"]), repr(ratio)])
        return buf.getvalue()


def _stack_terms(stack, model, region, T0, T1, time_nodes, source_samples, workers):
    """Per-mode terms and the Gram-coupled 3D observation energy."""
    grid, N, zl = stack.grid, stack.N, stack.z_length
    G = arc_gram(region.y_arcs, N)
    wx = grid.interval_weights(region.a, region.b)
    active = [(n, k) for n, k in stack.indices() if np.any(stack.values[n + N, k + stack.P])]

    def one(nk):
        n, k = nk
        params = stack.params(n, k)
        h = stack.values[n + N, k + stack.P]
        es = eigensystem(params, grid)
        lam = es.eigenvalues
        if model.constant is not None:
            hk = es.project(h)
            cT = _mode_final_coeffs(es, model.constant, hk, 0.0, T1)
            dt = model.constant * hk  # coefficients of d_t g before the decay factor
        else:
            _, _, dt, cT = _mode_dt_numeric(params, model, h, np.zeros(grid.size, complex),
                                            T0, T1, time_nodes, source_samples)
        return nk, es, dt, float(np.sum((lam * np.abs(cT)) ** 2)), grid.dx * float(np.sum(np.abs(h) ** 2))

    with ThreadPoolExecutor(max(1, workers)) as ex:
        data = list(ex.map(one, active))

    obs_total = 0.0
    per_mode = []
    by_k: dict = {}
    for nk, es, dt, final, num in data:
        by_k.setdefault(nk[1], []).append((nk[0], es, dt))
        if model.constant is not None:
            own = observation_energy(es, dt, region.a, region.b, T0, T1)
        else:
            own = float(_gauss_nodes(T0, T1, time_nodes)[1] @ (np.abs(dt) ** 2 @ wx))
        per_mode.append({"n": nk[0], "k": nk[1], "numerator": num, "final": final,
                         "observation": own * float(G[nk[0] + N, nk[0] + N].real) / TWO_PI,
                         "weight": TWO_PI * zl})
    for k, items in sorted(by_k.items()):
        owners = [n + N for n, _, _ in items]
        if model.constant is not None:
            lam, V, c = [], [], []
            for _, es, d in items:
                mag = np.abs(d)
                keep = mag >= 1e-13 * mag.max() if mag.any() else np.zeros(mag.size, bool)
                lam.append(es.eigenvalues[keep])
                V.append(es.eigenvectors[:, keep])
                c.append(d[keep])
            sizes = [len(l) for l in lam]
            owner = np.repeat(owners, sizes)
            lam, V, c = np.concatenate(lam), np.concatenate(V, axis=1), np.concatenate(c)
            Wx = (V * wx[:, None]).T @ V
            E = _time_matrix(lam[:, None] + lam[None, :], T0, T1, None)
            Q = G[np.ix_(owner, owner)] * Wx * E
            obs_total += zl * float(np.real(np.conj(c) @ Q @ c))
        else:
            w = _gauss_nodes(T0, T1, time_nodes)[1]
            B = np.stack([dt for _, _, dt in items])  # (modes, nodes, m - 1)
            Gs = G[np.ix_(owners, owners)]
            cross = np.einsum("atx,ab,btx->tx", B.conj(), Gs, B)
            obs_total += zl * float(np.real(w @ (cross @ wx)))
    return per_mode, obs_total


def stability_3d(region: ObservationRegion, model: SourceModel, T0: float, T1: float,
                 T_star: float | None = None, C10: float | None = None,
                 time_nodes: int = DEFAULT_TIME_NODES,
                 source_samples: int = DEFAULT_SOURCE_SAMPLES,
                 workers: int = 1, seeds: dict | None = None) -> StabilityReport:
    """Stability ratio of the full stack with source ``R h``, ``g0 = 0``.

    ``T_star`` defaults to :func:`default_T_star` for the region's x
    interval and ``C10`` to the truncated observability constant on the
    window length (``N, P <= 2``, eight x modes).
    """
    _check_window(T0, T1)
    stack = model.h
    if not isinstance(stack, FourierStack):
        raise ParameterError("stability_3d needs h as a FourierStack")
    model.check(T0, T1)
    if T_star is None:
        T_star = default_T_star(region.a, region.b)
    if C10 is None:
        C10 = obs_constant_truncated(region, T1 - T0, min(stack.N, 2), min(stack.P, 2),
                                     stack.grid, K_x=8, z_length=stack.z_length).value
    eta = eta_threshold(model.rho0, C10)
    smallness = model.smallness(T0, T1)

    per_mode, obs = _stack_terms(stack, model, region, T0, T1, time_nodes, source_samples, workers)
    weight = TWO_PI * stack.z_length
    num = parseval_norm(stack)
    final = weight * sum(r["final"] for r in per_mode)
    den = obs + final
    ratio = 0.0 if num == 0.0 else (num / den if den > 0 else math.inf)
    passes = {"window": bool(T1 - T0 > T_star), "smallness": bool(smallness < eta),
              "ratio_finite": bool(math.isfinite(ratio))}
    return StabilityReport(ratio, num, obs, final, smallness, eta, float(C10), float(T_star),
                           T0, T1, passes, dict(seeds or {}), per_mode)


def random_stack(grid: Grid1D, N: int, P: int, seed: int = 0, modes: int = 6,
                 z_length: float = TWO_PI) -> FourierStack:
    """Seeded smooth source: a few modes, each a combination of low Dirichlet sines."""
    rng = np.random.default_rng(seed)
    x = grid.interior
    sines = np.array([np.sin(j * np.pi * (x + 1) / 2) for j in range(1, 7)])
    out = np.zeros((2 * N + 1, 2 * P + 1, grid.size), complex)
    total = (2 * N + 1) * (2 * P + 1)
    for idx in rng.choice(total, size=min(modes, total), replace=False):
        coef = (rng.normal(size=6) + 1j * rng.normal(size=6)) / np.arange(1, 7) ** 2
        out.reshape(total, grid.size)[idx] = coef @ sines
    return FourierStack(grid, N, P, out, z_length=z_length)
