"""Lebeau-Robbiano bookkeeping: frequency packets, dyadic schedule, constant recursions.

For a fixed z frequency ``p`` the packet ``Pi_{j,p}`` keeps the y modes
``|n| <= 2^j``.  Starting from ``j0(p)``, time slices of length ``2 tau_j``
with ``tau_j = K 2^{-rho j}`` are laid out backwards from ``T`` so that they
exactly fill ``(0, T)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, TruncationError
from .evolution import SourceSpec, evolve_stack, source_energy
from .fourier_stack import TWO_PI, FourierStack, parseval_norm
from .mode_operator import Grid1D

LN2 = math.log(2.0)


def j0_of_p(p: float) -> int:
    """``[log2 |p|] + 2`` for ``p != 0`` and ``0`` for ``p = 0``.

    The integer part is taken exactly from the binary exponent, so powers of
    two never suffer from ``log`` rounding.
    """
    if not math.isfinite(p):
        raise ParameterError("p must be finite")
    if p == 0:
        return 0
    _, e = math.frexp(abs(p))  # |p| = mant * 2^e with 0.5 <= mant < 1
    return (e - 1) + 2


def lambda_packet(j: int) -> float:
    """Dissipation floor ``2^{2j} / 4`` of the modes ``|n| >= 2^j``."""
    if j < 0:
        raise ParameterError("j must be nonnegative")
    return math.ldexp(1.0, 2 * j) / 4.0


def k_star(rho: float) -> float:
    """A ``K_*(rho)`` with ``K(T, p, rho) >= 2 K_* T`` for every ``(T, p)``."""
    return (1.0 - 2.0**-rho) / 4.0


@dataclass(frozen=True)
class LRSchedule:
    T: float
    p: float
    rho: float
    j0: int
    K: float

    def tau(self, j: int) -> float:
        return self.K * 2.0 ** (-self.rho * j)

    def alpha(self, j: int) -> float:
        """``2 sum_{k=j0}^{j} tau_k`` in closed form; ``alpha(j0 - 1) = 0``."""
        if j < self.j0 - 1:
            raise ParameterError(f"alpha is defined for j >= j0 - 1 = {self.j0 - 1}")
        return self.T * -math.expm1(-self.rho * (j - self.j0 + 1) * LN2)

    def I(self, j: int) -> tuple[float, float]:
        self._check_interval_index(j)
        right = self.T - self.alpha(j - 1)
        return right - self.tau(j), right

    def J(self, j: int) -> tuple[float, float]:
        self._check_interval_index(j)
        return self.T - self.alpha(j), self.T - self.alpha(j - 1)

    def _check_interval_index(self, j):
        if j <= self.j0:
            raise ParameterError(f"intervals are defined for j > j0 = {self.j0}")

    def bracket(self) -> tuple[float, float] | None:
        """Bounds ``(lo, hi)`` with ``lo < K <= hi`` when ``p != 0``."""
        if self.p == 0:
            return None
        c = (2.0**self.rho - 1.0) / 2.0 * self.T * abs(self.p) ** self.rho
        return c, 2.0**self.rho * c

    def rows(self, j_max: int) -> list[dict]:
        out = []
        for j in range(self.j0, j_max + 1):
            row = {"j": j, "tau_j": self.tau(j), "alpha_j": self.alpha(j)}
            if j > self.j0:
                row["I_lo"], row["I_hi"] = self.I(j)
                row["J_lo"], row["J_hi"] = self.J(j)
            out.append(row)
        return out

    def to_csv(self, j_max: int) -> str:
        buf = io.StringIO()
        cols = ["j", "tau_j", "alpha_j", "I_lo", "I_hi", "J_lo", "J_hi"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval="")
        w.writeheader()
        for row in self.rows(j_max):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def build_schedule(T: float, p: float, rho: float = 0.5) -> LRSchedule:
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must lie in (0, 1), got {rho}")
    if not T > 0:
        raise ParameterError(f"T must be positive, got {T}")
    j0 = j0_of_p(p)
    K = T * (1.0 - 2.0**-rho) * 2.0 ** (rho * j0) / 2.0
    sched = LRSchedule(float(T), float(p), float(rho), j0, K)
    br = sched.bracket()
    if br is not None and not br[0] < K <= br[1] * (1 + 1e-14):
        raise ParameterError(f"K = {K} violates the bracket {br}")
    return sched


def _k_index(stack: FourierStack, p: float) -> int:
    k = p / stack.p_scale
    kr = round(k)
    if abs(k - kr) > 1e-9 * max(1.0, abs(k)):
        raise ParameterError(f"p = {p} is not a z frequency of this stack")
    if abs(kr) > stack.P:
        raise TruncationError(f"p = {p} lies outside the stack truncation P = {stack.P}")
    return int(kr)


def packet_mask(stack: FourierStack, j, p: float) -> np.ndarray:
    """Boolean ``(2N+1, 2P+1)`` mask of the packet ``Pi_{j,p}``; ``j=None`` is ``j = infinity``."""
    k = _k_index(stack, p)
    n = np.arange(-stack.N, stack.N + 1)
    if j is None or j == math.inf:
        keep_n = np.ones(n.size, bool)
    else:
        if stack.N < 2.0**j:
            raise TruncationError(f"packet j = {j} needs N >= {2**j}, stack has N = {stack.N}")
        keep_n = np.abs(n) <= 2.0**j
    mask = np.zeros(stack.values.shape[:2], bool)
    mask[keep_n, k + stack.P] = True
    return mask


def packet_project(stack: FourierStack, j, p: float) -> FourierStack:
    mask = packet_mask(stack, j, p)
    return FourierStack(stack.grid, stack.N, stack.P, stack.values * mask[:, :, None],
                        stack.time_stamp, stack.z_length)


@dataclass
class RecursionState:
    j: np.ndarray
    log_delta: np.ndarray
    log_A: np.ndarray
    log_B: np.ndarray
    log_Btilde: np.ndarray
    inputs: dict
    sup_log_Btilde: float
    sup_log_A: float
    Btilde_bounded: bool
    A_bounded: bool
    A_nondecreasing: bool

    @property
    def bounded(self) -> bool:
        return self.Btilde_bounded and self.A_bounded and self.A_nondecreasing

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "log_delta", "log_A", "log_B", "log_Btilde"])
        for row in zip(self.j, self.log_delta, self.log_A, self.log_B, self.log_Btilde):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "inputs": self.inputs,
            "sup_log_Btilde": self.sup_log_Btilde,
            "sup_log_A": self.sup_log_A,
            "Btilde_bounded": self.Btilde_bounded,
            "A_bounded": self.A_bounded,
            "A_nondecreasing": self.A_nondecreasing,
        }


def run_constant_recursion(C8: float, C9: float, Kstar: float, T: float, p: float,
                           rho: float, j_max: int = 40) -> RecursionState:
    """The delta/A/B sequences for ``j0 + 1 <= j <= j_max``, all in log space.

    ``Btilde_j = B_j exp(C8 2^{j+1})`` is reported bounded when its last
    three or more steps to ``j_max`` are strict decreases; ``A_j`` is
    bounded when its last relative increment is below ``1e-9`` (the
    increments decay geometrically once ``Btilde`` is small).
    """
    if min(C8, C9, Kstar, T) <= 0:
        raise ParameterError("C8, C9, Kstar and T must be positive")
    if T < 1:
        raise ParameterError("the recursion is stated for T >= 1")
    if not 0 < rho < 1:
        raise ParameterError("rho must lie in (0, 1)")
    j0 = j0_of_p(p)
    if j_max < j0 + 2:
        raise ParameterError(f"j_max must be at least j0 + 2 = {j0 + 2}")
    js = np.arange(j0 + 1, j_max + 1)
    ld, la, lb = [0.0], [math.log(C9 * T) - (j0 + 1) * LN2], []
    lb.append(math.log(T) - Kstar * T * 2.0 ** ((2 - rho) * (j0 + 1)))
    for j in js[:-1]:
        gain = C8 * 2.0 ** (j + 1)
        ld_next = float(np.logaddexp(0.0, lb[-1] + gain))
        la_next = float(np.logaddexp.reduce([
            la[-1], lb[-1] - 2 * j * LN2, ld_next + math.log(C9 * T) - (j + 1) * LN2,
        ]))
        lb_next = (float(np.logaddexp(LN2 + lb[-1], ld_next + math.log(T)))
                   - Kstar * T * 2.0 ** ((2 - rho) * (j + 1)))
        ld.append(ld_next)
        la.append(la_next)
        lb.append(lb_next)
    ld, la, lb = map(np.array, (ld, la, lb))
    lbt = lb + C8 * 2.0 ** (js + 1)
    if not all(np.all(np.isfinite(v)) for v in (ld, la, lb, lbt)):
        raise ParameterError("recursion produced non-finite values")
    # bounded once the tail is strictly decreasing for a few steps; ties at the peak are rounding
    rises = np.flatnonzero(np.diff(lbt) >= 0)
    bt_bounded = bool(rises.size == 0 or rises[-1] < len(lbt) - 4)
    a_nondecreasing = bool(np.all(np.diff(la) >= -1e-15 * np.abs(la[1:]).clip(1)))
    a_bounded = bool(la[-1] - la[-2] < 1e-9)
    inputs = {"C8": C8, "C9": C9, "Kstar": Kstar, "T": T, "p": p, "rho": rho,
              "j0": j0, "j_max": j_max}
    return RecursionState(js, ld, la, lb, lbt, inputs, float(lbt.max()), float(la.max()),
                          bt_bounded, a_bounded, a_nondecreasing)


DEFAULT_CONSTANT_GRID = {
    "C8": (0.5, 1.0, 2.0, 4.0),
    "C9": (0.5, 1.0, 4.0),
    "Kstar": (None, 1.0),  # None selects k_star(rho)
    "T": (1.0, 2.0, 5.0),
    "p": (0.0, 1.0, 4.0),
    "rho": (0.3, 0.5, 0.7),
}


def recursion_grid_check(grid: dict | None = None, j_max: int = 40) -> list[dict]:
    """Run the recursion over a product grid of constants and return one summary per point."""
    import itertools

    g = {**DEFAULT_CONSTANT_GRID, **(grid or {})}
    out = []
    for C8, C9, Ks, T, p, rho in itertools.product(*(g[k] for k in
                                                     ("C8", "C9", "Kstar", "T", "p", "rho"))):
        Kstar = k_star(rho) if Ks is None else Ks
        st = run_constant_recursion(C8, C9, Kstar, T, p, rho, j_max)
        row = st.summary()
        row["bounded"] = st.bounded
        row["log_sup_Btilde_over_T"] = st.sup_log_Btilde - math.log(T)
        row["log_sup_A_over_T2"] = st.sup_log_A - 2 * math.log(T)
        out.append(row)
    return out


@dataclass(frozen=True)
class PacketDuhamelReport:
    lhs: float
    rhs: float
    slack: float
    j1: int
    j2: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + self.slack) + 1e-300


def check_packet_duhamel(stack0: FourierStack, sources, p: float, j1: int, j2, T1: float,
                         T2: float, slack: float = 1e-6) -> PacketDuhamelReport:
    """Compare ``||D g(T2)||^2`` with
    ``2 ||D g(T1)||^2 e^{-2 lam(2^j1)(T2 - T1)} + int ||D h||^2 / lam(2^j1)``
    for ``D = Pi_{j2,p} - Pi_{j1,p}``.

    ``sources`` maps ``(n, k)`` to :class:`~heisenberg_obs.evolution.SourceSpec`.
    """
    if not 0 <= T1 < T2:
        raise ParameterError("need 0 <= T1 < T2")
    if j1 < j0_of_p(p):
        raise ParameterError(f"j1 must be >= j0(p) = {j0_of_p(p)}")
    if j2 is not None and j2 != math.inf and j2 <= j1:
        raise ParameterError("need j1 < j2")
    D = packet_mask(stack0, j2, p) & ~packet_mask(stack0, j1, p)
    restricted = FourierStack(stack0.grid, stack0.N, stack0.P, stack0.values * D[:, :, None],
                              0.0, stack0.z_length)
    kept = {key: src for key, src in (sources or {}).items()
            if D[key[0] + stack0.N, key[1] + stack0.P]}
    traj = evolve_stack(restricted, kept, T2, [T1, T2])
    g1, g2 = (parseval_norm(s) for s in traj.stacks)
    forcing = 0.0
    for src in kept.values():
        if src is not None and not src.is_zero:
            s, vals = src.sample(stack0.grid, T2)
            forcing += source_energy(s, vals, T1, T2, stack0.grid.dx)
    forcing *= TWO_PI * stack0.z_length
    lam = lambda_packet(j1)
    rhs = 2 * g1 * math.exp(-2 * lam * (T2 - T1)) + forcing / lam
    return PacketDuhamelReport(g2, rhs, slack, j1, math.inf if j2 is None else j2)


@dataclass
class TrialSummary:
    trials: int
    violations: list = field(default_factory=list)
    worst_ratio: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def random_packet_trials(trials: int = 200, seed: int = 0, m: int = 48,
                         slack: float = 1e-6) -> TrialSummary:
    """Packet Duhamel inequality on seeded random stacks, sources and windows."""
    rng = np.random.default_rng(seed)
    grid = Grid1D(m)
    out = TrialSummary(trials)
    for t in range(trials):
        k = int(rng.integers(-2, 3))
        j0 = j0_of_p(k)
        j1 = j0 + int(rng.integers(0, 2))
        j2 = None if rng.random() < 0.3 else j1 + int(rng.integers(1, 3))
        N = 2 ** (j1 + 2)
        P = abs(k)
        g0 = np.zeros((2 * N + 1, 2 * P + 1, grid.size), complex)
        g0[:, k + P] = rng.normal(size=(2 * N + 1, grid.size)) + 1j * rng.normal(size=(2 * N + 1, grid.size))
        stack = FourierStack(grid, N, P, g0)
        sources = {}
        if rng.random() < 0.8:
            for n in range(-N, N + 1):
                c = rng.normal(size=(2, grid.size)) * rng.uniform(0, 3)
                omega = rng.uniform(0, 10)
                sources[(n, k)] = SourceSpec.general(
                    lambda s, c=c, w=omega: c[0] * np.cos(w * s) + c[1] * s, samples=17)
        T1 = float(rng.uniform(0, 0.5))
        T2 = T1 + float(rng.uniform(0.01, 0.5))
        rep = check_packet_duhamel(stack, sources, float(k), j1, j2, T1, T2, slack)
        out.worst_ratio = max(out.worst_ratio, rep.lhs / rep.rhs if rep.rhs > 0 else 0.0)
        if not rep.holds:
            out.violations.append({"trial": t, "p": k, "j1": j1, "j2": rep.j2,
                                   "lhs": rep.lhs, "rhs": rep.rhs})
    return out
