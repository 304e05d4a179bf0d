"""Discrete 1D operators ``A_{n,p} = -d^2/dx^2 + (p x + n)^2`` on (-1, 1).

Dirichlet conditions are imposed by eliminating the two boundary nodes of a
uniform grid, so every operator is a symmetric tridiagonal matrix acting on
the ``m - 1`` interior values.  The smallest eigenvalue of that matrix is the
discrete dissipation speed ``lambda_{n,p}`` of the Fourier mode ``(n, p)``.
"""
from __future__ import annotations

import csv
import io
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal

from .errors import InvalidGridError, NumericError, ParameterError


@dataclass(frozen=True)
class ModeParams:
    """Fourier frequency pair: ``n`` in y (integer), ``p`` in z (real)."""

    n: int
    p: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.p):
            raise ParameterError(f"p must be finite, got {self.p}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", float(self.p))

    def potential(self, x):
        return (self.p * np.asarray(x, dtype=float) + self.n) ** 2


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid ``x_i = -1 + 2 i / m`` on [-1, 1] with ``m`` subintervals."""

    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 4:
            raise InvalidGridError(f"grid needs an integer m >= 4, got {self.m}")
        object.__setattr__(self, "m", int(self.m))

    @property
    def dx(self) -> float:
        return 2.0 / self.m

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.m + 1)

    @cached_property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def size(self) -> int:
        """Number of interior unknowns."""
        return self.m - 1

    def interval_weights(self, a: float, b: float) -> np.ndarray:
        """Quadrature weights on interior nodes for ``int_a^b f dx``.

        The integral is that of the piecewise-linear interpolant of the nodal
        values (with zero boundary values), so ``(a, b) = (-1, 1)`` reduces to
        the composite trapezoid rule and partial cells are handled exactly.
        """
        if not -1.0 <= a < b <= 1.0:
            raise ParameterError(f"need -1 <= a < b <= 1, got ({a}, {b})")
        x = self.nodes
        h = self.dx
        left, right = x[:-1], x[1:]
        lo = np.clip(a, left, right)
        hi = np.clip(b, left, right)
        w = np.zeros(self.m + 1)
        w_left = ((right - lo) ** 2 - (right - hi) ** 2) / (2 * h)
        w_right = ((hi - left) ** 2 - (lo - left) ** 2) / (2 * h)
        np.add.at(w, np.arange(self.m), w_left)
        np.add.at(w, np.arange(1, self.m + 1), w_right)
        return w[1:-1]


@dataclass(frozen=True)
class DiscreteOperator:
    grid: Grid1D
    params: ModeParams
    diagonal: np.ndarray = field(repr=False)
    off_diagonal: np.ndarray = field(repr=False)

    def apply(self, v) -> np.ndarray:
        """Matrix-vector product; ``v`` may be complex and may carry a leading batch axis."""
        v = np.asarray(v)
        out = self.diagonal * v
        out[..., :-1] += self.off_diagonal * v[..., 1:]
        out[..., 1:] += self.off_diagonal * v[..., :-1]
        return out

    def dense(self) -> np.ndarray:
        return (
            np.diag(self.diagonal)
            + np.diag(self.off_diagonal, 1)
            + np.diag(self.off_diagonal, -1)
        )


@dataclass(frozen=True)
class EigenSystem:
    """Ascending spectrum with eigenvectors orthonormal for ``<u, v> = dx sum u v``."""

    grid: Grid1D
    params: ModeParams
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)

    def project(self, f) -> np.ndarray:
        """Coefficients of ``f`` (interior values, possibly batched) in the eigenbasis."""
        return self.grid.dx * (np.asarray(f) @ self.eigenvectors)

    def synthesize(self, coeffs) -> np.ndarray:
        return np.asarray(coeffs) @ self.eigenvectors.T


def assemble_operator(params: ModeParams, grid: Grid1D) -> DiscreteOperator:
    h2 = grid.dx**2
    diagonal = 2.0 / h2 + params.potential(grid.interior)
    off_diagonal = np.full(grid.size - 1, -1.0 / h2)
    return DiscreteOperator(grid, params, diagonal, off_diagonal)


def eigendecompose(op: DiscreteOperator) -> EigenSystem:
    try:
        w, v = eigh_tridiagonal(op.diagonal, op.off_diagonal)
    except LinAlgError as exc:  # pragma: no cover - LAPACK failure is hard to provoke
        raise NumericError(
            "tridiagonal eigensolver failed",
            {"n": op.params.n, "p": op.params.p, "m": op.grid.m, "lapack": str(exc)},
        ) from exc
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite eigenvalues", {"n": op.params.n, "p": op.params.p})
    v /= math.sqrt(op.grid.dx)
    return EigenSystem(op.grid, op.params, w, v)


class _EigenCache:
    """LRU store of eigensystems bounded by total eigenvector bytes."""

    def __init__(self, budget_bytes: int = 512 * 2**20):
        self.budget = budget_bytes
        self._data: OrderedDict = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            es = self._data.get(key)
            if es is not None:
                self._data.move_to_end(key)
            return es

    def put(self, key, es) -> None:
        size = es.eigenvectors.nbytes
        with self._lock:
            if key in self._data or size > self.budget:
                return
            self._data[key] = es
            self._bytes += size
            while self._bytes > self.budget:
                _, old = self._data.popitem(last=False)
                self._bytes -= old.eigenvectors.nbytes

    def clear(self) -> None:
        with self._lock:
            self._data.clear()
            self._bytes = 0


_CACHE = _EigenCache()


def eigensystem(params: ModeParams, grid: Grid1D) -> EigenSystem:
    """Cached :func:`eigendecompose`; the returned arrays are read-only."""
    key = (params.n, params.p, grid.m)
    es = _CACHE.get(key)
    if es is None:
        es = eigendecompose(assemble_operator(params, grid))
        es.eigenvalues.setflags(write=False)
        es.eigenvectors.setflags(write=False)
        _CACHE.put(key, es)
    return es


def lambda_np(params: ModeParams, grid: Grid1D, richardson: bool = False) -> float:
    """Smallest eigenvalue of the discrete ``A_{n,p}``.

    With ``richardson=True`` the value is extrapolated from grids ``m`` and
    ``2m`` assuming second-order convergence.
    """
    lam = _smallest_eigenvalue(params, grid)
    if richardson:
        lam_fine = _smallest_eigenvalue(params, Grid1D(2 * grid.m))
        lam = (4.0 * lam_fine - lam) / 3.0
    return lam


def lowest_eigenvalues(params: ModeParams, grid: Grid1D, count: int = 1) -> np.ndarray:
    """The ``count`` smallest eigenvalues of the discrete ``A_{n,p}`` (no eigenvectors)."""
    if not 1 <= count <= grid.size:
        raise ParameterError(f"count must lie in [1, {grid.size}], got {count}")
    op = assemble_operator(params, grid)
    try:
        return eigh_tridiagonal(
            op.diagonal, op.off_diagonal, eigvals_only=True,
            select="i", select_range=(0, count - 1),
        )
    except LinAlgError as exc:  # pragma: no cover
        raise NumericError(
            "tridiagonal eigensolver failed",
            {"n": params.n, "p": params.p, "m": grid.m},
        ) from exc


def _smallest_eigenvalue(params: ModeParams, grid: Grid1D) -> float:
    return float(lowest_eigenvalues(params, grid, 1)[0])


@dataclass(frozen=True)
class DissipationRow:
    n: int
    p: float
    m: int
    lam: float
    bound_p_ok: bool
    bound_n_ok: bool | None  # None when |n| < 2|p| (bound not claimed)


@dataclass
class DissipationReport:
    rows: list[DissipationRow]
    tolerance: float

    @property
    def violations(self) -> list[DissipationRow]:
        return [r for r in self.rows if not r.bound_p_ok or r.bound_n_ok is False]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "p", "m", "lambda", "bound_p_ok", "bound_n_ok"])
        for r in self.rows:
            bn = "na" if r.bound_n_ok is None else r.bound_n_ok
            writer.writerow([r.n, r.p, r.m, repr(r.lam), r.bound_p_ok, bn])
        return buf.getvalue()


def verify_dissipation_bounds(
    n_max: int, p_max: int, grid: Grid1D, tolerance: float = 1e-6
) -> DissipationReport:
    """Tabulate ``lambda_{n,p}`` for ``|n| <= n_max``, ``|p| <= p_max`` against
    the lower bounds ``(|p| + 1) / 4`` and, when ``|n| >= 2|p|``, ``n^2 / 4``."""
    if n_max < 1 or p_max < 1:
        raise ParameterError("n_max and p_max must be >= 1")
    rows = []
    for n in range(-n_max, n_max + 1):
        for p in range(-p_max, p_max + 1):
            lam = lambda_np(ModeParams(n, p), grid)
            ok_p = lam >= (abs(p) + 1) / 4 - tolerance
            ok_n = lam >= n * n / 4 - tolerance if abs(n) >= 2 * abs(p) else None
            rows.append(DissipationRow(n, float(p), grid.m, lam, ok_p, ok_n))
    return DissipationReport(rows, tolerance)
