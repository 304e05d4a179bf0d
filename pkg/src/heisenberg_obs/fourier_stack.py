"""Fourier bookkeeping between 3D fields and stacks of 1D mode fields.

Coefficients follow the convention

    g_{n,p}(x) = 1/(2 pi)^2 * int_{T^2} g(x, y, z) exp(-i (n y + p z)) dy dz,
    g(x, y, z) = sum_{n,p} g_{n,p}(x) exp(i (n y + p z)),

so the L^2 norm over the domain equals ``(2 pi)^2 * sum ||g_{n,p}||^2``.
Periodic samples sit at ``y_j = -pi + 2 pi j / q``.  When the z direction is
a window of length ``L`` instead of the torus, the z frequencies become
``p = 2 pi k / L`` and the factor ``(2 pi)^2`` becomes ``2 pi L``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AliasingError, DomainError, ParameterError
from .mode_operator import Grid1D, ModeParams

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ModeField:
    """Interior values of one Fourier coefficient ``g_{n,p}(t, .)``."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)
    time_stamp: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.grid.size,):
            raise ParameterError(
                f"mode field needs {self.grid.size} interior values, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ParameterError("mode field has non-finite entries")
        if self.time_stamp < 0:
            raise ParameterError("time_stamp must be nonnegative")
        object.__setattr__(self, "values", v)

    def norm(self) -> float:
        """Discrete L^2(-1, 1) norm (trapezoid with zero boundary values)."""
        return math.sqrt(self.grid.dx * float(np.sum(np.abs(self.values) ** 2)))


def periodic_nodes(q: int, length: float = TWO_PI) -> np.ndarray:
    """``q`` uniform samples of ``[-length/2, length/2)``."""
    return -length / 2 + length * np.arange(q) / q


@dataclass(frozen=True)
class Sampled3DField:
    """Samples on interior x nodes times periodic y and z grids.

    ``values`` has shape ``(m - 1, q_y, q_z)``.  ``z_length`` is the period of
    the z grid (``2 pi`` on the torus).  With ``z_periodic=False`` the z grid
    is a padded window standing in for the real line.
    """

    grid: Grid1D
    values: np.ndarray = field(repr=False)
    z_length: float = TWO_PI
    z_periodic: bool = True

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[0] != self.grid.size:
            raise ParameterError(
                f"expected values of shape ({self.grid.size}, q_y, q_z), got {v.shape}"
            )
        if not self.z_length > 0:
            raise ParameterError("z_length must be positive")
        object.__setattr__(self, "values", v)

    @property
    def q_y(self) -> int:
        return self.values.shape[1]

    @property
    def q_z(self) -> int:
        return self.values.shape[2]

    @property
    def y(self) -> np.ndarray:
        return periodic_nodes(self.q_y)

    @property
    def z(self) -> np.ndarray:
        return periodic_nodes(self.q_z, self.z_length)

    def l2_norm(self) -> float:
        """Direct quadrature of the L^2 norm (trapezoid in x, rectangle in y, z)."""
        w = self.grid.dx * (TWO_PI / self.q_y) * (self.z_length / self.q_z)
        return math.sqrt(w * float(np.sum(np.abs(self.values) ** 2)))


@dataclass(frozen=True)
class FourierStack:
    """Truncated coefficients ``g_{n,p}`` for ``|n| <= N`` and ``|k| <= P``.

    ``values[n + N, k + P]`` holds the interior values of the mode with
    frequency ``n`` in y and ``p = 2 pi k / z_length`` in z.
    """

    grid: Grid1D
    N: int
    P: int
    values: np.ndarray = field(repr=False)
    time_stamp: float = 0.0
    z_length: float = TWO_PI

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        shape = (2 * self.N + 1, 2 * self.P + 1, self.grid.size)
        if self.N < 0 or self.P < 0 or v.shape != shape:
            raise ParameterError(f"stack values must have shape {shape}, got {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid1D, N: int, P: int, **kw) -> "FourierStack":
        return cls(grid, N, P, np.zeros((2 * N + 1, 2 * P + 1, grid.size), complex), **kw)

    @classmethod
    def from_modes(cls, grid, N, P, modes: dict, **kw) -> "FourierStack":
        """Build from ``{(n, k): values}`` with every other mode zero."""
        out = np.zeros((2 * N + 1, 2 * P + 1, grid.size), complex)
        for (n, k), vals in modes.items():
            if abs(n) > N or abs(k) > P:
                raise ParameterError(f"mode {(n, k)} outside truncation {(N, P)}")
            out[n + N, k + P] = vals
        return cls(grid, N, P, out, **kw)

    @property
    def p_scale(self) -> float:
        return TWO_PI / self.z_length

    def params(self, n: int, k: int) -> ModeParams:
        return ModeParams(n, k * self.p_scale)

    def indices(self):
        for n in range(-self.N, self.N + 1):
            for k in range(-self.P, self.P + 1):
                yield n, k

    def mode(self, n: int, k: int) -> ModeField:
        return ModeField(self.grid, self.values[n + self.N, k + self.P], self.time_stamp)

    @property
    def modes(self) -> dict:
        return {self.params(n, k): self.mode(n, k) for n, k in self.indices()}

    def is_conjugate_symmetric(self, tol: float = 1e-10) -> bool:
        """``g_{-n,-p} = conj(g_{n,p})``, the signature of a real 3D field."""
        flipped = self.values[::-1, ::-1].conj()
        scale = max(1.0, float(np.max(np.abs(self.values), initial=0.0)))
        return bool(np.max(np.abs(flipped - self.values), initial=0.0) <= tol * scale)


def _sign_grid(N: int, P: int) -> np.ndarray:
    # samples start at -pi, which contributes (-1)^(n + k) relative to the FFT
    n = np.arange(-N, N + 1)[:, None]
    k = np.arange(-P, P + 1)[None, :]
    return np.where((n + k) % 2 == 0, 1.0, -1.0)


def _check_alias(q_y: int, q_z: int, N: int, P: int) -> None:
    if q_y < 2 * N + 2 or q_z < 2 * P + 2:
        raise AliasingError(
            f"truncation (N, P) = ({N}, {P}) needs q_y >= {2 * N + 2} and "
            f"q_z >= {2 * P + 2}, got ({q_y}, {q_z})"
        )


def decompose(field3d: Sampled3DField, N: int, P: int, time_stamp: float = 0.0) -> FourierStack:
    """Truncated Fourier coefficients of a sampled field."""
    _check_alias(field3d.q_y, field3d.q_z, N, P)
    spec = np.fft.fft2(field3d.values, axes=(1, 2)) / (field3d.q_y * field3d.q_z)
    iy = np.arange(-N, N + 1) % field3d.q_y
    iz = np.arange(-P, P + 1) % field3d.q_z
    coeffs = spec[:, iy][:, :, iz]  # (m-1, 2N+1, 2P+1)
    coeffs = np.moveaxis(coeffs, 0, -1) * _sign_grid(N, P)[:, :, None]
    return FourierStack(field3d.grid, N, P, coeffs, time_stamp, field3d.z_length)


def reconstruct(
    stack: FourierStack, y_samples: int, z_samples: int, real: bool | None = None
) -> Sampled3DField:
    """Evaluate the truncated series on periodic y and z grids.

    With ``real=None`` the imaginary part is dropped when the stack is
    conjugate symmetric.
    """
    _check_alias(y_samples, z_samples, stack.N, stack.P)
    spec = np.zeros((stack.grid.size, y_samples, z_samples), complex)
    iy = np.arange(-stack.N, stack.N + 1) % y_samples
    iz = np.arange(-stack.P, stack.P + 1) % z_samples
    signed = stack.values * _sign_grid(stack.N, stack.P)[:, :, None]
    spec[:, iy[:, None], iz[None, :]] = np.moveaxis(signed, -1, 0)
    values = np.fft.ifft2(spec, axes=(1, 2)) * (y_samples * z_samples)
    if real is None:
        real = stack.is_conjugate_symmetric()
    if real:
        values = values.real
    return Sampled3DField(stack.grid, values, stack.z_length)


def parseval_norm(stack: FourierStack) -> float:
    """Squared L^2 norm of the represented field, ``(2 pi)^2 sum ||g_{n,p}||^2``."""
    factor = TWO_PI * stack.z_length
    return factor * stack.grid.dx * float(np.sum(np.abs(stack.values) ** 2))


def shear_resample(values, z_length: float, shift, axis: int = -1) -> np.ndarray:
    """Band-limited evaluation ``f(z + shift)`` of periodic samples along ``axis``.

    ``shift`` broadcasts against ``values`` with the z axis removed.
    """
    values = np.asarray(values)
    q = values.shape[axis]
    v = np.moveaxis(values, axis, -1)
    kz = TWO_PI * np.fft.fftfreq(q, d=z_length / q)
    shift = np.asarray(shift, dtype=float)[..., None]
    phase = np.exp(1j * kz * shift)
    if q % 2 == 0:
        # split Nyquist symmetrically so real data stays real
        phase[..., q // 2] = np.cos(kz[q // 2] * shift[..., 0])
    out = np.fft.ifft(np.fft.fft(v, axis=-1) * phase, axis=-1)
    if np.isrealobj(values):
        out = out.real
    return np.moveaxis(out, -1, axis)


def cvar_transform(
    field3d: Sampled3DField, direction: str = "forward", edge_tol: float = 1e-8
) -> Sampled3DField:
    """Shear ``z -> z + x y / 2`` between the two coordinate systems.

    ``forward`` returns ``F(x, y, z) = G(x, y, z + x y / 2)``; ``inverse``
    undoes it.  On a non-periodic window the field must be negligible (below
    ``edge_tol`` relative) within the maximal shear of both window edges,
    otherwise the shear would wrap data around the window.
    """
    if direction not in ("forward", "inverse"):
        raise ParameterError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    x = field3d.grid.interior
    y = field3d.y
    shift = 0.5 * x[:, None] * y[None, :]
    if direction == "inverse":
        shift = -shift
    if not field3d.z_periodic:
        max_shift = float(np.max(np.abs(shift)))
        if max_shift >= field3d.z_length / 2:
            raise DomainError(
                f"shear {max_shift:.3g} exceeds half the z window {field3d.z_length / 2:.3g}"
            )
        z = field3d.z
        near_edge = (z < z[0] + max_shift) | (z > z[-1] - max_shift)
        mag = np.abs(field3d.values)
        peak = float(mag.max(initial=0.0))
        if peak > 0 and float(mag[..., near_edge].max(initial=0.0)) > edge_tol * peak:
            raise DomainError("field does not vanish within the shear distance of the z window edge")
    out = shear_resample(field3d.values, field3d.z_length, shift)
    return Sampled3DField(field3d.grid, out, field3d.z_length, field3d.z_periodic)


def stack_to_csv(stack: FourierStack) -> str:
    """Rows ``n, p, x_index, re, im`` (``p`` is the integer index ``k``)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "p", "x_index", "re", "im"])
    for n, k in stack.indices():
        vals = stack.values[n + stack.N, k + stack.P]
        for i, v in enumerate(vals):
            writer.writerow([n, k, i, repr(float(v.real)), repr(float(v.imag))])
    return buf.getvalue()


def stack_metadata(stack: FourierStack) -> dict:
    return {
        "grid": {"m": stack.grid.m},
        "truncation": {"N": stack.N, "P": stack.P},
        "time_stamp": stack.time_stamp,
        "z_length": stack.z_length,
    }


def stack_from_csv(text: str, metadata: dict) -> FourierStack:
    grid = Grid1D(metadata["grid"]["m"])
    N, P = metadata["truncation"]["N"], metadata["truncation"]["P"]
    out = FourierStack.zeros(
        grid, N, P,
        time_stamp=metadata.get("time_stamp", 0.0),
        z_length=metadata.get("z_length", TWO_PI),
    )
    reader = csv.DictReader(io.StringIO(text))
    for row in reader:
        n, k, i = int(row["n"]), int(row["p"]), int(row["x_index"])
        out.values[n + N, k + P, i] = complex(float(row["re"]), float(row["im"]))
    return out
