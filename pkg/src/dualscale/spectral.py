"""Periodic scalar fields and exact Fourier-space differential operators.

Grid convention: ``values[i, j]`` is sampled at ``x = j * L / W``,
``y = i * L / H`` on the square torus ``[0, L)^2``. Axis 1 is x, axis 0 is y.
Forward transforms are unnormalized (numpy's ``fft2``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ParameterError, ShapeError

TWO_PI = 2.0 * math.pi


def _check_extents(H: int, W: int):
    if H < 4 or W < 4 or H % 2 or W % 2:
        raise ParameterError(f"grid extents must be even and >= 4, got {H}x{W}")


@dataclass(frozen=True, eq=False)
class Field2D:
    """Real scalar field on a uniform periodic grid."""

    values: np.ndarray
    length: float = TWO_PI

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"Field2D needs a 2D array, got shape {v.shape}")
        _check_extents(*v.shape)
        if not self.length > 0:
            raise ParameterError(f"domain length must be positive, got {self.length}")
        if not np.all(np.isfinite(v)):
            raise ParameterError("Field2D values must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "length", float(self.length))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]

    @property
    def spacing(self) -> tuple[float, float]:
        """Grid spacing ``(hx, hy)``."""
        return self.length / self.W, self.length / self.H

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        return grid_coordinates(self.H, self.W, self.length)

    def like(self, values) -> "Field2D":
        return Field2D(values, self.length)

    def __repr__(self):
        return f"Field2D({self.H}x{self.W}, L={self.length:g})"


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Unnormalized DFT coefficients of a :class:`Field2D`."""

    coeffs: np.ndarray
    length: float = TWO_PI

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape

    def hermitian_error(self) -> float:
        """Max relative violation of ``c(-k) = conj(c(k))``."""
        c = self.coeffs
        flipped = np.roll(c[::-1, ::-1], 1, axis=(0, 1))
        scale = max(np.abs(c).max(), 1e-300)
        return float(np.abs(c - np.conj(flipped)).max() / scale)


def grid_coordinates(H: int, W: int, length: float) -> tuple[np.ndarray, np.ndarray]:
    """Physical ``(x, y)`` coordinate arrays of shape (H, W)."""
    x = np.arange(W) * (length / W)
    y = np.arange(H) * (length / H)
    return np.broadcast_to(x[None, :], (H, W)), np.broadcast_to(y[:, None], (H, W))


class Wavenumbers(NamedTuple):
    kx: np.ndarray        # (1, W) physical wavenumber along x
    ky: np.ndarray        # (H, 1)
    kx_deriv: np.ndarray  # kx with the Nyquist entry zeroed
    ky_deriv: np.ndarray
    k2: np.ndarray        # (H, W) |k|^2
    inv_k2: np.ndarray    # 1/|k|^2, zero at k = 0
    keep: np.ndarray      # (H, W) bool, True inside the 2/3 band


@lru_cache(maxsize=32)
def wavenumbers(H: int, W: int, length: float) -> Wavenumbers:
    ix = np.fft.fftfreq(W, d=1.0 / W)
    iy = np.fft.fftfreq(H, d=1.0 / H)
    scale = TWO_PI / length
    kx = (scale * ix)[None, :]
    ky = (scale * iy)[:, None]
    kx_d = kx.copy()
    ky_d = ky.copy()
    kx_d[0, W // 2] = 0.0
    ky_d[H // 2, 0] = 0.0
    k2 = kx * kx + ky * ky
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    keep = (np.abs(iy)[:, None] <= H // 3) & (np.abs(ix)[None, :] <= W // 3)
    for arr in (kx, ky, kx_d, ky_d, k2, inv_k2, keep):
        arr.flags.writeable = False
    return Wavenumbers(kx, ky, kx_d, ky_d, k2, inv_k2, keep)


def _wn(field) -> Wavenumbers:
    H, W = field.shape
    return wavenumbers(H, W, field.length)


def _real(coeffs: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(coeffs).real


def dft2(field: Field2D) -> SpectralField:
    return SpectralField(np.fft.fft2(field.values), field.length)


def idft2(spec: SpectralField) -> Field2D:
    H, W = spec.shape
    _check_extents(H, W)
    return Field2D(_real(spec.coeffs), spec.length)


def spectral_gradient(field: Field2D) -> tuple[Field2D, Field2D]:
    """``(d/dx, d/dy)`` by multiplication with ``i k``; Nyquist derivative is zero."""
    wn = _wn(field)
    c = np.fft.fft2(field.values)
    return field.like(_real(1j * wn.kx_deriv * c)), field.like(_real(1j * wn.ky_deriv * c))


def spectral_divergence(u: Field2D, v: Field2D) -> Field2D:
    _check_same_grid(u, v)
    wn = _wn(u)
    c = 1j * wn.kx_deriv * np.fft.fft2(u.values) + 1j * wn.ky_deriv * np.fft.fft2(v.values)
    return u.like(_real(c))


def spectral_laplacian(field: Field2D) -> Field2D:
    wn = _wn(field)
    return field.like(_real(-wn.k2 * np.fft.fft2(field.values)))


class PoissonSolution(NamedTuple):
    psi: Field2D
    mean_projected: bool


def _mean_is_nonzero(values: np.ndarray) -> bool:
    return abs(values.mean()) > 1e-8 * max(np.abs(values).max(), 1e-300)


def poisson_solve(omega: Field2D) -> PoissonSolution:
    """Solve ``-lap(psi) = omega`` on the torus with ``psi`` of zero mean.

    The zero mode of ``omega`` is discarded; ``mean_projected`` reports
    whether that mode was significant (relative to ``max|omega|``).
    """
    wn = _wn(omega)
    psi_hat = np.fft.fft2(omega.values) * wn.inv_k2
    return PoissonSolution(omega.like(_real(psi_hat)), _mean_is_nonzero(omega.values))


class Velocity(NamedTuple):
    u: Field2D
    v: Field2D
    mean_projected: bool


def velocity_from_vorticity(omega: Field2D) -> Velocity:
    """Biot-Savart recovery ``u = d(psi)/dy``, ``v = -d(psi)/dx``."""
    wn = _wn(omega)
    psi_hat = np.fft.fft2(omega.values) * wn.inv_k2
    u = _real(1j * wn.ky_deriv * psi_hat)
    v = _real(-1j * wn.kx_deriv * psi_hat)
    return Velocity(omega.like(u), omega.like(v), _mean_is_nonzero(omega.values))


def dealias_two_thirds(spec: SpectralField) -> SpectralField:
    """Zero every coefficient whose index exceeds ``N // 3`` on either axis."""
    H, W = spec.shape
    keep = wavenumbers(H, W, spec.length).keep
    return SpectralField(np.where(keep, spec.coeffs, 0.0), spec.length)


def _check_same_grid(a: Field2D, b: Field2D):
    if a.shape != b.shape or a.length != b.length:
        raise ShapeError(f"grid mismatch: {a!r} vs {b!r}")


def divergence_central(u: Field2D, v: Field2D) -> Field2D:
    """Second-order periodic central-difference ``du/dx + dv/dy``."""
    _check_same_grid(u, v)
    hx, hy = u.spacing
    du = (np.roll(u.values, -1, axis=1) - np.roll(u.values, 1, axis=1)) / (2.0 * hx)
    dv = (np.roll(v.values, -1, axis=0) - np.roll(v.values, 1, axis=0)) / (2.0 * hy)
    return u.like(du + dv)


def central_gradient(field: Field2D) -> tuple[np.ndarray, np.ndarray]:
    """Second-order periodic central-difference gradient as raw arrays."""
    hx, hy = field.spacing
    f = field.values
    return ((np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / (2.0 * hx),
            (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * hy))
