"""Seeded initial vorticity fields: Gaussian random fields, decaying-turbulence
spectra and Gaussian vortex scenes.

A grid is given as ``(H, W, L)``. Fourier coefficients ``c_k`` below follow the
series convention ``w(x) = sum_k c_k exp(i k . x)``, so the unnormalized DFT of
the field equals ``H * W * c_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .diagnostics import kinetic_energy
from .errors import ParameterError
from .spectral import TWO_PI, Field2D, _check_extents, wavenumbers


class Grid(NamedTuple):
    H: int
    W: int
    length: float = TWO_PI


def as_grid(grid) -> Grid:
    g = Grid(*grid)
    _check_extents(g.H, g.W)
    if not g.length > 0:
        raise ParameterError(f"domain length must be positive, got {g.length}")
    return g


def _positive(**kw):
    for name, v in kw.items():
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ParameterError(f"{name} must be positive and finite, got {v!r}")


def default_grf_amplitude(tau: float, alpha: float) -> float:
    """``sqrt(2) * tau^(alpha - 1)``: the conventional scale for 2D forced benchmarks."""
    return math.sqrt(2.0) * tau ** (alpha - 1.0)


@dataclass(frozen=True)
class GrfParams:
    tau: float = 7.0
    alpha: float = 2.5
    amplitude_scale: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.amplitude_scale is None:
            object.__setattr__(self, "amplitude_scale", default_grf_amplitude(self.tau, self.alpha))
        _positive(tau=self.tau, alpha=self.alpha, amplitude_scale=self.amplitude_scale)
        if not self.alpha > 1:
            raise ParameterError(f"alpha must exceed 1, got {self.alpha}")


@dataclass(frozen=True)
class McWilliamsParams:
    tau0: float = 1.0
    k0: float = 6.0
    target_energy: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _positive(tau0=self.tau0, k0=self.k0, target_energy=self.target_energy)


@dataclass(frozen=True)
class VortexSpec:
    center: tuple
    amplitude: float
    radius: float

    def __post_init__(self):
        _positive(radius=self.radius)


def grf_envelope(grid, params: GrfParams) -> np.ndarray:
    """Coefficient standard deviation ``a (|k|^2 + tau^2)^(-alpha/2)`` with zero mean mode."""
    g = as_grid(grid)
    k2 = wavenumbers(g.H, g.W, g.length).k2
    env = params.amplitude_scale * (k2 + params.tau ** 2) ** (-params.alpha / 2.0)
    env = env.copy()
    env[0, 0] = 0.0
    return env


def grf_from_draws(grid, params: GrfParams, draws: np.ndarray) -> Field2D:
    """Build a GRF sample from real white-noise ``draws`` of shape (H, W).

    The draws are mapped to Hermitian unit-variance complex normals by an
    orthonormal DFT, so negating them negates the field.
    """
    g = as_grid(grid)
    draws = np.asarray(draws, dtype=np.float64)
    if draws.shape != (g.H, g.W):
        raise ParameterError(f"draws must have shape {(g.H, g.W)}, got {draws.shape}")
    xi = np.fft.fft2(draws) / math.sqrt(g.H * g.W)
    coeffs = grf_envelope(g, params) * xi
    return Field2D(np.fft.ifft2(coeffs).real * (g.H * g.W), g.length)


def grf_draws(grid, seed: int) -> np.ndarray:
    g = as_grid(grid)
    return np.random.default_rng(seed).standard_normal((g.H, g.W))


def sample_grf(grid, params: GrfParams) -> Field2D:
    """Zero-mean Gaussian random field with covariance ``(-lap + tau^2)^(-alpha)`` shape."""
    return grf_from_draws(grid, params, grf_draws(grid, params.seed))


def mcwilliams_psi_envelope(grid, params: McWilliamsParams) -> np.ndarray:
    """``|psi_k|^2`` shape ``k^-1 (tau0^2 + (k/k0)^4)^-1`` on the DFT grid (zero at k=0)."""
    g = as_grid(grid)
    k = np.sqrt(wavenumbers(g.H, g.W, g.length).k2)
    out = np.zeros_like(k)
    nz = k > 0
    out[nz] = 1.0 / (k[nz] * (params.tau0 ** 2 + (k[nz] / params.k0) ** 4))
    return out


def sample_mcwilliams(grid, params: McWilliamsParams) -> Field2D:
    """Decaying-turbulence vorticity with prescribed streamfunction spectrum.

    Amplitudes follow the envelope exactly, phases are uniform and Hermitian
    (taken from the DFT of seeded white noise), and the result is rescaled so
    its kinetic energy equals ``target_energy``.
    """
    g = as_grid(grid)
    noise = np.fft.fft2(np.random.default_rng(params.seed).standard_normal((g.H, g.W)))
    mag = np.abs(noise)
    phase = np.where(mag > 0, noise / np.where(mag > 0, mag, 1.0), 1.0)
    psi_hat = np.sqrt(mcwilliams_psi_envelope(g, params)) * phase
    k2 = wavenumbers(g.H, g.W, g.length).k2
    w = Field2D(np.fft.ifft2(k2 * psi_hat).real, g.length)
    w = w.like(w.values - w.values.mean())
    scale = math.sqrt(params.target_energy / kinetic_energy(w))
    return w.like(w.values * scale)


def gaussian_vortex_field(grid, spec: VortexSpec) -> Field2D:
    """``amplitude * exp(-d^2 / (2 radius^2))`` with ``d`` the torus distance to the center."""
    g = as_grid(grid)
    if not spec.radius < g.length / 4:
        raise ParameterError(f"radius {spec.radius} must be below L/4 = {g.length / 4:g}")
    x = np.arange(g.W) * (g.length / g.W)
    y = np.arange(g.H) * (g.length / g.H)
    dx = (x - spec.center[0] + 0.5 * g.length) % g.length - 0.5 * g.length
    dy = (y - spec.center[1] + 0.5 * g.length) % g.length - 0.5 * g.length
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    return Field2D(spec.amplitude * np.exp(-d2 / (2.0 * spec.radius ** 2)), g.length)


@dataclass(frozen=True)
class SceneConstants:
    """Dipole-plus-perturber scene. The dipole axis is along y, so it self-propels along +x."""

    separation: float = 0.8
    amplitude: float = 5.0
    perturber_amplitude: float = 2.5
    radius: float = 0.4
    dipole_center: tuple = field(default=(math.pi - 0.8, math.pi))

    def __post_init__(self):
        _positive(separation=self.separation, radius=self.radius)


def scene_vortices(d_perturb: float, scene: SceneConstants = SceneConstants()) -> list[VortexSpec]:
    if not d_perturb >= 0:
        raise ParameterError(f"d_perturb must be >= 0, got {d_perturb}")
    cx, cy = scene.dipole_center
    h = scene.separation / 2
    return [
        VortexSpec((cx, cy + h), scene.amplitude, scene.radius),
        VortexSpec((cx, cy - h), -scene.amplitude, scene.radius),
        VortexSpec((cx + d_perturb, cy), scene.perturber_amplitude, scene.radius),
    ]


def motivation_scene(grid, d_perturb: float, scene: SceneConstants = SceneConstants()) -> Field2D:
    """Counter-rotating dipole plus one perturbing vortex at ``dipole_center + (d, 0)``, mean removed."""
    g = as_grid(grid)
    vortices = scene_vortices(d_perturb, scene)
    if scene.perturber_amplitude == 0:
        vortices = vortices[:2]
    total = np.zeros((g.H, g.W))
    for spec in vortices:
        total = total + gaussian_vortex_field(g, spec).values
    return Field2D(total - total.mean(), g.length)
