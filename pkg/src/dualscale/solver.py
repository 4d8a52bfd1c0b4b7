"""Pseudo-spectral RK4 integration of 2D vorticity dynamics on the torus.

Solves ``dw/dt + (u . grad) w = nu lap(w) + f`` with ``u = curl^{-1} w``.
Time stepping keeps the state in (real-FFT) spectral space so each RK4 stage
costs six transforms; the public API exchanges :class:`Field2D` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np

from .errors import NumericalBlowup, ParameterError, ShapeError
from .spectral import TWO_PI, Field2D, velocity_from_vorticity

BLOWUP_THRESHOLD = 1e6

Trajectory = list  # list[Field2D]


@dataclass(frozen=True)
class SolverParams:
    nu: float
    dt: float
    forcing: Optional[Field2D] = None
    dealias: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ParameterError(f"dt must be positive and finite, got {self.dt}")
        if not (math.isfinite(self.nu) and self.nu >= 0):
            raise ParameterError(f"nu must be >= 0, got {self.nu}")

    def check_grid(self, omega: Field2D):
        f = self.forcing
        if f is not None and (f.shape != omega.shape or f.length != omega.length):
            raise ShapeError(f"forcing grid {f!r} does not match state grid {omega!r}")


class _RealWavenumbers(NamedTuple):
    kx: np.ndarray      # (1, W//2+1), Nyquist zeroed
    ky: np.ndarray      # (H, 1), Nyquist zeroed
    k2: np.ndarray      # full |k|^2 (Nyquist included)
    inv_k2: np.ndarray
    keep: np.ndarray


@lru_cache(maxsize=16)
def _real_wavenumbers(H: int, W: int, length: float) -> _RealWavenumbers:
    scale = TWO_PI / length
    ix = np.arange(W // 2 + 1, dtype=np.float64)
    iy = np.fft.fftfreq(H, d=1.0 / H)
    kx = scale * ix[None, :]
    ky = scale * iy[:, None]
    k2 = kx * kx + ky * ky
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    kx_d = kx.copy()
    kx_d[0, -1] = 0.0
    ky_d = ky.copy()
    ky_d[H // 2, 0] = 0.0
    keep = (np.abs(iy)[:, None] <= H // 3) & (ix[None, :] <= W // 3)
    return _RealWavenumbers(kx_d, ky_d, k2, inv_k2, keep)


class _Integrator:
    """Spectral-space RK4 for a fixed grid and parameter set."""

    def __init__(self, shape, length, params: SolverParams):
        self.shape = shape
        self.p = params
        self.wn = _real_wavenumbers(shape[0], shape[1], length)
        self.f_hat = None if params.forcing is None else np.fft.rfft2(params.forcing.values)
        self.visc = -params.nu * self.wn.k2

    def physical(self, w_hat):
        return np.fft.irfft2(w_hat, s=self.shape)

    def rhs(self, w_hat, forced=True):
        wn = self.wn
        psi_hat = w_hat * wn.inv_k2
        s = self.shape
        u = np.fft.irfft2(1j * wn.ky * psi_hat, s=s)
        v = np.fft.irfft2(-1j * wn.kx * psi_hat, s=s)
        wx = np.fft.irfft2(1j * wn.kx * w_hat, s=s)
        wy = np.fft.irfft2(1j * wn.ky * w_hat, s=s)
        adv_hat = np.fft.rfft2(u * wx + v * wy)
        if self.p.dealias:
            adv_hat = np.where(wn.keep, adv_hat, 0.0)
        out = self.visc * w_hat - adv_hat
        if forced and self.f_hat is not None:
            out = out + self.f_hat
        return out

    def _check(self, w_hat, step, stage, last):
        w = self.physical(w_hat)
        if not np.all(np.isfinite(w)):
            raise NumericalBlowup(f"non-finite vorticity at step {step}, stage {stage}",
                                  step=step, stage=stage, last_state=last)
        peak = np.abs(w).max()
        if peak > BLOWUP_THRESHOLD:
            raise NumericalBlowup(
                f"|omega| = {peak:.3g} exceeds {BLOWUP_THRESHOLD:g} at step {step}, stage {stage}",
                step=step, stage=stage, last_state=last)
        return w

    def step(self, w_hat, step_index=0, last=None):
        """One RK4 step; returns ``(w_hat_next, w_next_physical)``."""
        dt = self.p.dt
        k1 = self.rhs(w_hat)
        s2 = w_hat + 0.5 * dt * k1
        self._check(s2, step_index, "k2", last)
        k2 = self.rhs(s2)
        s3 = w_hat + 0.5 * dt * k2
        self._check(s3, step_index, "k3", last)
        k3 = self.rhs(s3)
        s4 = w_hat + dt * k3
        self._check(s4, step_index, "k4", last)
        k4 = self.rhs(s4)
        nxt = w_hat + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        w = self._check(nxt, step_index, "update", last)
        return nxt, w


def compute_rhs(omega: Field2D, params: SolverParams, with_flag: bool = False):
    """Evaluate ``-(u . grad) w + nu lap(w) + f``.

    With ``with_flag`` the result is ``(rhs, mean_projected)`` where the flag
    reports a non-negligible mean in ``omega`` that the Poisson solve dropped.
    """
    params.check_grid(omega)
    integ = _Integrator(omega.shape, omega.length, params)
    rhs = integ.physical(integ.rhs(np.fft.rfft2(omega.values), forced=False))
    if params.forcing is not None:
        rhs = rhs + params.forcing.values
    rhs = omega.like(rhs)
    if with_flag:
        return rhs, velocity_from_vorticity(omega).mean_projected
    return rhs


def rk4_step(omega: Field2D, params: SolverParams) -> Field2D:
    """Advance ``omega`` by one classical RK4 step of length ``params.dt``."""
    params.check_grid(omega)
    integ = _Integrator(omega.shape, omega.length, params)
    _, w = integ.step(np.fft.rfft2(omega.values), 0, omega.values)
    return omega.like(w)


def simulate(omega0: Field2D, params: SolverParams, n_steps: int, save_every: int = 1) -> Trajectory:
    """Integrate ``n_steps`` RK4 steps, keeping every ``save_every``-th state.

    Returns ``n_steps // save_every + 1`` frames starting with ``omega0``.
    On blowup the raised :class:`NumericalBlowup` carries the last finite
    state (as an array) and the failing step index.
    """
    if n_steps < 0 or save_every < 1:
        raise ParameterError(f"need n_steps >= 0 and save_every >= 1, got {n_steps}, {save_every}")
    if n_steps % save_every:
        raise ParameterError(f"n_steps={n_steps} is not a multiple of save_every={save_every}")
    params.check_grid(omega0)
    integ = _Integrator(omega0.shape, omega0.length, params)
    frames = [omega0]
    w_hat = np.fft.rfft2(omega0.values)
    last = omega0.values
    for n in range(n_steps):
        w_hat, last = integ.step(w_hat, n, last)
        if (n + 1) % save_every == 0:
            frames.append(omega0.like(last))
    return frames


def suggest_dt(omega: Field2D, params: SolverParams, cfl: float = 0.5,
               max_dt: Optional[float] = None, eps: float = 1e-12) -> float:
    """CFL-limited step ``cfl * h / max|u|`` with ``h = L / max(H, W)``.

    Also capped by the viscous limit ``h^2 / (4 nu)`` when ``nu > 0`` and by
    ``max_dt`` when given. ``max|u|`` is the largest pointwise speed.
    """
    if not 0 < cfl <= 1:
        raise ParameterError(f"cfl must lie in (0, 1], got {cfl}")
    h = omega.length / max(omega.shape)
    u, v, _ = velocity_from_vorticity(omega)
    speed = float(np.sqrt(u.values ** 2 + v.values ** 2).max())
    dt = cfl * h / max(speed, eps)
    if params.nu > 0:
        dt = min(dt, h * h / (4.0 * params.nu))
    if max_dt is not None:
        dt = min(dt, max_dt)
    return dt
