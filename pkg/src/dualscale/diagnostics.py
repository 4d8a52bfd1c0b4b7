"""Evaluation metrics and flow diagnostics for vorticity fields and rollouts."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError, ShapeError
from .spectral import (
    Field2D, central_gradient, divergence_central, spectral_gradient, velocity_from_vorticity,
    wavenumbers,
)

CSV_HEADER = "step,mse,ssim,grad_err,div_err"
METRIC_KEYS = ("mse", "ssim", "grad_err", "div_err")


def _values(x) -> np.ndarray:
    if isinstance(x, Field2D):
        return x.values
    if isinstance(x, (list, tuple)):
        return np.stack([_values(f) for f in x])
    return np.asarray(x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(pred, truth) -> float:
    """Mean squared difference over every element (fields, stacks or trajectories)."""
    a, b = _values(pred), _values(truth)
    _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------- SSIM

@dataclass(frozen=True)
class SsimParams:
    """Windowed SSIM settings. ``data_range=None`` defers to the reference data."""

    k1: float = 0.01
    k2: float = 0.03
    window: int = 11
    window_sigma: float = 1.5
    data_range: Optional[float] = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"SSIM window must be odd and >= 3, got {self.window}")
        if not self.window_sigma > 0:
            raise ParameterError("SSIM window_sigma must be positive")
        if self.data_range is not None and not self.data_range > 0:
            raise ParameterError(f"SSIM data_range must be positive, got {self.data_range}")

    def kernel(self) -> np.ndarray:
        r = np.arange(self.window) - self.window // 2
        g = np.exp(-0.5 * (r / self.window_sigma) ** 2)
        return g / g.sum()


def _blur(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, g, axis=0, mode="wrap"), g, axis=1, mode="wrap")


def data_range_of(truth) -> float:
    """Dynamic range ``max - min`` of reference data; 1.0 for constant data."""
    v = _values(truth)
    r = float(v.max() - v.min())
    return r if r > 0 else 1.0


def ssim_map(pred: Field2D, truth: Field2D, params: SsimParams = SsimParams()) -> np.ndarray:
    x, y = _values(pred), _values(truth)
    _same_shape(x, y)
    if x.ndim != 2:
        raise ShapeError(f"SSIM expects 2D fields, got shape {x.shape}")
    L = params.data_range if params.data_range is not None else data_range_of(y)
    c1 = (params.k1 * L) ** 2
    c2 = (params.k2 * L) ** 2
    g = params.kernel()
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred: Field2D, truth: Field2D, params: SsimParams = SsimParams()) -> float:
    """Mean of the Gaussian-windowed SSIM map (periodic boundary handling)."""
    return float(np.mean(ssim_map(pred, truth, params)))


# ---------------------------------------------------------------- physics diagnostics

def gradient_vector_error(pred: Field2D, truth: Field2D) -> float:
    """Mean squared norm of the central-difference gradient difference."""
    _same_shape(_values(pred), _values(truth))
    d = pred.like(pred.values - truth.values)
    gx, gy = central_gradient(d)
    return float(np.mean(gx * gx + gy * gy))


def divergence_error(pred_omega: Field2D) -> float:
    """Mean squared central-difference divergence of the spectrally recovered velocity."""
    u, v, _ = velocity_from_vorticity(pred_omega)
    return float(np.mean(divergence_central(u, v).values ** 2))


def center_of_vorticity(omega: Field2D) -> tuple[float, float]:
    """``|w|``-weighted centroid using plain grid coordinates ``x_j = j h``.

    A uniform field yields ``L/2 - h/2`` on each axis. Coordinates do not wrap,
    so the estimate is meaningful only while structures avoid the seam.
    """
    w = np.abs(omega.values)
    total = w.sum()
    if not total > 1e-12:
        raise ParameterError("center of vorticity is undefined for an all-zero field")
    x, y = omega.coordinates()
    return float((w * x).sum() / total), float((w * y).sum() / total)


def torus_distance(omega: Field2D, center) -> np.ndarray:
    x, y = omega.coordinates()
    L = omega.length
    dx = (x - center[0] + 0.5 * L) % L - 0.5 * L
    dy = (y - center[1] + 0.5 * L) % L - 0.5 * L
    return np.sqrt(dx * dx + dy * dy)


def max_local_gradient(omega: Field2D, center, radius: float) -> float:
    """Largest spectral ``|grad w|`` within torus distance ``radius`` of ``center``."""
    if not radius > max(omega.spacing):
        raise ParameterError(f"radius {radius} must exceed one grid cell {max(omega.spacing):g}")
    mask = torus_distance(omega, center) <= radius
    if not mask.any():
        raise ParameterError("local region contains no grid points")
    gx, gy = spectral_gradient(omega)
    mag = np.sqrt(gx.values ** 2 + gy.values ** 2)
    return float(mag[mask].max())


def kinetic_energy(omega: Field2D) -> float:
    """Domain-averaged kinetic energy ``0.5 * mean(u^2 + v^2)``."""
    u, v, _ = velocity_from_vorticity(omega)
    return 0.5 * float(np.mean(u.values ** 2 + v.values ** 2))


def enstrophy(omega: Field2D) -> float:
    """Domain-averaged enstrophy ``0.5 * mean(w^2)``."""
    return 0.5 * float(np.mean(omega.values ** 2))


def shell_index(H: int, W: int) -> np.ndarray:
    """Integer shell ``round(|k| L / 2 pi)`` of every DFT coefficient."""
    iy = np.fft.fftfreq(H, d=1.0 / H)[:, None]
    ix = np.fft.fftfreq(W, d=1.0 / W)[None, :]
    return np.rint(np.sqrt(ix * ix + iy * iy)).astype(np.int64)


def energy_spectrum(omega: Field2D) -> list[tuple[int, float]]:
    """Kinetic energy per integer wavenumber shell; the bins sum to :func:`kinetic_energy`."""
    H, W = omega.shape
    wn = wavenumbers(H, W, omega.length)
    psi_hat = np.fft.fft2(omega.values) * wn.inv_k2
    u_hat = 1j * wn.ky_deriv * psi_hat
    v_hat = -1j * wn.kx_deriv * psi_hat
    dens = 0.5 * (np.abs(u_hat) ** 2 + np.abs(v_hat) ** 2) / float(H * W) ** 2
    shells = shell_index(H, W)
    E = np.bincount(shells.ravel(), weights=dens.ravel())
    return [(k, float(e)) for k, e in enumerate(E)]


# ---------------------------------------------------------------- stepwise reports

def _aggregate(per_step: list[dict]) -> dict:
    n = len(per_step)
    mses = [r["mse"] for r in per_step]
    return {
        "all_step_mse": float(np.mean(mses)),
        "one_step_mse": mses[0],
        "mid_step_mse": mses[math.ceil(n / 2) - 1],
        "final_step_mse": mses[-1],
        "mean_ssim": float(np.mean([r["ssim"] for r in per_step])),
    }


@dataclass
class MetricsReport:
    """Per-step metrics for a rollout horizon plus headline aggregates.

    ``per_step[i]`` describes prediction step ``i + 1``. The mid step is
    ``ceil(horizon / 2)``.
    """

    per_step: list
    aggregates: dict
    n_samples: int = 1
    n_excluded: int = 0
    excluded: list = field(default_factory=list)

    @classmethod
    def from_steps(cls, per_step: list[dict], **kw) -> "MetricsReport":
        if not per_step:
            raise ShapeError("a report needs at least one step")
        return cls(per_step=per_step, aggregates=_aggregate(per_step), **kw)

    @property
    def horizon(self) -> int:
        return len(self.per_step)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        for i, row in enumerate(self.per_step, start=1):
            w.writerow([i] + [repr(float(row[k])) for k in METRIC_KEYS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "aggregates": self.aggregates,
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "excluded": self.excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def average(reports: Sequence["MetricsReport"]) -> "MetricsReport":
        """Step-wise mean of several equal-horizon reports, reduced in the given order."""
        if not reports:
            raise ShapeError("cannot average zero reports")
        n = reports[0].horizon
        if any(r.horizon != n for r in reports):
            raise ShapeError("reports have different horizons")
        per_step = [{k: float(np.mean([r.per_step[i][k] for r in reports])) for k in METRIC_KEYS}
                    for i in range(n)]
        return MetricsReport.from_steps(per_step, n_samples=len(reports))


def step_metrics(pred: Field2D, truth: Field2D, params: SsimParams) -> dict:
    return {
        "mse": mse(pred, truth),
        "ssim": ssim(pred, truth, params),
        "grad_err": gradient_vector_error(pred, truth),
        "div_err": divergence_error(pred),
    }


def stepwise_errors(pred_traj: Sequence[Field2D], true_traj: Sequence[Field2D],
                    ssim_params: SsimParams = SsimParams()) -> MetricsReport:
    """Compare aligned predicted and true frames step by step.

    When ``ssim_params.data_range`` is unset it is taken from the whole true
    trajectory's ``max - min``.
    """
    if len(pred_traj) != len(true_traj):
        raise ShapeError(f"trajectory lengths differ: {len(pred_traj)} vs {len(true_traj)}")
    if len(pred_traj) < 1:
        raise ShapeError("trajectories must contain at least one frame")
    if ssim_params.data_range is None:
        ssim_params = SsimParams(ssim_params.k1, ssim_params.k2, ssim_params.window,
                                 ssim_params.window_sigma, data_range_of(true_traj))
    per_step = [step_metrics(p, t, ssim_params) for p, t in zip(pred_traj, true_traj)]
    return MetricsReport.from_steps(per_step)
