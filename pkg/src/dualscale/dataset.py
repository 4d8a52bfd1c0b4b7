"""Trajectory container (DSOT files) and seeded dataset generation.

File layout, all little-endian::

    offset  size  field
    0       4     magic b"DSOT"
    4       2     version (u16, = 1)
    6       1     dtype code (u8, 1 = float32)
    7       1     reserved (u8, = 0)
    8       20    extents n, t, c, h, w (5 x u32)
    28      4     metadata length m (u32)
    32      m     metadata, UTF-8 JSON
    32 + m  ...   payload, row-major over (n, t, c, h, w)
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, FormatError, NumericalBlowup, ParameterError
from .initial_conditions import GrfParams, McWilliamsParams, sample_grf, sample_mcwilliams
from .solver import SolverParams, simulate, suggest_dt
from .spectral import TWO_PI, Field2D, dealias_two_thirds, dft2, grid_coordinates, idft2

MAGIC = b"DSOT"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sHBB5II")
GENERATOR_VERSION = "1"
KINDS = ("forced", "decaying")


@dataclass
class TrajectorySet:
    """``data`` is an (N, T, C, H, W) float32 array; ``meta`` a JSON-able dict."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 5:
            raise ParameterError(f"trajectory data must be 5D (n, t, c, h, w), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("trajectory data contains non-finite values")
        seeds = self.meta.get("seeds")
        if seeds is None or len(seeds) != self.n:
            raise ParameterError(f"meta['seeds'] must list exactly {self.n} entries")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def t(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    @property
    def h(self) -> int:
        return self.data.shape[3]

    @property
    def w(self) -> int:
        return self.data.shape[4]

    @property
    def length(self) -> float:
        return float(self.meta.get("length", TWO_PI))

    def subset(self, indices) -> "TrajectorySet":
        indices = list(indices)
        meta = dict(self.meta, seeds=[self.meta["seeds"][i] for i in indices])
        return TrajectorySet(self.data[indices], meta)


def encode_trajectory_set(ts: TrajectorySet) -> bytes:
    meta = json.dumps(ts.meta, sort_keys=True).encode("utf-8")
    head = HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, *ts.data.shape, len(meta))
    return head + meta + ts.data.astype("<f4", copy=False).tobytes()


def write_trajectory_set(ts: TrajectorySet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_trajectory_set(ts))


def decode_trajectory_set(raw: bytes) -> TrajectorySet:
    if len(raw) < HEADER.size:
        raise FormatError(f"file holds {len(raw)} bytes, shorter than the {HEADER.size}-byte header",
                          offset=len(raw))
    magic, version, dtype, _, n, t, c, h, w, meta_len = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC.decode()!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}, expected {DTYPE_F32} (float32)", offset=6)
    start = HEADER.size
    if len(raw) < start + meta_len:
        raise FormatError(f"metadata truncated: need {meta_len} bytes", offset=len(raw))
    try:
        meta = json.loads(raw[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}", offset=start) from exc
    base = start + meta_len
    count = n * t * c * h * w
    if len(raw) - base != 4 * count:
        raise FormatError(f"payload holds {len(raw) - base} bytes, expected {4 * count}",
                          offset=min(len(raw), base + 4 * count))
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=base).reshape(n, t, c, h, w)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.reshape(-1)))[0])
        raise FormatError("payload contains non-finite values", offset=base + 4 * bad)
    try:
        return TrajectorySet(data.astype(np.float32), meta)
    except ParameterError as exc:
        raise FormatError(str(exc), offset=start) from exc


def read_trajectory_set(path) -> TrajectorySet:
    with open(path, "rb") as fh:
        return decode_trajectory_set(fh.read())


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Settings shared by every trajectory of one dataset; only seeds vary."""

    kind: str = "decaying"
    n_trajectories: int = 4
    n_frames: int = 20
    resolution: int = 64
    length: float = TWO_PI
    nu: float = 1e-4
    frame_interval: float = 0.1
    base_seed: int = 0
    cfl: float = 0.5
    max_dt: float | None = None
    forcing_amplitude: float = 0.0
    grf_tau: float = 7.0
    grf_alpha: float = 2.5
    grf_amplitude: float | None = None
    mcw_tau0: float = 1.0
    mcw_k0: float = 6.0
    mcw_energy: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_trajectories < 1 or self.n_frames < 1:
            raise ConfigurationError("n_trajectories and n_frames must be positive")
        if self.resolution < 4 or self.resolution % 2:
            raise ConfigurationError(f"resolution must be even and >= 4, got {self.resolution}")
        for name in ("length", "frame_interval", "cfl"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name} must be positive, got {v}")
        if not self.cfl <= 1:
            raise ConfigurationError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not (math.isfinite(self.nu) and self.nu >= 0):
            raise ConfigurationError(f"nu must be >= 0, got {self.nu}")
        if self.max_dt is not None and not self.max_dt > 0:
            raise ConfigurationError(f"max_dt must be positive, got {self.max_dt}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown dataset config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


FORCED_DEFAULTS = dict(kind="forced", length=1.0, nu=1e-5, frame_interval=1.0, max_dt=0.01,
                       forcing_amplitude=0.1)
DECAYING_DEFAULTS = dict(kind="decaying", length=TWO_PI, nu=1e-4, frame_interval=0.1)


def default_config(kind: str, **overrides) -> DatasetConfig:
    base = {"forced": FORCED_DEFAULTS, "decaying": DECAYING_DEFAULTS}.get(kind)
    if base is None:
        raise ConfigurationError(f"kind must be one of {KINDS}, got {kind!r}")
    if overrides.get("kind", kind) != kind:
        raise ConfigurationError(f"config kind {overrides['kind']!r} conflicts with requested kind {kind!r}")
    return DatasetConfig.from_dict({**base, **overrides})


def forcing_field(cfg: DatasetConfig) -> Field2D | None:
    """``a * (sin(2 pi (x + y) / L) + cos(2 pi (x + y) / L))``, or None when unforced."""
    if cfg.kind != "forced" or cfg.forcing_amplitude == 0:
        return None
    x, y = grid_coordinates(cfg.resolution, cfg.resolution, cfg.length)
    phase = TWO_PI * (x + y) / cfg.length
    return Field2D(cfg.forcing_amplitude * (np.sin(phase) + np.cos(phase)), cfg.length)


def initial_condition(cfg: DatasetConfig, seed: int) -> Field2D:
    """Sampler draw for ``seed``, projected onto the 2/3-dealiased band."""
    grid = (cfg.resolution, cfg.resolution, cfg.length)
    if cfg.kind == "forced":
        w = sample_grf(grid, GrfParams(cfg.grf_tau, cfg.grf_alpha, cfg.grf_amplitude, seed))
    else:
        w = sample_mcwilliams(grid, McWilliamsParams(cfg.mcw_tau0, cfg.mcw_k0, cfg.mcw_energy, seed))
    return idft2(dealias_two_thirds(dft2(w)))


def frame_stepping(cfg: DatasetConfig, omega0: Field2D) -> tuple[float, int]:
    """``(dt, save_every)`` with ``save_every * dt == frame_interval`` and ``dt`` within the CFL limit."""
    limit = suggest_dt(omega0, SolverParams(nu=cfg.nu, dt=1.0), cfg.cfl, cfg.max_dt)
    save_every = max(1, math.ceil(cfg.frame_interval / limit - 1e-9))
    return cfg.frame_interval / save_every, save_every


def generate_trajectory(cfg: DatasetConfig, index: int) -> dict:
    """Run one trajectory; returns frames or the failure description."""
    seed = cfg.base_seed + index
    omega0 = initial_condition(cfg, seed)
    dt, save_every = frame_stepping(cfg, omega0)
    params = SolverParams(nu=cfg.nu, dt=dt, forcing=forcing_field(cfg))
    try:
        frames = simulate(omega0, params, save_every * (cfg.n_frames - 1), save_every)
    except NumericalBlowup as e:
        return {"index": index, "seed": seed, "error": str(e), "step": e.step}
    data = np.stack([f.values for f in frames])[:, None].astype(np.float32)
    return {"index": index, "seed": seed, "data": data, "dt": dt, "save_every": save_every}


class DatasetBlowup(NumericalBlowup):
    """One or more trajectories blew up; ``failures`` lists index, seed and message."""

    def __init__(self, failures: list[dict]):
        listing = "; ".join(f"index {f['index']} (seed {f['seed']}): {f['error']}" for f in failures)
        super().__init__(f"{len(failures)} trajectory(ies) blew up: {listing}")
        self.failures = failures


def _worker_count(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("DSO_NUM_WORKERS", "1"))
    if workers < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {workers}")
    return workers


def generate_dataset(kind: str, config: DatasetConfig, workers: int | None = None) -> TrajectorySet:
    """Generate ``config.n_trajectories`` runs seeded ``base_seed + index``.

    Results are assembled in index order, so the output does not depend on
    the worker count (default from ``DSO_NUM_WORKERS``, else 1).
    """
    if config.kind != kind:
        raise ConfigurationError(f"config kind {config.kind!r} does not match requested kind {kind!r}")
    workers = _worker_count(workers)
    indices = range(config.n_trajectories)
    if workers == 1:
        results = [generate_trajectory(config, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, config.n_trajectories)) as pool:
            results = list(pool.map(generate_trajectory, [config] * len(indices), indices))
    failures = [r for r in results if "error" in r]
    if failures:
        raise DatasetBlowup(failures)
    meta = {
        "kind": kind,
        "generator_version": GENERATOR_VERSION,
        "nu": config.nu,
        "length": config.length,
        "frame_interval": config.frame_interval,
        "forcing": _forcing_spec(config),
        "sampler": _sampler_spec(config),
        "seeds": [r["seed"] for r in results],
        "dt": [r["dt"] for r in results],
        "save_every": [r["save_every"] for r in results],
        "cfl": config.cfl,
        "max_dt": config.max_dt,
        "ic_dealiased": True,
        "storage_dtype": "float32",
        "solver_dtype": "float64",
        "config": config.to_dict(),
    }
    return TrajectorySet(np.stack([r["data"] for r in results]), meta)


def _forcing_spec(cfg: DatasetConfig) -> dict | None:
    if forcing_field(cfg) is None:
        return None
    return {"form": "a*(sin(2*pi*(x+y)/L)+cos(2*pi*(x+y)/L))", "a": cfg.forcing_amplitude}


def _sampler_spec(cfg: DatasetConfig) -> dict:
    if cfg.kind == "forced":
        p = GrfParams(cfg.grf_tau, cfg.grf_alpha, cfg.grf_amplitude)
        return {"name": "gaussian_random_field", "tau": p.tau, "alpha": p.alpha,
                "amplitude_scale": p.amplitude_scale}
    return {"name": "mcwilliams", "tau0": cfg.mcw_tau0, "k0": cfg.mcw_k0, "target_energy": cfg.mcw_energy}
