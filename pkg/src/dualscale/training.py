"""One-step supervised training and autoregressive rollout evaluation.

Any object with ``predict(frames) -> frames`` on (B, C, H, W) arrays can be
rolled out and evaluated; besides :class:`~dualscale.model.DsoModel` this
module provides persistence, oracle and linear-scaling predictors used as
baselines and test doubles.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor_engine as te
from .diagnostics import MetricsReport, SsimParams, stepwise_errors
from .errors import ConfigurationError, ParameterError, RolloutTruncated, ShapeError, TrainingDiverged
from .model import DsoModel, forward
from .spectral import TWO_PI, Field2D


AUGMENT_MODES = ("none", "shift", "symmetry")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 42
    shuffle: bool = True
    loss: str = "mse"
    augment: str = "none"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss != "mse":
            raise ConfigurationError(f"unsupported loss {self.loss!r}; only 'mse' is available")
        if self.augment not in AUGMENT_MODES:
            raise ConfigurationError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigurationError(f"unknown train config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-12:
            raise ParameterError(f"split fractions must be non-negative and sum to 1, got {fr}")


def split_dataset(dataset, spec: SplitSpec = SplitSpec(), seed: int = 42):
    """Shuffle trajectory indices with ``seed`` and cut contiguous train/val/test runs.

    Validation and test sizes are floor-rounded; the remainder goes to train.
    ``dataset`` may be a trajectory set or a trajectory count.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else dataset.n
    if n < 10:
        raise ParameterError(f"need at least 10 trajectories to split, got {n}")
    n_val = math.floor(n * spec.val_frac + 1e-9)
    n_test = math.floor(n * spec.test_frac + 1e-9)
    n_train = n - n_val - n_test
    perm = [int(i) for i in np.random.default_rng(seed).permutation(n)]
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def make_one_step_pairs(trajectories) -> tuple[np.ndarray, np.ndarray]:
    """``(inputs, targets)`` with frame ``i`` paired to frame ``i + 1`` of each trajectory.

    ``trajectories`` is (N, T, C, H, W); the result holds ``N * (T - 1)``
    samples ordered trajectory-major.
    """
    data = np.asarray(trajectories)
    if data.ndim != 5:
        raise ShapeError(f"expected (N, T, C, H, W) trajectories, got {data.shape}")
    N, T = data.shape[:2]
    if T < 2:
        raise ParameterError(f"trajectories need T >= 2 frames to form pairs, got T = {T}")
    inputs = data[:, :-1].reshape((N * (T - 1),) + data.shape[2:]).astype(np.float64)
    targets = data[:, 1:].reshape((N * (T - 1),) + data.shape[2:]).astype(np.float64)
    return inputs, targets


def augment_pairs(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, mode: str):
    """Apply one random torus symmetry per sample, identically to input and target.

    ``shift`` draws a periodic translation; ``symmetry`` adds a random element
    of the square's dihedral group. Vorticity is a pseudo-scalar, so mirror
    images change sign. Both commute with unforced periodic Navier-Stokes
    dynamics; a spatially fixed forcing term breaks that, so keep ``none`` there.
    """
    if mode == "none":
        return x, y
    x, y = x.copy(), y.copy()
    H, W = x.shape[-2:]
    for i in range(len(x)):
        dy, dx = int(rng.integers(H)), int(rng.integers(W))
        a = np.roll(x[i], (dy, dx), axis=(-2, -1))
        b = np.roll(y[i], (dy, dx), axis=(-2, -1))
        if mode == "symmetry":
            k, mirror = int(rng.integers(4)), bool(rng.integers(2))
            if H == W:
                a, b = np.rot90(a, k, axes=(-2, -1)), np.rot90(b, k, axes=(-2, -1))
            if mirror:
                a, b = -a[..., ::-1], -b[..., ::-1]
        x[i], y[i] = a, b
    return x, y


@dataclass
class LossHistory:
    """Per-epoch mean train loss and validation loss, plus the best-validation snapshot."""

    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float = math.inf
    best_model: DsoModel | None = None

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r}" for r in self.epochs]
        return "\n".join(lines) + "\n"


def batch_loss(model: DsoModel, inputs: np.ndarray, targets: np.ndarray, batch_size: int) -> float:
    """Sample-weighted mean MSE over ``inputs`` without recording gradients."""
    if len(inputs) == 0:
        return math.nan
    total = 0.0
    with te.no_grad():
        for lo in range(0, len(inputs), batch_size):
            x, y = inputs[lo:lo + batch_size], targets[lo:lo + batch_size]
            total += float(te.mse_loss(forward(model, x), y).data) * len(x)
    return total / len(inputs)


def train(model: DsoModel, train_pairs, val_pairs, cfg: TrainConfig = TrainConfig(), on_epoch=None):
    """Adam on one-step MSE; returns ``(final model, LossHistory)``.

    Every epoch visits all training pairs in ``cfg.batch_size`` chunks (the
    final partial batch included), in an order drawn from ``default_rng(seed)``
    when ``cfg.shuffle``. Raises :class:`TrainingDiverged` on a non-finite loss
    or parameter, carrying the last finite parameters.
    """
    x_train, y_train = (np.asarray(a, dtype=np.float64) for a in train_pairs)
    x_val, y_val = (np.asarray(a, dtype=np.float64) for a in val_pairs)
    if x_train.shape != y_train.shape or x_val.shape != y_val.shape:
        raise ShapeError("inputs and targets must have matching shapes")
    history = LossHistory()
    if cfg.epochs == 0:
        return model, history
    if len(x_train) == 0:
        raise ParameterError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    state = te.AdamState(lr=cfg.lr)
    arrays = {n: a.copy() for n, a in model.arrays().items()}
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_train)) if cfg.shuffle else np.arange(len(x_train))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = augment_pairs(x_train[idx], y_train[idx], rng, cfg.augment)
            snapshot = model.with_parameters(arrays)
            loss = te.mse_loss(forward(snapshot, xb), yb)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", step, epoch, arrays)
            te.backward(loss)
            grads = {n: p.grad for n, p in snapshot.parameters.items() if p.grad is not None}
            new_arrays, state = te.adam_update(arrays, grads, state)
            if not all(np.all(np.isfinite(a)) for a in new_arrays.values()):
                raise TrainingDiverged(f"non-finite parameters after step {step} (epoch {epoch})",
                                       step, epoch, arrays)
            arrays = new_arrays
            total += value * len(idx)
            step += 1
        model = model.with_parameters(arrays)
        val = batch_loss(model, x_val, y_val, cfg.batch_size)
        row = {"epoch": epoch, "train_loss": total / len(x_train), "val_loss": val}
        history.epochs.append(row)
        if math.isfinite(val) and val < history.best_val_loss:
            history.best_epoch, history.best_val_loss, history.best_model = epoch, val, model
        if on_epoch is not None:
            on_epoch(row)
    return model, history


# ---------------------------------------------------------------------------
# Baselines and test doubles
# ---------------------------------------------------------------------------

class PersistenceModel:
    """Predicts the input frame unchanged."""

    def predict(self, frames):
        return np.array(frames, dtype=np.float64)


@dataclass
class ScaleModel:
    """Predicts ``a * input``; rollouts have the closed form ``a^k * initial``."""

    a: float

    def predict(self, frames):
        return self.a * np.asarray(frames, dtype=np.float64)


class OracleModel:
    """Looks up the true successor of each input frame in known trajectories."""

    def __init__(self, trajectories):
        data = np.asarray(trajectories, dtype=np.float64)
        self._next = {}
        for traj in data:
            for a, b in zip(traj[:-1], traj[1:]):
                self._next.setdefault(a.tobytes(), b)

    def predict(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        try:
            return np.stack([self._next[f.tobytes()] for f in frames])
        except KeyError:
            raise ParameterError("oracle has no successor for an input frame") from None


def _predict(model, frames: np.ndarray) -> np.ndarray:
    return model.predict(frames)


def rollout(model, initial, t_pred: int) -> np.ndarray:
    """Feed predictions back ``t_pred`` times from ``initial`` (C, H, W).

    Returns (t_pred, C, H, W). A non-finite prediction raises
    :class:`RolloutTruncated` naming the 1-based failing step and carrying the
    frames produced before it.
    """
    if t_pred < 1:
        raise ParameterError(f"t_pred must be >= 1, got {t_pred}")
    frame = np.asarray(initial, dtype=np.float64)[None]
    out = []
    for k in range(1, t_pred + 1):
        frame = _predict(model, frame)
        if not np.all(np.isfinite(frame)):
            raise RolloutTruncated(f"non-finite prediction at rollout step {k}", step=k,
                                   frames=np.array(out).reshape((len(out),) + frame.shape[1:]))
        out.append(frame[0])
    return np.stack(out)


def rollout_batch(model, initial: np.ndarray, t_pred: int):
    """Roll out a batch (B, C, H, W) at once.

    Returns ``(frames, failed_at)`` where ``frames`` is (B, t_pred, C, H, W)
    and ``failed_at[b]`` is the first non-finite step of sample ``b`` (None
    when it completed). Failed samples are dropped from later steps and their
    remaining frames are NaN.
    """
    if t_pred < 1:
        raise ParameterError(f"t_pred must be >= 1, got {t_pred}")
    initial = np.asarray(initial, dtype=np.float64)
    B = initial.shape[0]
    frames = np.full((B, t_pred) + initial.shape[1:], np.nan)
    failed_at = [None] * B
    alive = np.arange(B)
    current = initial
    for k in range(1, t_pred + 1):
        if len(alive) == 0:
            break
        pred = _predict(model, current)
        ok = np.all(np.isfinite(pred.reshape(len(alive), -1)), axis=1)
        for b in alive[~ok]:
            failed_at[b] = k
        frames[alive[ok], k - 1] = pred[ok]
        alive, current = alive[ok], pred[ok]
    return frames, failed_at


def evaluate(model, test_trajectories, ssim_params: SsimParams = SsimParams(), length: float = TWO_PI,
             channel: int = 0, workers: int = 1) -> MetricsReport:
    """Roll out each trajectory from frame 0 for ``T - 1`` steps and average stepwise metrics.

    Samples whose rollout turns non-finite are excluded from the aggregate
    and listed in ``report.excluded``; if every sample fails,
    :class:`RolloutTruncated` is raised.
    """
    data = np.asarray(test_trajectories, dtype=np.float64)
    if data.ndim != 5 or data.shape[1] < 2:
        raise ShapeError(f"expected (N, T >= 2, C, H, W) test trajectories, got {data.shape}")
    if len(data) == 0:
        raise ShapeError("no test trajectories")
    T = data.shape[1]
    frames, failed_at = rollout_batch(model, data[:, 0], T - 1)

    def sample_report(i):
        pred = [Field2D(f[channel], length) for f in frames[i]]
        true = [Field2D(f[channel], length) for f in data[i, 1:]]
        return stepwise_errors(pred, true, ssim_params)

    good = [i for i in range(len(data)) if failed_at[i] is None]
    excluded = [{"index": i, "step": failed_at[i]} for i in range(len(data)) if failed_at[i] is not None]
    if not good:
        raise RolloutTruncated(f"all {len(data)} rollouts became non-finite", step=min(f for f in failed_at))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(sample_report, good))
    else:
        reports = [sample_report(i) for i in good]
    report = MetricsReport.average(reports)
    report.n_excluded = len(excluded)
    report.excluded = excluded
    return report


def persistence_mse(test_trajectories, step: int) -> float:
    """MSE of predicting frame ``step`` by frame 0, averaged over trajectories."""
    data = np.asarray(test_trajectories, dtype=np.float64)
    return float(np.mean((data[:, step] - data[:, 0]) ** 2))
