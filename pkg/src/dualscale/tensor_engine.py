"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the dual-scale model needs are provided: 2D convolution
(regular, depthwise, transposed), linear maps, group/layer normalization,
exact GELU, and the elementwise/reshaping glue around them. Every primitive
records a closure that maps the output gradient to the input gradients;
:func:`backward` replays those closures in reverse topological order and then
releases the graph.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, ParameterError, ShapeError, StateError

_node_ids = itertools.count()
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them on the tape."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        return backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reshaping glue
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(tensors), bw)


def tsum(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.array(np.mean(diff * diff)), (pred,), lambda g: (g * (2.0 / n) * diff,))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _check_4d(name: str, x: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4D (batch, channel, height, width) input, got {x.shape}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_stride_padding(stride, padding):
    if int(stride) != stride or stride < 1:
        raise ParameterError(f"stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ParameterError(f"padding must be a non-negative integer, got {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; weight is (out_ch, in_ch, kh, kw)."""
    _check_4d("conv2d", x)
    _check_stride_padding(stride, padding)
    if weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel {weight.shape} does not match input channels of {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} output channels")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape)
        hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution; weight is (channels, 1, kh, kw)."""
    _check_4d("depthwise_conv2d", x)
    _check_stride_padding(stride, padding)
    if weight.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: kernel {weight.shape} needs shape ({x.shape[1]}, 1, kh, kw)")
    if bias is not None and bias.shape != (x.shape[1],):
        raise ShapeError(f"depthwise_conv2d: bias {bias.shape} does not match {x.shape[1]} channels")
    B, C, H, W = x.shape
    kh, kw = weight.shape[2:]
    xp = _pad(x.data, padding)
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    k = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + hs:stride, j:j + ws:stride] * k[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gxp = np.zeros(xp.shape)
        gk = np.empty((C, kh, kw))
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))
                gk[:, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                gxp[sl] += g * k[None, :, i, j, None, None]
        grads = [gxp[:, :, padding:padding + H, padding:padding + W], gk[:, None]]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight is (in_ch, out_ch, kh, kw).

    Output extent per axis is ``(H - 1) * stride - 2 * padding + kh + output_padding``.
    """
    _check_4d("conv_transpose2d", x)
    _check_stride_padding(stride, padding)
    if int(output_padding) != output_padding or not 0 <= output_padding < stride:
        raise ParameterError(f"output_padding must satisfy 0 <= output_padding < stride ({stride}), "
                             f"got {output_padding}")
    if weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose2d: kernel {weight.shape} does not match input channels of {x.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match {weight.shape[1]} output channels")
    B, Cin, H, W = x.shape
    _, Cout, kh, kw = weight.shape
    Ho = (H - 1) * stride - 2 * padding + kh + output_padding
    Wo = (W - 1) * stride - 2 * padding + kw + output_padding
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output for input {H}x{W}")
    full_h, full_w = (H - 1) * stride + kh, (W - 1) * stride + kw
    big_h, big_w = max(full_h, padding + Ho), max(full_w, padding + Wo)
    hs, ws = stride * (H - 1) + 1, stride * (W - 1) + 1
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (B, H, W, Cout, kh, kw)
    big = np.zeros((B, Cout, big_h, big_w))
    for i in range(kh):
        for j in range(kw):
            big[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(big[:, :, padding:padding + Ho, padding:padding + Wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gbig = np.zeros((B, Cout, big_h, big_w))
        gbig[:, :, padding:padding + Ho, padding:padding + Wo] = g
        win = _windows(gbig[:, :, :full_h, :full_w], kh, kw, stride)  # (B, Cout, H, W, kh, kw)
        gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# Dense, normalization, activation
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out_features, features)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ weight.data, g2.T @ x.data.reshape(-1, x.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def norm(x: Tensor, scale: Tensor, shift: Tensor, mode: str = "group", groups: int = 1,
         eps: float = 1e-10) -> Tensor:
    """Group or layer normalization followed by a per-channel affine map.

    ``mode="group"`` normalizes each sample over (channels in group, H, W);
    ``mode="layer"`` normalizes each spatial location over the channel axis.
    Statistics are per sample, so the result never couples batch entries.
    """
    if x.ndim < 2:
        raise ShapeError(f"norm: input needs a channel axis, got {x.shape}")
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"norm: scale/shift {scale.shape}/{shift.shape} do not match {C} channels")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if mode == "group":
        if groups < 1 or C % groups:
            raise ParameterError(f"norm: {C} channels not divisible into {groups} groups")
        xr = x.data.reshape(x.shape[0], groups, -1)
        axis = 2
    elif mode == "layer":
        xr = x.data
        axis = 1
    else:
        raise ParameterError(f"norm: unknown mode {mode!r}")
    mean = xr.mean(axis=axis, keepdims=True)
    d = xr - mean
    var = np.mean(d * d, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_r = d * inv
    xhat = xhat_r.reshape(x.shape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def bw(g):
        red = (0,) + tuple(range(2, x.ndim))
        gscale = np.sum(g * xhat, axis=red)
        gshift = np.sum(g, axis=red)
        gh = (g * scale.data.reshape(bshape)).reshape(xr.shape)
        gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                    - xhat_r * np.mean(gh * xhat_r, axis=axis, keepdims=True))
        return gx.reshape(x.shape), gscale, gshift

    return _make(out, (x, scale, shift), bw)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map ``node_id -> gradient`` for those leaves. The graph is
    released afterwards; calling backward again on the same loss raises
    :class:`StateError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("the tape behind this loss was already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise StateError("loss is detached from any tape (no input requires grad, or built under no_grad)")
    order = _topo_order(loss)
    grads = {loss.node_id: np.ones(loss.shape)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node.node_id] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
            node.requires_grad = False
    return leaves


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam step.

    ``params`` and ``grads`` map names to arrays; missing grads are treated as
    zero. Returns fresh parameter arrays; ``state`` is advanced in place and
    also returned.
    """
    if state.step_count < 0:
        raise ParameterError("AdamState.step_count must be non-negative")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_update: grad for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_update: moment buffers for {name!r} have shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return new_params, state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return reshape(out, ())
    return tsum(mul(out, projection))


def grad_check(op, inputs, fd_step: float = 1e-4, n_samples: int | None = None, seed: int = 0,
               floor: float = 1e-8) -> float:
    """Max relative error between backward gradients and central differences.

    ``op(*inputs)`` may return any tensor; non-scalar outputs are reduced with
    a fixed random projection so every output entry contributes. With
    ``n_samples`` set, only that many randomly chosen entries per input are
    finite-differenced. The error is ``|a - fd| / max(|a|, |fd|, floor)``;
    raise ``floor`` when some entries have an exactly zero gradient, whose
    finite difference is pure roundoff.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with no_grad():
        probe = op(*inputs)
    projection = None if probe.size == 1 else rng.standard_normal(probe.shape)

    loss = _scalarize(op(*inputs), projection)
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate():
        with no_grad():
            return float(_scalarize(op(*inputs), projection).data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + fd_step
            fp = evaluate()
            flat[i] = orig - fd_step
            fm = evaluate()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * fd_step)
            ai = a.reshape(-1)[i]
            err = abs(ai - fd) / max(abs(ai), abs(fd), floor)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
