"""Dual-scale operator: encoder, local/global translator, decoder with skip.

The encoder lifts the input frame to ``hid_s`` channels and downsamples it;
the translator widens to ``hid_t`` channels and applies ``N_t`` blocks, each
a residual depthwise-separable convolution followed by a residual spatial and
channel mixing MLP; the decoder upsamples back and merges the shallow encoder
features before a 1x1 projection to the output channel count.

Parameters live in a flat ``name -> Tensor`` dict. A model never mutates its
parameters; :meth:`DsoModel.with_parameters` returns a new snapshot.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor_engine as te
from .errors import ConfigurationError, FormatError, ShapeError
from .tensor_engine import Tensor

CHECKPOINT_MAGIC = b"DSOC"
CHECKPOINT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sHHI")


@dataclass(frozen=True)
class DsoConfig:
    n_enc_layers: int = 4
    n_translator_blocks: int = 8
    hid_s: int = 128
    hid_t: int = 256
    in_channels: int = 1
    out_channels: int = 1
    input_hw: tuple = (64, 64)
    enable_local: bool = True
    enable_global: bool = True
    gamma_init: float = 1e-2
    local_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if len(self.input_hw) != 2:
            raise ConfigurationError(f"input_hw must hold two extents, got {self.input_hw}")
        if self.n_enc_layers < 2:
            raise ConfigurationError(f"n_enc_layers must be >= 2, got {self.n_enc_layers}")
        if self.n_translator_blocks < 0:
            raise ConfigurationError(f"n_translator_blocks must be >= 0, got {self.n_translator_blocks}")
        for name in ("hid_s", "hid_t", "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.local_kernel < 1 or self.local_kernel % 2 == 0:
            raise ConfigurationError(f"local_kernel must be odd and positive, got {self.local_kernel}")
        if not (self.enable_local or self.enable_global):
            raise ConfigurationError("at least one of enable_local / enable_global must be true")
        if not math.isfinite(self.gamma_init):
            raise ConfigurationError("gamma_init must be finite")
        f = self.downsample
        H, W = self.input_hw
        bad = [f"{name}={v}" for name, v in (("H", H), ("W", W)) if v < 1 or v % f]
        if bad:
            raise ConfigurationError(f"input extents {', '.join(bad)} are not divisible by the encoder's "
                                     f"downsampling factor {f}")

    @property
    def strides(self) -> list[int]:
        return [1 if i % 2 == 0 else 2 for i in range(self.n_enc_layers)]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    @property
    def latent_hw(self) -> tuple[int, int]:
        H, W = self.input_hw
        return H // self.downsample, W // self.downsample

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DsoConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def norm_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else math.gcd(8, channels)


def parameter_shapes(cfg: DsoConfig) -> dict[str, tuple]:
    """Every parameter name with its shape, in initialization order."""
    s, t, k = cfg.hid_s, cfg.hid_t, cfg.local_kernel
    P = cfg.latent_hw[0] * cfg.latent_hw[1]
    shapes = {}
    for i in range(cfg.n_enc_layers):
        cin = cfg.in_channels if i == 0 else s
        shapes[f"enc.{i}.w"] = (s, cin, 3, 3)
        shapes[f"enc.{i}.b"] = (s,)
        shapes[f"enc.{i}.scale"] = (s,)
        shapes[f"enc.{i}.shift"] = (s,)
    shapes["trans.in.w"] = (t, s, 1, 1)
    shapes["trans.in.b"] = (t,)
    for b in range(cfg.n_translator_blocks):
        p = f"block.{b}."
        shapes[p + "local.gamma"] = (1,)
        shapes[p + "local.scale"] = (t,)
        shapes[p + "local.shift"] = (t,)
        shapes[p + "local.dw.w"] = (t, 1, k, k)
        shapes[p + "local.dw.b"] = (t,)
        shapes[p + "local.pw.w"] = (t, t, 1, 1)
        shapes[p + "local.pw.b"] = (t,)
        shapes[p + "global.ln1.scale"] = (t,)
        shapes[p + "global.ln1.shift"] = (t,)
        shapes[p + "global.sp1.w"] = (P, P)
        shapes[p + "global.sp1.b"] = (P,)
        shapes[p + "global.sp2.w"] = (P, P)
        shapes[p + "global.sp2.b"] = (P,)
        shapes[p + "global.ln2.scale"] = (t,)
        shapes[p + "global.ln2.shift"] = (t,)
        shapes[p + "global.ch1.w"] = (2 * t, t)
        shapes[p + "global.ch1.b"] = (2 * t,)
        shapes[p + "global.ch2.w"] = (t, 2 * t)
        shapes[p + "global.ch2.b"] = (t,)
    shapes["trans.out.w"] = (s, t, 1, 1)
    shapes["trans.out.b"] = (s,)
    for i in range(cfg.n_enc_layers - 1):
        shapes[f"dec.{i}.w"] = (s, s, 3, 3)
        shapes[f"dec.{i}.b"] = (s,)
        shapes[f"dec.{i}.scale"] = (s,)
        shapes[f"dec.{i}.shift"] = (s,)
    shapes["dec.final.w"] = (2 * s, s, 3, 3)
    shapes["dec.final.b"] = (s,)
    shapes["dec.final.scale"] = (s,)
    shapes["dec.final.shift"] = (s,)
    shapes["proj.w"] = (cfg.out_channels, s, 1, 1)
    shapes["proj.b"] = (cfg.out_channels,)
    return shapes


def parameter_count(cfg: DsoConfig) -> int:
    return sum(int(np.prod(shape)) for shape in parameter_shapes(cfg).values())


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("dec.") and name.endswith(".w"):
        return shape[0] * shape[2] * shape[3]  # transposed conv: (in, out, kh, kw)
    return int(np.prod(shape[1:]))


def _initial_value(name: str, shape: tuple, cfg: DsoConfig, rng: np.random.Generator,
                   fan_ins: dict) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.full(shape, float(cfg.gamma_init))
    if name.endswith(".scale"):
        return np.ones(shape)
    if name.endswith(".shift"):
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(fan_ins[name.rsplit(".", 1)[0]])
    return rng.uniform(-bound, bound, size=shape)


class DsoModel:
    """Immutable parameter snapshot plus its configuration.

    ``trace`` is an optional callable invoked as ``trace(event, block_index)``
    with ``event`` in {"local", "global"} as the translator runs.
    """

    def __init__(self, config: DsoConfig, parameters: dict, trace=None):
        expected = parameter_shapes(config)
        if set(parameters) != set(expected):
            missing = sorted(set(expected) - set(parameters))
            extra = sorted(set(parameters) - set(expected))
            raise ConfigurationError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        params = {}
        for name, shape in expected.items():
            p = parameters[name]
            p = p if isinstance(p, Tensor) else Tensor(p)
            if p.shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {p.shape}, expected {shape}")
            params[name] = p
        self.config = config
        self.parameters = params
        self.trace = trace

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters.items()}

    def with_parameters(self, arrays: dict) -> "DsoModel":
        return DsoModel(self.config, {n: Tensor(np.array(a, dtype=np.float64), requires_grad=True)
                                      for n, a in arrays.items()}, self.trace)

    def with_tensors(self, tensors: dict) -> "DsoModel":
        """Snapshot sharing the given tensors, so gradients flow back to them."""
        return DsoModel(self.config, tensors, self.trace)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def __call__(self, x):
        return forward(self, x)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        return predict(self, frames)


def build_model(config: DsoConfig, seed: int = 0) -> DsoModel:
    """Initialize every parameter from ``default_rng(seed)`` in a fixed order."""
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(config)
    fan_ins = {name.rsplit(".", 1)[0]: _fan_in(name, shape)
               for name, shape in shapes.items() if name.endswith(".w")}
    params = {name: Tensor(_initial_value(name, shape, config, rng, fan_ins), requires_grad=True)
              for name, shape in shapes.items()}
    return DsoModel(config, params)


def _act_norm(model: DsoModel, x: Tensor, prefix: str) -> Tensor:
    p = model.parameters
    y = te.norm(x, p[prefix + "scale"], p[prefix + "shift"], mode="group", groups=norm_groups(x.shape[1]))
    return te.gelu(y)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def encode(model: DsoModel, omega_in) -> tuple[Tensor, Tensor]:
    """Return the latent and the first layer's features ``p1``."""
    x = _as_input(omega_in)
    cfg = model.config
    expected = (cfg.in_channels,) + cfg.input_hw
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"encode: expected input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    p = model.parameters
    skip = None
    for i, stride in enumerate(cfg.strides):
        x = te.conv2d(x, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride=stride, padding=1)
        x = _act_norm(model, x, f"enc.{i}.")
        if i == 0:
            skip = x
    return x, skip


def _check_latent(model: DsoModel, z: Tensor, name: str):
    if z.ndim != 4 or z.shape[1] != model.config.hid_t:
        raise ShapeError(f"{name}: expected (B, {model.config.hid_t}, H', W') input, got {z.shape}")


def f_local(model: DsoModel, block_index: int, z: Tensor) -> Tensor:
    """``z + gamma * pointwise(gelu(depthwise(norm(z))))``; identity when disabled."""
    _check_latent(model, z, "f_local")
    if model.trace is not None:
        model.trace("local", block_index)
    if not model.config.enable_local:
        return z
    p = model.parameters
    pre = f"block.{block_index}.local."
    k = model.config.local_kernel
    y = te.norm(z, p[pre + "scale"], p[pre + "shift"], mode="group", groups=norm_groups(z.shape[1]))
    y = te.depthwise_conv2d(y, p[pre + "dw.w"], p[pre + "dw.b"], padding=k // 2)
    y = te.conv2d(te.gelu(y), p[pre + "pw.w"], p[pre + "pw.b"])
    return z + te.reshape(p[pre + "gamma"], (1, 1, 1, 1)) * y


def f_global(model: DsoModel, block_index: int, z: Tensor) -> Tensor:
    """``z + MLP_channel(LN(MLP_spatial(LN(z))))``; identity when disabled.

    The spatial MLP mixes the flattened ``H'*W'`` positions of each channel,
    so its weights are tied to the configured latent resolution.
    """
    _check_latent(model, z, "f_global")
    B, C, H, W = z.shape
    if (H, W) != model.config.latent_hw:
        raise ConfigurationError(f"f_global: spatial-mixing weights are bound to latent grid "
                                 f"{model.config.latent_hw}, got {(H, W)}")
    if model.trace is not None:
        model.trace("global", block_index)
    if not model.config.enable_global:
        return z
    p = model.parameters
    pre = f"block.{block_index}.global."
    y = te.norm(z, p[pre + "ln1.scale"], p[pre + "ln1.shift"], mode="layer")
    y = te.reshape(y, (B, C, H * W))
    y = te.linear(te.gelu(te.linear(y, p[pre + "sp1.w"], p[pre + "sp1.b"])), p[pre + "sp2.w"], p[pre + "sp2.b"])
    y = te.norm(te.reshape(y, (B, C, H, W)), p[pre + "ln2.scale"], p[pre + "ln2.shift"], mode="layer")
    y = te.transpose(y, (0, 2, 3, 1))
    y = te.linear(te.gelu(te.linear(y, p[pre + "ch1.w"], p[pre + "ch1.b"])), p[pre + "ch2.w"], p[pre + "ch2.b"])
    return z + te.transpose(y, (0, 3, 1, 2))


def translate(model: DsoModel, latent: Tensor, n_blocks: int | None = None) -> Tensor:
    """Project to ``hid_t``, run the blocks (local then global), project back.

    ``n_blocks`` limits how many blocks run; ``0`` leaves only the projections.
    """
    cfg = model.config
    if latent.ndim != 4 or latent.shape[1] != cfg.hid_s:
        raise ShapeError(f"translate: expected (B, {cfg.hid_s}, H', W') latent, got {latent.shape}")
    n = cfg.n_translator_blocks if n_blocks is None else n_blocks
    if not 0 <= n <= cfg.n_translator_blocks:
        raise ConfigurationError(f"n_blocks must lie in [0, {cfg.n_translator_blocks}], got {n}")
    p = model.parameters
    z = te.conv2d(latent, p["trans.in.w"], p["trans.in.b"])
    for b in range(n):
        z = f_global(model, b, f_local(model, b, z))
    return te.conv2d(z, p["trans.out.w"], p["trans.out.b"])


def decode(model: DsoModel, translated: Tensor, skip_p1: Tensor) -> Tensor:
    cfg = model.config
    lh, lw = cfg.latent_hw
    if translated.ndim != 4 or translated.shape[1:] != (cfg.hid_s, lh, lw):
        raise ShapeError(f"decode: expected (B, {cfg.hid_s}, {lh}, {lw}) input, got {translated.shape}")
    if skip_p1.ndim != 4 or skip_p1.shape[1:] != (cfg.hid_s,) + cfg.input_hw or \
            skip_p1.shape[0] != translated.shape[0]:
        raise ShapeError(f"decode: skip features {skip_p1.shape} do not match the encoder's first layer")
    p = model.parameters
    q = translated
    for i, stride in enumerate(reversed(cfg.strides[1:])):
        q = te.conv_transpose2d(q, p[f"dec.{i}.w"], p[f"dec.{i}.b"], stride=stride, padding=1,
                                output_padding=stride - 1)
        q = _act_norm(model, q, f"dec.{i}.")
    s0 = cfg.strides[0]
    q = te.conv_transpose2d(te.concat([q, skip_p1], axis=1), p["dec.final.w"], p["dec.final.b"],
                            stride=s0, padding=1, output_padding=s0 - 1)
    q = _act_norm(model, q, "dec.final.")
    return te.conv2d(q, p["proj.w"], p["proj.b"])


def forward(model: DsoModel, omega_t) -> Tensor:
    latent, skip = encode(model, omega_t)
    return decode(model, translate(model, latent), skip)


def predict(model: DsoModel, frames: np.ndarray) -> np.ndarray:
    """Gradient-free forward on a (B, C, H, W) array."""
    with te.no_grad():
        return forward(model, Tensor(frames)).data


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: DsoModel, path, extra: dict | None = None) -> None:
    """Write ``DSOC`` | u16 version | u16 reserved | u32 header length | JSON header | f32 blobs.

    The header holds the model config, a manifest of ``name -> {shape, offset}``
    (offsets in bytes from the start of the blob section) and ``extra``.
    """
    write_checkpoint(path, {"kind": "dso", "config": model.config.to_dict()}, model.arrays(), extra)


def write_checkpoint(path, header: dict, arrays: dict, extra: dict | None = None) -> None:
    manifest, blobs, offset = {}, [], 0
    for name, a in arrays.items():
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        manifest[name] = {"shape": list(np.shape(a)), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    doc = dict(header, manifest=manifest, extra=extra or {})
    head = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, arrays)`` with arrays as float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError(f"checkpoint shorter than its {_CKPT_PREFIX.size}-byte prefix", offset=len(raw))
    magic, version, _, head_len = _CKPT_PREFIX.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC.decode()!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    start = _CKPT_PREFIX.size
    if len(raw) < start + head_len:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=start) from exc
    base = start + head_len
    arrays = {}
    for name, entry in header.get("manifest", {}).items():
        shape = tuple(entry["shape"])
        lo = base + entry["offset"]
        hi = lo + 4 * int(np.prod(shape))
        if hi > len(raw):
            raise FormatError(f"truncated blob for parameter {name!r}", offset=len(raw))
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=lo) \
            .reshape(shape).astype(np.float64)
    return header, arrays


def load_checkpoint(path) -> tuple[DsoModel, dict]:
    """Rebuild a model from a ``dso`` checkpoint; returns ``(model, header)``."""
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "dso":
        raise FormatError(f"checkpoint kind {header.get('kind')!r} is not a dual-scale model", offset=0)
    cfg = DsoConfig.from_dict(header["config"])
    return DsoModel(cfg, {n: Tensor(a, requires_grad=True) for n, a in arrays.items()}), header


def ablated(config: DsoConfig, ablate: str | None) -> DsoConfig:
    """Config with the ``local`` or ``global`` pathway switched off."""
    if ablate is None:
        return config
    if ablate == "local":
        return replace(config, enable_local=False)
    if ablate == "global":
        return replace(config, enable_global=False)
    raise ConfigurationError(f"unknown ablation {ablate!r}; expected 'local' or 'global'")
