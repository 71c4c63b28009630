"""Attention-gated U-Net for 2D multi-class segmentation.

Parameter names are stable and used by the weights file format:

* ``enc{i}.conv{1,2}.weight|bias``   encoder level ``i`` (0 = full resolution)
* ``bottleneck.conv{1,2}.weight|bias``
* ``dec{i}.up.weight|bias``          transposed conv feeding decoder level ``i``
* ``dec{i}.att.wg|wx|b1|psi|b2``     attention gate on the level-``i`` skip
* ``dec{i}.conv{1,2}.weight|bias``
* ``head.weight|bias``               1x1 classifier

Decoder levels run from ``depth-1`` down to 0; ``dec0.conv2`` is the last 3x3
convolution before the head and is the layer Grad-CAM reads.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    get_dtype,
    maxpool2d,
    mul_elementwise,
    relu,
    sigmoid,
    softmax_channels,
    transpose_conv2d,
)

PENULTIMATE_LAYER = "dec0.conv2"

WEIGHTS_MAGIC = b"AUNETWT1"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    num_classes: int = 4
    depth: int = 4
    base_filters: int = 64
    attention_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("in_channels", "num_classes", "depth", "base_filters"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.num_classes < 2:
            raise ValueError("ModelConfig.num_classes must be >= 2")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    @property
    def bottleneck_filters(self) -> int:
        return self.filters(self.depth)


class AttentionUNet:
    """Named parameters plus the topology implied by a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __call__(self, x, return_intermediates: bool = False):
        return forward(self, x, return_intermediates=return_intermediates)

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.params[name].data = np.array(value, dtype=self.params[name].data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = config.in_channels
    for i in range(config.depth):
        f = config.filters(i)
        conv(f"enc{i}.conv1", f, cin, 3)
        conv(f"enc{i}.conv2", f, f, 3)
        cin = f
    fb = config.bottleneck_filters
    conv("bottleneck.conv1", fb, cin, 3)
    conv("bottleneck.conv2", fb, fb, 3)
    below = fb
    for i in reversed(range(config.depth)):
        f = config.filters(i)
        shapes[f"dec{i}.up.weight"] = (below, f, 2, 2)
        shapes[f"dec{i}.up.bias"] = (f,)
        if config.attention_enabled:
            f_int = max(1, f // 2)
            shapes[f"dec{i}.att.wg"] = (f_int, f, 1, 1)
            shapes[f"dec{i}.att.wx"] = (f_int, f, 1, 1)
            shapes[f"dec{i}.att.b1"] = (f_int,)
            shapes[f"dec{i}.att.psi"] = (1, f_int, 1, 1)
            shapes[f"dec{i}.att.b2"] = (1,)
        conv(f"dec{i}.conv1", f, 2 * f, 3)
        conv(f"dec{i}.conv2", f, f, 3)
        below = f
    conv("head", config.num_classes, config.base_filters, 1)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".up.weight"):
        # each transposed-conv output pixel receives exactly Cin terms
        return shape[0]
    return int(np.prod(shape[1:]))


def build_model(config: ModelConfig) -> AttentionUNet:
    """He-normal kernels from a generator seeded with ``config.seed``; zero biases."""
    rng = np.random.default_rng(config.seed)
    dtype = get_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(config).items():
        if len(shape) == 4:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            value = rng.standard_normal(shape) * std
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, dtype=dtype)
    return AttentionUNet(config, params)


def _conv(model: AttentionUNet, name: str, x: Tensor) -> Tensor:
    return conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], padding="same")


def encoder_block(model: AttentionUNet, level: int, x: Tensor) -> tuple[Tensor, Tensor]:
    """Two 3x3 conv+relu layers, then 2x2 max-pool. Returns (skip features, pooled)."""
    h = relu(_conv(model, f"enc{level}.conv1", x))
    h = relu(_conv(model, f"enc{level}.conv2", h))
    return h, maxpool2d(h)


def attention_gate(model: AttentionUNet, level: int, skip: Tensor, gate: Tensor, return_alpha: bool = False):
    """Additive attention: ``skip * sigmoid(psi(relu(Wg*gate + Wx*skip + b1)) + b2)``."""
    if skip.shape != gate.shape:
        raise ShapeError(f"attention_gate: skip {skip.shape} and gate {gate.shape} differ")
    p = model.params
    inter = relu(add(conv2d(gate, p[f"dec{level}.att.wg"], p[f"dec{level}.att.b1"], padding="valid"),
                     conv2d(skip, p[f"dec{level}.att.wx"], padding="valid")))
    alpha = sigmoid(conv2d(inter, p[f"dec{level}.att.psi"], p[f"dec{level}.att.b2"], padding="valid"))
    gated = mul_elementwise(skip, alpha)
    return (gated, alpha) if return_alpha else gated


def decoder_block(model: AttentionUNet, level: int, x: Tensor, skip: Tensor) -> Tensor:
    p = model.params
    up = transpose_conv2d(x, p[f"dec{level}.up.weight"], p[f"dec{level}.up.bias"])
    if up.shape != skip.shape:
        raise ShapeError(f"decoder level {level}: upsampled {up.shape} does not match skip {skip.shape}")
    if model.config.attention_enabled:
        skip = attention_gate(model, level, skip, up)
    h = concat_channels(skip, up)
    h = relu(_conv(model, f"dec{level}.conv1", h))
    return relu(_conv(model, f"dec{level}.conv2", h))


def forward(model: AttentionUNet, x, return_intermediates: bool = False):
    """Class probabilities ``[N, num_classes, H, W]``.

    With ``return_intermediates`` a dict is returned instead holding
    ``probs``, the pre-softmax ``logits`` and the ``penultimate`` activation.
    """
    cfg = model.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"forward expects [N,{cfg.in_channels},H,W], got {x.shape}")
    step = 2 ** cfg.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"input H and W must be divisible by {step}, got {x.shape}")
    skips = []
    h = x
    for i in range(cfg.depth):
        s, h = encoder_block(model, i, h)
        skips.append(s)
    h = relu(_conv(model, "bottleneck.conv1", h))
    h = relu(_conv(model, "bottleneck.conv2", h))
    for i in reversed(range(cfg.depth)):
        h = decoder_block(model, i, h, skips[i])
    logits = _conv(model, "head", h)
    probs = softmax_channels(logits)
    if return_intermediates:
        return {"probs": probs, "logits": logits, "penultimate": h}
    return probs


def predict_mask(probs) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest class index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1).astype(np.int64)


# -- persistence ---------------------------------------------------------------
class WeightsError(Exception):
    """Base class for weights-file load failures."""


class MagicMismatchError(WeightsError):
    pass


class VersionMismatchError(WeightsError):
    pass


class TruncatedFileError(WeightsError):
    pass


class UnknownParameterError(WeightsError):
    pass


class MissingParameterError(WeightsError):
    pass


class ParameterShapeError(WeightsError):
    pass


class ConfigMismatchError(WeightsError):
    pass


def save_weights(model: AttentionUNet, path) -> None:
    cfg = model.config
    chunks = [
        WEIGHTS_MAGIC,
        struct.pack("<I", WEIGHTS_VERSION),
        struct.pack("<5I", cfg.in_channels, cfg.num_classes, cfg.depth, cfg.base_filters, int(cfg.attention_enabled)),
        struct.pack("<I", len(model.params)),
    ]
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"weights file truncated while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path, expected: ModelConfig | None = None) -> AttentionUNet:
    """Rebuild a model from a weights file.

    ``expected`` (if given) must agree with the stored topology, otherwise
    :class:`ConfigMismatchError` is raised; its seed is kept on the result.
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(8, "magic")
    if magic != WEIGHTS_MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    (version,) = reader.unpack("<I", "version")
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(f"unsupported weights version {version}")
    in_ch, n_cls, depth, base, att = reader.unpack("<5I", "config block")
    config = ModelConfig(in_channels=in_ch, num_classes=n_cls, depth=depth, base_filters=base,
                         attention_enabled=bool(att), seed=expected.seed if expected else 0)
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"weights were saved for {config}, config asks for {expected}")
    (count,) = reader.unpack("<I", "parameter count")
    model = build_model(config)
    shapes = {k: v.shape for k, v in model.params.items()}
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "parameter name").decode("utf-8")
        (rank,) = reader.unpack("<B", f"rank of {name}")
        extents = reader.unpack(f"<{rank}I", f"extents of {name}")
        if name not in shapes:
            raise UnknownParameterError(f"unknown parameter {name!r}")
        if tuple(extents) != shapes[name]:
            raise ParameterShapeError(f"parameter {name!r} has shape {tuple(extents)}, expected {shapes[name]}")
        n = int(np.prod(extents))
        raw = np.frombuffer(reader.take(4 * n, f"values of {name}"), dtype="<f4").reshape(extents)
        model.params[name].data = raw.astype(get_dtype())
        seen.add(name)
    missing = [k for k in shapes if k not in seen]
    if missing:
        raise MissingParameterError(f"weights file lacks parameter(s): {', '.join(missing)}")
    return model


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
