"""Layers, the MiniFCN backbone, gradient checking and checkpoint files.

Activations flow through the layers channels-last, (batch, height, width,
channel). Layers keep the activations of their most recent forward call and consume
them in ``backward``; gradients are *accumulated* into ``Param.grad`` so a
batch may be pushed through in several pieces before the optimizer step.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, NumericalError


class Param:
    """A trainable array with its gradient accumulator and momentum state."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.momentum_buffer = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum_buffer = self.momentum_buffer.astype(dtype)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Layer:
    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray):
        raise KeyError(name)

    def kinks(self) -> bytes:
        """Which side of each non-differentiable point the last forward took."""
        return b""

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        return self


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Layer):
    def __init__(self, name: str, spec: T.ConvSpec, rng: np.random.Generator, bias: bool = True):
        self.name = name
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        self.weight = Param(f"{name}.weight", he_normal(rng, shape, fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(spec.out_channels, np.float32)) if bias else None
        self.need_input_grad = True
        self._cache = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, mode="train"):
        w = self.weight.value
        b = self.bias.value if self.bias is not None else np.zeros(self.spec.out_channels, w.dtype)
        y, cols = T.conv2d_forward_nhwc(x, w, b, self.spec, return_cols=True)
        self._cache = (x, cols)
        return y

    def backward(self, dy):
        x, cols = self._cache
        dx, dw, db = T.conv2d_backward_nhwc(x, self.weight.value, self.spec, dy, cols=cols,
                                       need_input_grad=self.need_input_grad)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        self._cache = None
        return dx


class BatchNorm2d(Layer):
    def __init__(self, name: str, channels: int, momentum_bn: float = 0.1, epsilon: float = 1e-5):
        self.name = name
        self.scale = Param(f"{name}.scale", np.ones(channels, np.float32))
        self.shift = Param(f"{name}.shift", np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum_bn = momentum_bn
        self.epsilon = epsilon
        self._cache = None

    def params(self):
        return [self.scale, self.shift]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def set_buffer(self, name, value):
        if name == f"{self.name}.running_mean":
            self.running_mean = value.astype(np.float32)
        elif name == f"{self.name}.running_var":
            self.running_var = value.astype(np.float32)
        else:
            raise KeyError(name)

    def forward(self, x, mode="train"):
        y, self._cache, self.running_mean, self.running_var = T.batchnorm_forward_nhwc(
            x, self.scale.value, self.shift.value, mode, self.running_mean, self.running_var,
            self.momentum_bn, self.epsilon)
        return y

    def backward(self, dy):
        dx, dscale, dshift = T.batchnorm_backward_nhwc(dy, self._cache)
        self.scale.grad += dscale
        self.shift.grad += dshift
        self._cache = None
        return dx


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x, mode="train"):
        self._x = x
        return T.relu(x)

    def kinks(self):
        return b"" if self._x is None else np.packbits(self._x.reshape(-1) > 0).tobytes()

    def backward(self, dy):
        dx = T.relu_backward(self._x, dy)
        self._x = None
        return dx


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def set_buffer(self, name, value):
        for layer in self.layers:
            if name in layer.buffers():
                layer.set_buffer(name, value)
                return
        raise KeyError(name)

    def kinks(self):
        return b"".join(layer.kinks() for layer in self.layers)

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def conv_norm_relu(name, in_ch, out_ch, stride, rng, relu=True):
    layers = [Conv2d(f"{name}.conv", T.ConvSpec(in_ch, out_ch, 3, 3, stride), rng, bias=False),
              BatchNorm2d(f"{name}.bn", out_ch)]
    if relu:
        layers.append(ReLU())
    return Sequential(layers)


class ResidualBlock(Layer):
    """Two conv-norm units with an identity skip, then ReLU.

    The skip is only defined when input and output shapes agree, so the
    block refuses channel changes and strides other than 1.
    """

    def __init__(self, name, in_ch, out_ch, rng, stride=1, skip=True):
        if skip and (in_ch != out_ch or stride != 1):
            raise ConfigError(
                f"{name}: residual skip needs matching shapes, got {in_ch}->{out_ch} channels, stride {stride}"
            )
        self.skip = skip
        self.body = Sequential([conv_norm_relu(f"{name}.a", in_ch, out_ch, stride, rng),
                                conv_norm_relu(f"{name}.b", out_ch, out_ch, 1, rng, relu=False)])
        self.out_relu = ReLU()

    def params(self):
        return self.body.params()

    def buffers(self):
        return self.body.buffers()

    def set_buffer(self, name, value):
        self.body.set_buffer(name, value)

    def kinks(self):
        return self.body.kinks() + self.out_relu.kinks()

    def forward(self, x, mode="train"):
        y = self.body.forward(x, mode)
        if self.skip:
            y = y + x
        return self.out_relu.forward(y, mode)

    def backward(self, dy):
        dy = self.out_relu.backward(dy)
        dx = self.body.backward(dy)
        if self.skip:
            dx = dx + dy
        return dx


@dataclass(frozen=True)
class BackboneConfig:
    """Stage layout of the MiniFCN backbone.

    Each stage is ``(out_channels, num_blocks, stride)``: one strided
    conv-norm-relu transition followed by ``num_blocks`` residual blocks.
    """

    stages: tuple[tuple[int, int, int], ...] = ((16, 1, 2), (32, 1, 2), (64, 1, 2), (64, 1, 1))
    in_channels: int = 3
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for i, (ch, nb, st) in enumerate(self.stages):
            if ch < 1 or nb < 0 or st < 1:
                raise ConfigError(f"invalid stage {i}: channels={ch}, blocks={nb}, stride={st}")

    @property
    def global_stride(self) -> int:
        return math.prod(s[2] for s in self.stages)

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        for _, _, st in self.stages:
            h, w = math.ceil(h / st), math.ceil(w / st)
        return h, w

    def with_strides(self, strides) -> "BackboneConfig":
        stages = tuple((c, b, s) for (c, b, _), s in zip(self.stages, strides))
        return BackboneConfig(stages, self.in_channels, self.residual)

    def to_dict(self):
        return {"stages": [list(s) for s in self.stages], "in_channels": self.in_channels,
                "residual": self.residual}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(s) for s in d["stages"]), d["in_channels"], d["residual"])


# Stem plus four banks of two residual blocks (64-128-256-512 channels), the
# stage layout of ResNet18. The last two banks use stride 1 instead of 2,
# giving a global stride of 8 instead of 32.
FULL_SCALE = BackboneConfig(((64, 0, 2), (64, 2, 2), (128, 2, 2), (256, 2, 1), (512, 2, 1)))
DESK_SCALE = BackboneConfig()


class Backbone(Sequential):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        layers = []
        in_ch = config.in_channels
        for i, (ch, nb, st) in enumerate(config.stages):
            layers.append(conv_norm_relu(f"stage{i}.down", in_ch, ch, st, rng))
            for j in range(nb):
                layers.append(ResidualBlock(f"stage{i}.block{j}", ch, ch, rng, skip=config.residual))
            in_ch = ch
        super().__init__(layers)
        self.input_grad = False

    @property
    def input_grad(self) -> bool:
        """Whether ``backward`` returns the gradient w.r.t. the images (off for training)."""
        return self.layers[0].layers[0].need_input_grad

    @input_grad.setter
    def input_grad(self, value: bool):
        self.layers[0].layers[0].need_input_grad = bool(value)

    def forward(self, x, mode="train"):
        if x.ndim != 4 or x.shape[3] != self.config.in_channels:
            raise ConfigError(
                f"backbone expects (n, h, w, {self.config.in_channels}) input, got {x.shape}"
            )
        return super().forward(x, mode)


def init_params(config: BackboneConfig, seed: int) -> Backbone:
    """Fresh backbone: He-normal conv weights, unit scale, zero shift and bias."""
    return Backbone(config, np.random.default_rng(seed))


def backbone_forward(backbone: Backbone, images, mode="eval"):
    return backbone.forward(images, mode)


def _projection_loss(rng):
    state = {}

    def loss(y):
        if "r" not in state or state["r"].shape != y.shape:
            state["r"] = rng.standard_normal(y.shape)
        r = state["r"]
        return float(np.sum(r * y)), r.astype(y.dtype)

    return loss


def grad_check(module, x, loss=None, epsilon=1e-4, n_params=200, n_inputs=200, seed=0, mode="train"):
    """Largest relative error between analytic and central-difference gradients.

    ``module`` needs ``forward(x, mode)``, ``backward(dy)`` and ``params()``;
    ``loss`` maps the module output to ``(scalar, d scalar / d output)`` and
    defaults to a fixed random linear projection. Run it on a float64 module.

    A central difference that straddles a ReLU kink or an extremum switch
    measures a one-sided mixture, not the derivative. When the module
    reports ``kinks()``, probes whose +/- evaluations change that signature
    are kept in ``details`` with ``smooth=False`` and left out of the max.
    Returns ``(max_rel_error, details)``; each detail is
    ``(name, analytic, numeric, smooth)``.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    loss = loss or _projection_loss(np.random.default_rng(seed + 1))
    x = np.array(x, dtype=np.float64)
    params = module.params()
    buffers = {k: v.copy() for k, v in module.buffers().items()}
    kinks = getattr(module, "kinks", lambda: b"")

    def restore():
        for k, v in buffers.items():
            module.set_buffer(k, v.copy())

    def f(inp):
        restore()
        value, _ = loss(module.forward(inp, mode))
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} during gradient check")
        return value, kinks()

    for p in params:
        p.zero_grad()
    restore()
    out = module.forward(x, mode)
    base = kinks()
    value, dout = loss(out)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} during gradient check")
    dx = module.backward(dout)
    restore()

    def probe(name, arr, i, analytic):
        old = arr[i]
        arr[i] = old + epsilon
        fp, kp = f(x)
        arr[i] = old - epsilon
        fm, km = f(x)
        arr[i] = old
        checks.append((name, analytic, (fp - fm) / (2 * epsilon), kp == base and km == base))

    checks = []
    flat = [(p, i) for p in params for i in range(p.value.size)]
    if flat:
        for k in rng.choice(len(flat), size=min(n_params, len(flat)), replace=False):
            p, i = flat[k]
            probe(p.name, p.value.reshape(-1), i, p.grad.reshape(-1)[i])
    if dx is not None:
        xf = x.reshape(-1)
        dxf = dx.reshape(-1)
        for i in rng.choice(xf.size, size=min(n_inputs, xf.size), replace=False):
            probe("input", xf, i, dxf[i])
    restore()
    worst = max((relative_error(a, n) for _, a, n, smooth in checks if smooth), default=0.0)
    return worst, checks


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"HSEED1"


def canonical_config_text(config: dict) -> str:
    return "".join(f"{k}={json.dumps(config[k], sort_keys=True)}\n" for k in sorted(config))


def parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key] = json.loads(value)
    return out


def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]):
    """Write ``MAGIC``, the canonical config text and each tensor as
    (name, dims, little-endian float32 data)."""
    text = canonical_config_text(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        config = parse_config_text(data[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = math.prod(dims) * 4
            if pos + size > len(data):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=math.prod(dims), offset=pos) \
                .reshape(dims).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return config, tensors
