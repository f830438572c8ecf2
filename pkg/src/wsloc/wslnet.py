"""Class-map head: 1x1 multi-map convolution, class-wise averaging, spatial pooling.

The network returns raw per-class localization maps together with one pooled
score per class. Pooling is ``max(z) + alpha * min(z)`` (ESP) or plain
``max(z)`` (MSP, which is ESP with ``alpha = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int = 5
    maps_per_class: int = 4
    pooling: str = "ESP"
    alpha: float = 0.6

    def __post_init__(self):
        if self.num_classes < 1 or self.maps_per_class < 1:
            raise ConfigError(f"invalid head: C={self.num_classes}, M={self.maps_per_class}")
        if self.pooling not in ("ESP", "MSP"):
            raise ConfigError(f"pooling must be ESP or MSP, got {self.pooling!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.pooling == "ESP" else 0.0

    @property
    def num_filters(self) -> int:
        return self.num_classes * self.maps_per_class


def multimap_average(stacked, num_classes: int, maps_per_class: int):
    """Average class-major groups of ``maps_per_class`` channels into one map per class."""
    n, ch, h, w = stacked.shape
    if ch != num_classes * maps_per_class:
        raise ConfigError(
            f"{ch} channels cannot be split into {num_classes} groups of {maps_per_class}"
        )
    if maps_per_class == 1:
        return stacked.copy()
    return stacked.reshape(n, num_classes, maps_per_class, h, w).mean(axis=2)


def multimap_average_backward(grad_maps, maps_per_class: int):
    n, c, h, w = grad_maps.shape
    g = grad_maps / grad_maps.dtype.type(maps_per_class)
    return np.broadcast_to(g[:, :, None], (n, c, maps_per_class, h, w)).reshape(n, c * maps_per_class, h, w)


def spatial_pool(maps, alpha: float):
    """Pool every (sample, class) map to a score.

    Returns ``(scores, routing)`` where ``routing`` feeds
    :func:`spatial_pool_backward`. ``alpha = 0`` gives max pooling.
    """
    if maps.ndim != 4 or maps.shape[2] * maps.shape[3] == 0:
        raise ConfigError(f"spatial_pool needs non-empty (n, c, h, w) maps, got {maps.shape}")
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    vmax, imax, vmin, imin = T.batch_extrema(maps)
    a = maps.dtype.type(alpha)
    scores = vmax + a * vmin if alpha else vmax.copy()
    return scores, (maps.shape, imax, imin, alpha)


def spatial_pool_backward(grad_scores, routing):
    """Send each score gradient to the argmax site and ``alpha`` times it to the argmin site.

    When both are the same site (a constant map) it receives ``(1 + alpha)``
    times the gradient.
    """
    shape, imax, imin, alpha = routing
    n, c, h, w = shape
    g = np.zeros((n * c, h * w), dtype=grad_scores.dtype)
    rows = np.arange(n * c)
    gs = grad_scores.reshape(-1)
    g[rows, imax.reshape(-1)] += gs
    if alpha:
        np.add.at(g, (rows, imin.reshape(-1)), gs * grad_scores.dtype.type(alpha))
    return g.reshape(shape)


class Head(nn.Layer):
    def __init__(self, in_channels: int, spec: HeadSpec, rng: np.random.Generator):
        self.spec = spec
        self.conv = nn.Conv2d("head.conv", T.ConvSpec(in_channels, spec.num_filters, 1, 1), rng)
        self._routing = None

    def params(self):
        return self.conv.params()

    def forward(self, features, mode="train"):
        stacked = T.to_nchw(self.conv.forward(features, mode))
        maps = multimap_average(stacked, self.spec.num_classes, self.spec.maps_per_class)
        scores, self._routing = spatial_pool(maps, self.spec.effective_alpha)
        return maps, scores

    def kinks(self):
        if self._routing is None:
            return b""
        _, imax, imin, alpha = self._routing
        return imax.tobytes() + (imin.tobytes() if alpha else b"")

    def backward(self, grad_scores, grad_maps=None):
        g = spatial_pool_backward(grad_scores, self._routing)
        if grad_maps is not None:
            g = g + grad_maps
        self._routing = None
        g = multimap_average_backward(g, self.spec.maps_per_class)
        return self.conv.backward(np.ascontiguousarray(g.transpose(0, 2, 3, 1)))


def head_forward(features, head: Head):
    return head.forward(features, "eval")


class WSLNet(nn.Layer):
    """Backbone plus class-map head.

    ``forward`` takes channels-last images (n, h, w, 3) and returns the raw
    localization maps (n, C, h', w') and pooled scores (n, C).
    """

    def __init__(self, backbone_config: nn.BackboneConfig, head_spec: HeadSpec, seed: int = 0):
        self.backbone_config = backbone_config
        self.head_spec = head_spec
        self.seed = seed
        self.backbone = nn.init_params(backbone_config, seed)
        self.head = Head(backbone_config.out_channels, head_spec, np.random.default_rng([seed, 1]))

    def params(self):
        return self.backbone.params() + self.head.params()

    def backbone_params(self):
        return self.backbone.params()

    def head_params(self):
        return self.head.params()

    def buffers(self):
        return self.backbone.buffers()

    def set_buffer(self, name, value):
        self.backbone.set_buffer(name, value)

    def forward(self, images, mode="train"):
        return self.head.forward(self.backbone.forward(images, mode), mode)

    def kinks(self):
        return self.backbone.kinks() + self.head.kinks()

    def backward(self, grad_scores, grad_maps=None):
        return self.backbone.backward(self.head.backward(grad_scores, grad_maps))

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    # --- serialization -----------------------------------------------------

    def config(self) -> dict:
        return {
            "backbone": self.backbone_config.to_dict(),
            "head": {"num_classes": self.head_spec.num_classes,
                     "maps_per_class": self.head_spec.maps_per_class,
                     "pooling": self.head_spec.pooling, "alpha": self.head_spec.alpha},
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "WSLNet":
        return cls(nn.BackboneConfig.from_dict(cfg["backbone"]), HeadSpec(**cfg["head"]), cfg.get("seed", 0))

    def state_tensors(self, with_momentum: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params():
            out[p.name] = p.value
        for name, buf in self.buffers().items():
            out[name] = buf
        if with_momentum:
            for p in self.params():
                out[p.name + ".momentum"] = p.momentum_buffer
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        params = {p.name: p for p in self.params()}
        buffers = self.buffers()
        for name, arr in tensors.items():
            if name.endswith(".momentum") and name[:-9] in params:
                p = params[name[:-9]]
                _check_shape(name, arr, p.value)
                p.momentum_buffer = arr.astype(np.float32).copy()
            elif name in params:
                _check_shape(name, arr, params[name].value)
                params[name].value = arr.astype(np.float32).copy()
            elif name in buffers:
                _check_shape(name, arr, buffers[name])
                self.set_buffer(name, arr.copy())
            else:
                raise ConfigError(f"checkpoint tensor {name!r} has no matching parameter")
        missing = set(params) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")


def _check_shape(name, arr, ref):
    if arr.shape != ref.shape:
        raise ConfigError(f"checkpoint tensor {name!r} has dims {arr.shape}, expected {ref.shape}")


def save_network(path, net: WSLNet, extra: dict | None = None, with_momentum: bool = False):
    cfg = {"network": net.config()}
    cfg.update(extra or {})
    nn.write_checkpoint(path, cfg, net.state_tensors(with_momentum))


def load_network(path) -> tuple[WSLNet, dict]:
    cfg, tensors = nn.read_checkpoint(path)
    if "network" not in cfg:
        raise ConfigError(f"{path}: checkpoint has no network config")
    net = WSLNet.from_config(cfg["network"])
    net.load_state_tensors(tensors)
    return net, cfg
