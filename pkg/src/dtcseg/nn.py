"""Dual-head 2D encoder-decoder.

A U-shaped backbone (two 3x3 convs per level, max-pool down, nearest
upsample + 3x3 conv up, skip concatenation) ends in one feature map that feeds
two 1x1 heads: a sigmoid segmentation head and a tanh level-set head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"DTCN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    leaky_slope: float = 0.1
    seed: int = 0
    zero_heads: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def _conv_count(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def parameter_count(config: NetConfig) -> int:
    """Closed-form number of scalars in a :class:`DualTaskNet` built from ``config``."""
    c = config.channels
    total = 0
    prev = config.in_channels
    for level in range(config.depth):
        total += _conv_count(prev, c(level), 3) + _conv_count(c(level), c(level), 3)
        prev = c(level)
    d = config.depth
    total += _conv_count(c(d - 1), c(d), 3) + _conv_count(c(d), c(d), 3)
    for level in range(d):
        total += _conv_count(c(level + 1), c(level), 3)
        total += _conv_count(2 * c(level), c(level), 3) + _conv_count(c(level), c(level), 3)
    return total + 2 * _conv_count(c(0), 1, 1)


def _layer_specs(config: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, cin, cout, kernel) for every conv, in the fixed traversal order."""
    c = config.channels
    specs = []
    prev = config.in_channels
    for level in range(config.depth):
        specs.append((f"enc{level}.conv1", prev, c(level), 3))
        specs.append((f"enc{level}.conv2", c(level), c(level), 3))
        prev = c(level)
    d = config.depth
    specs.append(("mid.conv1", c(d - 1), c(d), 3))
    specs.append(("mid.conv2", c(d), c(d), 3))
    for level in reversed(range(d)):
        specs.append((f"dec{level}.up", c(level + 1), c(level), 3))
        specs.append((f"dec{level}.conv1", 2 * c(level), c(level), 3))
        specs.append((f"dec{level}.conv2", c(level), c(level), 3))
    specs.append(("seg_head", c(0), 1, 1))
    specs.append(("lsf_head", c(0), 1, 1))
    return specs


class DualTaskNet:
    """Parameters live in ``self.params`` (name -> tracked Tensor), insertion-ordered."""

    HEADS = ("seg_head", "lsf_head")

    def __init__(self, config: NetConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: NetConfig) -> DualTaskNet:
        rng = np.random.default_rng(config.seed)
        params: dict[str, T.Tensor] = {}
        for name, cin, cout, k in _layer_specs(config):
            fan_in = cin * k * k
            if config.zero_heads and name in cls.HEADS:
                w = np.zeros((cout, cin, k, k))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
            params[name + ".w"] = T.Tensor(w, requires_grad=True)
            params[name + ".b"] = T.Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)
        return cls(config, params)

    # parameter groups
    def backbone_params(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith(self.HEADS)}

    def seg_head_params(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("seg_head")}

    def lsf_head_params(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("lsf_head")}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _conv(self, name: str, x: T.Tensor, act: bool = True) -> T.Tensor:
        y = T.add(T.conv2d(x, self.params[name + ".w"]), self.params[name + ".b"])
        return T.leaky_relu(y, self.config.leaky_slope) if act else y

    def features(self, x: T.Tensor) -> T.Tensor:
        skips = []
        for level in range(self.config.depth):
            x = self._conv(f"enc{level}.conv2", self._conv(f"enc{level}.conv1", x))
            skips.append(x)
            x = T.max_pool2d(x)
        x = self._conv("mid.conv2", self._conv("mid.conv1", x))
        for level in reversed(range(self.config.depth)):
            x = self._conv(f"dec{level}.up", T.nearest_upsample2x(x))
            x = T.channel_concat([x, skips[level]])
            x = self._conv(f"dec{level}.conv2", self._conv(f"dec{level}.conv1", x))
        return x

    def forward(self, images) -> tuple[T.Tensor, T.Tensor]:
        """``images``: N x C x H x W. Returns (seg_prob, lsf_pred), each N x 1 x H x W."""
        x = T.as_tensor(images)
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise T.ShapeError(f"forward: expected N x {self.config.in_channels} x H x W, got {x.shape}")
        unit = 2**self.config.depth
        if x.shape[2] % unit or x.shape[3] % unit:
            raise T.ShapeError(f"forward: spatial dims {x.shape[2:]} not divisible by {unit}")
        feats = self.features(x)
        seg = T.sigmoid(self._conv("seg_head", feats, act=False))
        lsf = T.tanh(self._conv("lsf_head", feats, act=False))
        return seg, lsf

    __call__ = forward

    # persistence
    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
        parts.append(struct.pack("<I", len(self.params)))
        for p in self.params.values():
            parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> DualTaskNet:
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> DualTaskNet:
        if buf[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic at offset 0")
        if len(buf) < 12:
            raise CheckpointError("truncated checkpoint header")
        version, cfg_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        off = 12
        config = NetConfig(**json.loads(buf[off : off + cfg_len]))
        off += cfg_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        net = cls.init(config)
        if count != len(net.params):
            raise CheckpointError(f"checkpoint has {count} tensors, config implies {len(net.params)}")
        for p in net.params.values():
            nbytes = p.size * 8
            if off + nbytes > len(buf):
                raise CheckpointError(f"truncated checkpoint at offset {off}")
            p.data = np.frombuffer(buf, dtype="<f8", count=p.size, offset=off).reshape(p.shape).astype(np.float64)
            off += nbytes
        if off != len(buf):
            raise CheckpointError(f"{len(buf) - off} trailing bytes after offset {off}")
        return net
