"""Encoder-decoder CNN mapping a rasterized source image to its steady state.

Encoder: six 3x3 convolutions (1 -> 64 -> ... -> 2048 channels at full
width), batch norm after the first, leaky ReLU after each and 2x2 mean
pooling between them (five halvings). Decoder: seven transposed convolutions
back down to one channel, with nearest-neighbour x2 upsampling between the
spatial stages and a final same-size 4x4 transposed convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StateError
from .layers import (AvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, LeakyReLU,
                     Upsample)

ENCODER_CHANNELS = (64, 128, 256, 512, 1024, 2048)
DECODER_CHANNELS = (1024, 512, 256, 128, 64, 32)
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class NetConfig:
    size: int = 64
    width: float = 0.125
    slope: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.size < 32 or self.size & (self.size - 1):
            raise ConfigError(f"input size must be a power of two >= 32, got {self.size}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        for c in ENCODER_CHANNELS + DECODER_CHANNELS:
            scaled = Fraction(c) * Fraction(self.width).limit_denominator(1 << 16)
            if scaled.denominator != 1 or scaled < 1:
                raise ConfigError(f"width {self.width} does not give whole channel counts")

    def channels(self, c: int) -> int:
        return int(round(c * self.width))

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return {"size": self.size, "width": self.width, "slope": self.slope, "dtype": self.dtype}


def build_layers(cfg: NetConfig) -> list[Layer]:
    dt = cfg.np_dtype
    act = lambda: LeakyReLU(cfg.slope)
    enc = [cfg.channels(c) for c in ENCODER_CHANNELS]
    dec = [cfg.channels(c) for c in DECODER_CHANNELS]
    layers: list[Layer] = []
    cin = 1
    for i, cout in enumerate(enc):
        layers.append(Conv2d(cin, cout, 3, 1, dt))
        if i == 0:
            layers.append(BatchNorm2d(cout, dtype=dt))
        layers.append(act())
        if i < len(enc) - 1:
            layers.append(AvgPool2d())
        cin = cout
    for i, cout in enumerate(dec):
        layers.append(ConvTranspose2d(cin, cout, 3, (1, 1), dt))
        layers.append(act())
        if i >= 1:
            layers.append(Upsample())
        cin = cout
    layers.append(ConvTranspose2d(cin, 1, 4, (2, 1), dt))
    layers.append(act())
    return layers


class SurrogateNet:
    """The network plus its parameters; not safe for concurrent mutation."""

    def __init__(self, config: NetConfig, seed: int | None = 0):
        self.config = config
        self.layers = build_layers(config)
        self._forward_done = False
        if seed is not None:
            self.initialize(seed)

    def initialize(self, seed: int) -> None:
        """Kaiming fan-in normal weights (leaky-slope gain), zero biases."""
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0 / (1.0 + self.config.slope ** 2))
        dt = self.config.np_dtype
        for layer in self.layers:
            if isinstance(layer, (Conv2d, ConvTranspose2d)):
                w = layer.params["weight"]
                std = gain / np.sqrt(layer.fan_in)
                layer.params["weight"] = (rng.standard_normal(w.shape) * std).astype(dt)
                layer.params["bias"] = np.zeros_like(layer.params["bias"])

    # parameter access --------------------------------------------------
    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i:02d}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in getattr(layer, "buffers", {}).items():
                out[f"{i:02d}.{k}"] = v
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        idx, key = name.split(".", 1)
        layer = self.layers[int(idx)]
        store = layer.params if key in layer.params else layer.buffers
        if store[key].shape != value.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {store[key].shape}")
        store[key] = np.asarray(value, dtype=store[key].dtype)

    def parameter_count(self) -> int:
        return sum(v.size for v in self.named_parameters().values())

    # passes ------------------------------------------------------------
    def shape_chain(self) -> list[tuple[str, tuple[int, int, int]]]:
        shape = (1, self.config.size, self.config.size)
        chain = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            chain.append((layer.name, shape))
        return chain

    def _to_internal(self, x):
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.config.size,) * 2:
            raise DimensionError(
                f"expected input (B, 1, {self.config.size}, {self.config.size}), got {x.shape}")
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=self.config.np_dtype)

    def forward(self, x, train: bool = False, trace: list | None = None) -> np.ndarray:
        """Predict for a batch ``(B, L, L)`` or ``(B, 1, L, L)``; returns ``(B, 1, L, L)``.

        ``trace``, if given, receives the per-layer output shapes in
        (C, H, W) form.
        """
        h = self._to_internal(x)
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, train=train)
            if not np.isfinite(h).all():
                raise NumericError(f"non-finite activation after layer {i} ({layer.name})")
            if trace is not None:
                trace.append((layer.name, (h.shape[0],) + h.shape[2:]))
        self._forward_done = train
        return h.transpose(1, 0, 2, 3)

    def backward(self, grad_out) -> dict[str, np.ndarray]:
        """Reverse pass for the last ``forward(..., train=True)``; returns parameter grads."""
        if not self._forward_done:
            raise StateError("backward requires a preceding forward(train=True)")
        self._forward_done = False
        g = np.ascontiguousarray(np.asarray(grad_out).transpose(1, 0, 2, 3),
                                 dtype=self.config.np_dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        grads = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                grads[f"{i:02d}.{k}"] = layer.grads[k]
        return grads

    def predict(self, x, batch_size: int = 16) -> np.ndarray:
        """Inference-mode forward over any number of samples; returns (N, L, L)."""
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.config.size, self.config.size), self.config.np_dtype)
        return np.concatenate(out)
