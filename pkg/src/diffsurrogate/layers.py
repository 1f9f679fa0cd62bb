"""NumPy layers with cached forward passes and exact backward passes.

Activations use a channel-major ``(C, B, H, W)`` layout so every convolution
is a single ``(O, C*k*k) @ (C*k*k, B*H*W)`` product.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, StateError

# beyond this many im2col elements the inference path works in row blocks
_COLS_LIMIT = 1 << 25


def _pad(x, lo, hi):
    if lo == hi == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))


def _im2col(xpad, k, ho, wo):
    c = xpad.shape[0]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, :ho, :wo]
    # (C, B, Ho, Wo, k, k) -> (C, k, k, B, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(c * k * k, -1)


def correlate(x, weight, bias, pad_lo, pad_hi, keep_cols=True):
    """Stride-1 cross-correlation of ``x`` (C, B, H, W) with ``weight`` (O, C, k, k)."""
    o, c, k, _ = weight.shape
    if x.shape[0] != c:
        raise DimensionError(f"expected {c} input channels, got {x.shape[0]}")
    xpad = _pad(x, pad_lo, pad_hi)
    _, b, hp, wp = xpad.shape
    ho, wo = hp - k + 1, wp - k + 1
    w2 = weight.reshape(o, c * k * k)
    if keep_cols or c * k * k * b * ho * wo <= _COLS_LIMIT:
        cols = _im2col(xpad, k, ho, wo)
        out = (w2 @ cols).reshape(o, b, ho, wo)
    else:
        cols = None
        out = np.empty((o, b, ho, wo), dtype=np.result_type(x, weight))
        step = max(1, _COLS_LIMIT // (c * k * k * b * wo))
        for r0 in range(0, ho, step):
            r1 = min(ho, r0 + step)
            block = _im2col(xpad[:, :, r0:r1 + k - 1], k, r1 - r0, wo)
            out[:, :, r0:r1] = (w2 @ block).reshape(o, b, r1 - r0, wo)
    if bias is not None:
        out += bias[:, None, None, None]
    return out, cols


def correlate_backward(g, cols, weight, x_shape, pad_lo, pad_hi):
    o, c, k, _ = weight.shape
    _, b, ho, wo = g.shape
    g2 = g.reshape(o, -1)
    dw = (g2 @ cols.T).reshape(weight.shape)
    db = g2.sum(axis=1)
    dcols = (weight.reshape(o, -1).T @ g2).reshape(c, k, k, b, ho, wo)
    _, _, h, w = x_shape
    dxpad = np.zeros((c, b, h + pad_lo + pad_hi, w + pad_lo + pad_hi), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            dxpad[:, :, ky:ky + ho, kx:kx + wo] += dcols[:, ky, kx]
    dx = dxpad[:, :, pad_lo:pad_lo + h, pad_lo:pad_lo + w]
    return dx, dw, db


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        return self.name


class Conv2d(Layer):
    """3x3 (or k x k) stride-1 convolution, zero padding ``pad`` on every side."""

    def __init__(self, cin, cout, k=3, pad=1, dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.k, self.pad = cin, cout, k, pad
        self.name = f"Conv {k} x {k}"
        self.params = {"weight": np.zeros((cout, cin, k, k), dtype),
                       "bias": np.zeros(cout, dtype)}

    @property
    def fan_in(self):
        return self.cin * self.k * self.k

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise DimensionError(f"{self.name}: expected {self.cin} channels, got {c}")
        d = 2 * self.pad - self.k + 1
        return (self.cout, h + d, w + d)

    def forward(self, x, train=False):
        out, cols = correlate(x, self.params["weight"], self.params["bias"],
                              self.pad, self.pad, keep_cols=train)
        self._cache = (cols, x.shape) if train else None
        return out

    def backward(self, g):
        cols, shape = self._take_cache()
        dx, dw, db = correlate_backward(g, cols, self.params["weight"], shape, self.pad, self.pad)
        self.grads = {"weight": dw, "bias": db}
        return dx


class ConvTranspose2d(Layer):
    """Stride-1 transposed convolution; weight layout (Cin, Cout, k, k).

    The full output (size ``H + k - 1``) is cropped by ``crop = (lo, hi)`` per
    axis, which equals correlating the input padded by ``(k-1-lo, k-1-hi)``
    with the spatially flipped, channel-swapped kernel.
    """

    def __init__(self, cin, cout, k=3, crop=(1, 1), dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.crop = tuple(crop)
        if not all(0 <= p <= k - 1 for p in self.crop):
            raise DimensionError("crop must lie in [0, k-1]")
        self.name = f"ConvT {k} x {k}"
        self.params = {"weight": np.zeros((cin, cout, k, k), dtype),
                       "bias": np.zeros(cout, dtype)}

    @property
    def fan_in(self):
        return self.cin * self.k * self.k

    @property
    def _pads(self):
        return self.k - 1 - self.crop[0], self.k - 1 - self.crop[1]

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise DimensionError(f"{self.name}: expected {self.cin} channels, got {c}")
        d = self.k - 1 - self.crop[0] - self.crop[1]
        return (self.cout, h + d, w + d)

    def _flipped(self):
        return np.ascontiguousarray(self.params["weight"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3))

    def forward(self, x, train=False):
        lo, hi = self._pads
        wf = self._flipped()
        out, cols = correlate(x, wf, self.params["bias"], lo, hi, keep_cols=train)
        self._cache = (cols, x.shape, wf) if train else None
        return out

    def backward(self, g):
        cols, shape, wf = self._take_cache()
        lo, hi = self._pads
        dx, dwf, db = correlate_backward(g, cols, wf, shape, lo, hi)
        self.grads = {"weight": np.ascontiguousarray(dwf.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]),
                      "bias": db}
        return dx


class BatchNorm2d(Layer):
    """Per-channel batch normalisation; running statistics used at inference."""

    name = "BatchNorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params = {"weight": np.ones(channels, dtype), "bias": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype),
                        "running_var": np.ones(channels, dtype)}

    def forward(self, x, train=False):
        gamma = self.params["weight"][:, None, None, None]
        beta = self.params["bias"][:, None, None, None]
        if train:
            n = x[0].size
            mean = x.mean(axis=(1, 2, 3))
            xc = x - mean[:, None, None, None]
            var = (xc * xc).mean(axis=(1, 2, 3))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv[:, None, None, None]
            m = self.momentum
            unbiased = var * (n / max(n - 1, 1))
            dt = self.buffers["running_mean"].dtype
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(dt)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(dt)
            self._cache = (xhat, inv)
            return gamma * xhat + beta
        self._cache = None
        inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        xhat = (x - self.buffers["running_mean"][:, None, None, None]) * inv[:, None, None, None]
        return (gamma * xhat + beta).astype(x.dtype, copy=False)

    def backward(self, g):
        xhat, inv = self._take_cache()
        self.grads = {"weight": (g * xhat).sum(axis=(1, 2, 3)), "bias": g.sum(axis=(1, 2, 3))}
        gx = g * self.params["weight"][:, None, None, None]
        mean_g = gx.mean(axis=(1, 2, 3), keepdims=True)
        mean_gx = (gx * xhat).mean(axis=(1, 2, 3), keepdims=True)
        return (gx - mean_g - xhat * mean_gx) * inv[:, None, None, None]


class LeakyReLU(Layer):
    def __init__(self, slope=0.02):
        super().__init__()
        self.slope = slope
        self.name = f"LReLU({slope:g})"

    def forward(self, x, train=False):
        neg = x < 0
        self._cache = neg if train else None
        return np.where(neg, x * x.dtype.type(self.slope), x)

    def backward(self, g):
        neg = self._take_cache()
        return np.where(neg, g * g.dtype.type(self.slope), g)


class AvgPool2d(Layer):
    """2x2 mean pooling with stride 2."""

    name = "AvgPool2d"

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise DimensionError(f"AvgPool2d needs even spatial size, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False):
        c, b, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"AvgPool2d needs even spatial size, got {h}x{w}")
        self._cache = True if train else None
        return x.reshape(c, b, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, g):
        self._take_cache()
        return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25)


class Upsample(Layer):
    """Nearest-neighbour x2 upsampling."""

    name = "Upsample"

    def output_shape(self, shape):
        c, h, w = shape
        return (c, 2 * h, 2 * w)

    def forward(self, x, train=False):
        self._cache = True if train else None
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, g):
        self._take_cache()
        c, b, h, w = g.shape
        return g.reshape(c, b, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def apply_layer(layer: Layer, x: np.ndarray, train: bool = False) -> np.ndarray:
    """Apply one layer to a (C, H, W) or (B, C, H, W) tensor."""
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected a 3-D or 4-D tensor, got shape {x.shape}")
    out = layer.forward(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), train=train)
    out = out.transpose(1, 0, 2, 3)
    return out[0] if single else out
