"""Integer layers: forward/backward transforms and weight initialization.

All layers keep whatever they need for the backward pass on ``self`` during a
training-mode forward call.  Trainable layers expose their parameters through
``params`` (name -> tensor) and, after ``backward``, the summed batch gradient
through ``grads``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .itensor import (
    IntTensor,
    as_int,
    conv2d,
    col2im,
    im2col,
    intdiv,
    matmul,
    max_abs,
    mul,
)

ACT_MIN, ACT_MAX = -127, 127
ACT_RANGE_SHIFT = 8  # 2**8 levels in [-127, 127]
HEAD_RANGE_SHIFT = 8  # learning/output heads; 10 pushes first-layer weights past int16
DEFAULT_ALPHA_INV = 64


# --------------------------------------------------------------------------
# initialization


def isqrt(n: int) -> int:
    """Largest ``r`` with ``r*r <= n``."""
    if n < 0:
        raise ValueError(f"isqrt of negative number {n}")
    return math.isqrt(n)


def init_bound(fan_in: int) -> int:
    """Half-width of the integer Kaiming-uniform range for ``fan_in`` inputs."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return intdiv(128 * 1732, isqrt(fan_in) * 1000)


def init_weights(shape, fan_in: int, rng: np.random.Generator) -> IntTensor:
    b = init_bound(fan_in)
    return rng.integers(-b, b, size=shape, endpoint=True, dtype=np.int64)


# --------------------------------------------------------------------------
# scaling layer


def scaling_factor(kind: str, *, fan_in: int | None = None, kernel: int | None = None,
                   channels: int | None = None, shift: int = ACT_RANGE_SHIFT) -> int:
    """Divisor that maps a layer's pre-activations back into the 8-bit range.

    ``kind`` is ``"linear"`` (needs ``fan_in``) or ``"conv"`` (needs ``kernel``
    and ``channels``).  Heads use ``shift=HEAD_RANGE_SHIFT``.
    """
    if kind == "linear":
        if not fan_in or fan_in < 1:
            raise ValueError("linear scaling factor needs fan_in >= 1")
        return (1 << shift) * fan_in
    if kind == "conv":
        if not kernel or not channels or kernel < 1 or channels < 1:
            raise ValueError("conv scaling factor needs kernel >= 1 and channels >= 1")
        return (1 << shift) * kernel * kernel * channels
    raise ValueError(f"unknown layer kind {kind!r}")


def scale_forward(z, sf: int) -> IntTensor:
    return intdiv(z, sf)


def scale_backward(grad_out) -> IntTensor:
    # straight-through: integer division is treated as identity
    return grad_out


# --------------------------------------------------------------------------
# NITRO-ReLU


def mu_int8(alpha_inv: int) -> int:
    """Mean of the four segment means of the clamped leaky ReLU."""
    if alpha_inv < 1:
        raise ValueError("alpha_inv must be >= 1")
    segments = (intdiv(-127, alpha_inv), intdiv(-127, 2 * alpha_inv), 63, 127)
    return intdiv(sum(segments), 4)


def nitro_relu_forward(z_star, alpha_inv: int, mu: int) -> IntTensor:
    x = as_int(z_star)
    neg = intdiv(np.maximum(x, ACT_MIN), alpha_inv)
    pos = np.minimum(x, ACT_MAX)
    return np.where(x < 0, neg, pos) - mu


def nitro_relu_backward(grad_out, z_star, alpha_inv: int) -> IntTensor:
    g = as_int(grad_out)
    x = as_int(z_star)
    out = np.where((x >= 0) & (x <= ACT_MAX), g, 0)
    neg = (x < 0) & (x >= ACT_MIN)
    if neg.any():
        out = np.where(neg, intdiv(g, alpha_inv), out)
    return out


# --------------------------------------------------------------------------
# pooling


def _windows(x: IntTensor, kernel: int, stride: int) -> IntTensor:
    w = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = w.shape[:4]
    return w.reshape(n, c, ho, wo, kernel * kernel)


def _scatter_windows(values: IntTensor, flat_index: IntTensor, input_shape, kernel: int,
                     stride: int) -> IntTensor:
    """Add ``values[n, c, i, j]`` into the input cell selected by ``flat_index``."""
    n, c, h, w = input_shape
    ho, wo = values.shape[2], values.shape[3]
    rows = np.arange(ho)[:, None] * stride + flat_index // kernel
    cols = np.arange(wo)[None, :] * stride + flat_index % kernel
    out = np.zeros((n, c, h * w), dtype=np.int64)
    np.add.at(out, (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                    rows * w + cols), values)
    return out.reshape(n, c, h, w)


def maxpool_forward(x, kernel: int = 2, stride: int = 2):
    """Return ``(output, argmax)``; ties go to the first row-major position."""
    win = _windows(as_int(x), kernel, stride)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad_out, argmax, input_shape, kernel: int = 2, stride: int = 2) -> IntTensor:
    return _scatter_windows(as_int(grad_out), argmax, input_shape, kernel, stride)


def avgpool_forward(x, kernel: int, stride: int | None = None) -> IntTensor:
    stride = stride or kernel
    win = _windows(as_int(x), kernel, stride)
    return intdiv(win.sum(axis=-1), kernel * kernel)


def avgpool_backward(grad_out, input_shape, kernel: int, stride: int | None = None) -> IntTensor:
    stride = stride or kernel
    share = intdiv(as_int(grad_out), kernel * kernel)
    n, c, h, w = input_shape
    ho, wo = share.shape[2], share.shape[3]
    if stride == kernel:
        out = np.zeros(input_shape, dtype=np.int64)
        block = np.repeat(np.repeat(share, kernel, axis=2), kernel, axis=3)
        out[:, :, :ho * kernel, :wo * kernel] = block
        return out
    out = np.zeros(input_shape, dtype=np.int64)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
    return out


# --------------------------------------------------------------------------
# dropout


def dropout_mask(shape, rate_percent: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 100, size=shape, dtype=np.int64) >= rate_percent


def dropout_forward(x, rate_percent: int, mask=None, training: bool = True) -> IntTensor:
    x = as_int(x)
    if not training or rate_percent == 0:
        return x
    return np.where(mask, intdiv(mul(x, 100), 100 - rate_percent), 0)


def dropout_backward(grad_out, rate_percent: int, mask=None) -> IntTensor:
    g = as_int(grad_out)
    if rate_percent == 0 or mask is None:
        return g
    return np.where(mask, intdiv(mul(g, 100), 100 - rate_percent), 0)


# --------------------------------------------------------------------------
# layer objects


class Layer:
    params: dict[str, IntTensor]
    grads: dict[str, IntTensor]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x: IntTensor, training: bool = False) -> IntTensor:
        raise NotImplementedError

    def backward(self, grad: IntTensor, need_input_grad: bool = True) -> IntTensor | None:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def describe(self) -> str:
        return type(self).__name__


class Linear(Layer):
    """Bias-free integer fully connected layer, ``z = x @ W``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        shape = (in_features, out_features)
        if rng is None:
            self.params["weight"] = np.zeros(shape, dtype=np.int64)
        else:
            self.params["weight"] = init_weights(shape, in_features, rng)
        self._x = None

    @property
    def weight(self) -> IntTensor:
        return self.params["weight"]

    @property
    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x, training=False):
        x = as_int(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"Linear({self.in_features}) got input of shape {x.shape}")
        if training:
            self._x = x
        return matmul(x, self.weight)

    def backward(self, grad, need_input_grad=True):
        if self._x is None:
            raise RuntimeError("Linear.backward called without a cached training forward")
        grad = as_int(grad)
        # summed over the batch, never averaged
        self.grads["weight"] = matmul(self._x.T, grad)
        if need_input_grad:
            return matmul(grad, self.weight.T)
        return None

    def output_shape(self, input_shape):
        return (self.out_features,)

    def describe(self):
        return f"Linear({self.in_features}->{self.out_features})"


class Conv2D(Layer):
    """Bias-free integer convolution with ``[F, C, K, K]`` kernels."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel, kernel)
        if rng is None:
            self.params["weight"] = np.zeros(shape, dtype=np.int64)
        else:
            self.params["weight"] = init_weights(shape, self.fan_in, rng)
        self._cols = None
        self._in_shape = None

    @property
    def weight(self) -> IntTensor:
        return self.params["weight"]

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def forward(self, x, training=False):
        x = as_int(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"Conv2D({self.in_channels}) got input of shape {x.shape}")
        if not training:
            return conv2d(x, self.weight, self.stride, self.padding)
        n, _, h, w = x.shape
        cols = im2col(x, self.kernel, self.stride, self.padding)
        self._cols = cols
        self._in_shape = x.shape
        ho, wo = self.output_shape(x.shape[1:])[1:]
        out = matmul(cols, self.weight.reshape(self.out_channels, -1).T)
        return np.ascontiguousarray(out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad, need_input_grad=True):
        if self._cols is None:
            raise RuntimeError("Conv2D.backward called without a cached training forward")
        grad = as_int(grad)
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.grads["weight"] = matmul(g2.T, self._cols).reshape(self.weight.shape)
        if not need_input_grad:
            return None
        cols_grad = matmul(g2, self.weight.reshape(self.out_channels, -1))
        return col2im(cols_grad, self._in_shape, self.kernel, self.stride, self.padding)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (self.out_channels, ho, wo)

    def describe(self):
        return f"Conv2D({self.in_channels}->{self.out_channels}, k={self.kernel})"


class ScalingLayer(Layer):
    def __init__(self, sf: int):
        super().__init__()
        if sf < 1:
            raise ValueError("scaling factor must be >= 1")
        self.sf = int(sf)

    @classmethod
    def after(cls, layer: Layer, shift: int = ACT_RANGE_SHIFT) -> "ScalingLayer":
        """Scaling layer matched to the geometry of ``layer``."""
        if isinstance(layer, Conv2D):
            return cls(scaling_factor("conv", kernel=layer.kernel, channels=layer.in_channels,
                                      shift=shift))
        if isinstance(layer, Linear):
            return cls(scaling_factor("linear", fan_in=layer.in_features, shift=shift))
        raise TypeError(f"no scaling rule for {type(layer).__name__}")

    def forward(self, x, training=False):
        return scale_forward(x, self.sf)

    def backward(self, grad, need_input_grad=True):
        return scale_backward(grad)

    def describe(self):
        return f"Scaling(SF={self.sf})"


class NitroReLU(Layer):
    def __init__(self, alpha_inv: int = DEFAULT_ALPHA_INV):
        super().__init__()
        self.alpha_inv = alpha_inv
        self.mu = mu_int8(alpha_inv)
        self._z = None

    def forward(self, x, training=False):
        if training:
            self._z = as_int(x)
        return nitro_relu_forward(x, self.alpha_inv, self.mu)

    def backward(self, grad, need_input_grad=True):
        return nitro_relu_backward(grad, self._z, self.alpha_inv)

    def describe(self):
        return f"NitroReLU(alpha_inv={self.alpha_inv}, mu={self.mu})"


class MaxPool2D(Layer):
    def __init__(self, kernel: int = 2, stride: int = 2):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self._argmax = None
        self._in_shape = None

    def forward(self, x, training=False):
        out, idx = maxpool_forward(x, self.kernel, self.stride)
        if training:
            self._argmax = idx
            self._in_shape = np.shape(x)
        return out

    def backward(self, grad, need_input_grad=True):
        return maxpool_backward(grad, self._argmax, self._in_shape, self.kernel, self.stride)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def describe(self):
        return f"MaxPool2D({self.kernel})"


class AvgPool2D(Layer):
    def __init__(self, kernel: int, stride: int | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel
        self._in_shape = None

    def forward(self, x, training=False):
        if training:
            self._in_shape = np.shape(x)
        if self.kernel == 1 and self.stride == 1:
            return as_int(x)
        return avgpool_forward(x, self.kernel, self.stride)

    def backward(self, grad, need_input_grad=True):
        if self.kernel == 1 and self.stride == 1:
            return grad
        return avgpool_backward(grad, self._in_shape, self.kernel, self.stride)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def describe(self):
        return f"AvgPool2D({self.kernel})"


class Dropout(Layer):
    def __init__(self, rate_percent: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0 <= rate_percent <= 99:
            raise ValueError("dropout rate must be an integer percentage in [0, 99]")
        self.rate = rate_percent
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, training=False):
        if not training or self.rate == 0:
            self._mask = None
            return as_int(x)
        self._mask = dropout_mask(np.shape(x), self.rate, self.rng)
        return dropout_forward(x, self.rate, self._mask, training=True)

    def backward(self, grad, need_input_grad=True):
        return dropout_backward(grad, self.rate, self._mask)

    def describe(self):
        return f"Dropout({self.rate}%)"


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._in_shape = None

    def forward(self, x, training=False):
        x = as_int(x)
        if training:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        return as_int(grad).reshape(self._in_shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


def weight_layers(layers) -> list[Layer]:
    return [layer for layer in layers if layer.params]


def layer_max_abs_weight(layer: Layer) -> int:
    return max((max_abs(p) for p in layer.params.values()), default=0)
