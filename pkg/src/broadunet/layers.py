"""Differentiable primitive layers with explicit forward/backward rules.

Every layer caches what its backward pass needs on `self` during forward
(the "tape"); backward must follow the matching forward. Parameters live in
`self.params` and gradients accumulate into `self.grads` until zeroed.

Convolutions are anisotropic 3D with per-axis dilation, stride fixed at 1.
Downsampling is done exclusively by spatial max pooling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


# ---------------------------------------------------------------------------
# Convolution specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Full description of one convolution.

    Weights have shape (kt, kh, kw, in_channels, out_channels); the optional
    bias is a vector of length out_channels.
    """

    kernel: tuple
    in_channels: int
    out_channels: int
    dilation: tuple = (1, 1, 1)
    padding: str = "same"
    bias: bool = True

    def __post_init__(self):
        kernel = tuple(int(k) for k in self.kernel)
        dilation = tuple(int(d) for d in self.dilation)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "dilation", dilation)
        if len(kernel) != 3 or any(k < 1 for k in kernel):
            raise ValueError(f"kernel must be 3 positive extents, got {kernel}")
        if len(dilation) != 3 or any(d < 1 for d in dilation):
            raise ValueError(f"dilation must be 3 positive ints, got {dilation}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def effective_extent(self) -> tuple:
        """Per-axis reach of the dilated kernel: (k-1)*d + 1."""
        return tuple((k - 1) * d + 1 for k, d in zip(self.kernel, self.dilation))

    @property
    def param_count(self) -> int:
        kt, kh, kw = self.kernel
        n = kt * kh * kw * self.in_channels * self.out_channels
        return n + (self.out_channels if self.bias else 0)

    def weight_shape(self) -> tuple:
        return (*self.kernel, self.in_channels, self.out_channels)

    def out_extents(self, extents) -> tuple:
        """(T', H', W') for input extents (T, H, W)."""
        if self.padding == "same":
            return tuple(extents)
        out = tuple(e - (eff - 1) for e, eff in zip(extents, self.effective_extent))
        if any(o < 1 for o in out):
            raise ShapeError(
                f"effective kernel {self.effective_extent} exceeds input "
                f"extents {tuple(extents)} under valid padding"
            )
        return out

    def pad_pairs(self) -> tuple:
        """Per-axis (before, after) zero padding; floor before, remainder after."""
        if self.padding == "valid":
            return ((0, 0), (0, 0), (0, 0))
        total = tuple(eff - 1 for eff in self.effective_extent)
        return tuple((t // 2, t - t // 2) for t in total)


def factorize_conv(spec: ConvSpec) -> list:
    """Decompose a cubic N x N x N convolution into 1x1xN, 1xNx1, Nx1x1.

    The first factor takes spec.in_channels; subsequent factors run at
    spec.out_channels. The bias, when enabled, sits only on the last factor.
    """
    kt, kh, kw = spec.kernel
    if not (kt == kh == kw) or kt <= 1:
        raise ValueError(f"factorization needs a cubic kernel with N > 1, got {spec.kernel}")
    return _factor_specs(spec)


def _factor_specs(spec: ConvSpec) -> list:
    """Per-axis factors for an arbitrary kernel, W then H then T axis order.

    Axes with extent 1 contribute no factor; an all-ones kernel is returned
    unchanged.
    """
    kt, kh, kw = spec.kernel
    dt, dh, dw = spec.dilation
    axes = []
    if kw > 1:
        axes.append(((1, 1, kw), (1, 1, dw)))
    if kh > 1:
        axes.append(((1, kh, 1), (1, dh, 1)))
    if kt > 1:
        axes.append(((kt, 1, 1), (dt, 1, 1)))
    if not axes:
        return [spec]
    specs = []
    for i, (kernel, dilation) in enumerate(axes):
        specs.append(ConvSpec(
            kernel=kernel,
            in_channels=spec.in_channels if i == 0 else spec.out_channels,
            out_channels=spec.out_channels,
            dilation=dilation,
            padding=spec.padding,
            bias=spec.bias and i == len(axes) - 1,
        ))
    return specs


# ---------------------------------------------------------------------------
# Functional convolution kernel
# ---------------------------------------------------------------------------

@dataclass
class ConvTape:
    """Forward activations cached for the matching backward call."""

    padded: np.ndarray
    weights: np.ndarray
    spec: ConvSpec
    pads: tuple
    in_shape: tuple
    out_shape: tuple


def conv3d_forward(x, weights, bias, spec: ConvSpec):
    """Dilated 3D convolution over a (T, H, W, Cin) tensor.

    Returns (output, tape). Summation over kernel taps runs in a fixed
    row-major tap order, so results are reproducible bitwise.
    """
    if x.ndim != 4:
        raise ValueError(f"input must be rank 4, got rank {x.ndim}")
    if x.shape[3] != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {x.shape[3]}")
    if weights.shape != spec.weight_shape():
        raise ValueError(f"weights shape {weights.shape} != {spec.weight_shape()}")
    out_thw = spec.out_extents(x.shape[:3])
    pads = spec.pad_pairs()
    if spec.padding == "same":
        xp = np.pad(x, (*pads, (0, 0)))
    else:
        xp = x
    to, ho, wo = out_thw
    dt, dh, dw = spec.dilation
    y = np.zeros((to, ho, wo, spec.out_channels), dtype=x.dtype)
    kt, kh, kw = spec.kernel
    for i, j, k in itertools.product(range(kt), range(kh), range(kw)):
        window = xp[i * dt:i * dt + to, j * dh:j * dh + ho, k * dw:k * dw + wo, :]
        y += np.tensordot(window, weights[i, j, k], axes=([3], [0]))
    if bias is not None:
        y += bias
    tape = ConvTape(xp, weights, spec, pads, x.shape, y.shape)
    return y, tape


def conv3d_backward(tape: ConvTape, grad_out):
    """Gradients of sum(grad_out * output) w.r.t. input, weights and bias."""
    if grad_out.shape != tape.out_shape:
        raise ValueError(f"grad shape {grad_out.shape} != output shape {tape.out_shape}")
    spec = tape.spec
    to, ho, wo = tape.out_shape[:3]
    dt, dh, dw = spec.dilation
    kt, kh, kw = spec.kernel
    grad_w = np.zeros_like(tape.weights)
    grad_xp = np.zeros_like(tape.padded)
    for i, j, k in itertools.product(range(kt), range(kh), range(kw)):
        tsl = slice(i * dt, i * dt + to)
        hsl = slice(j * dh, j * dh + ho)
        wsl = slice(k * dw, k * dw + wo)
        window = tape.padded[tsl, hsl, wsl, :]
        grad_w[i, j, k] = np.tensordot(window, grad_out, axes=([0, 1, 2], [0, 1, 2]))
        grad_xp[tsl, hsl, wsl, :] += np.tensordot(
            grad_out, tape.weights[i, j, k], axes=([3], [1]))
    (pt, _), (ph, _), (pw, _) = tape.pads
    t, h, w, _ = tape.in_shape
    grad_x = np.ascontiguousarray(grad_xp[pt:pt + t, ph:ph + h, pw:pw + w, :])
    grad_b = grad_out.sum(axis=(0, 1, 2)) if spec.bias else None
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Layer graph nodes
# ---------------------------------------------------------------------------

class Layer:
    """Base graph node. Leaves own parameters; composites own children."""

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}

    # -- structure ---------------------------------------------------------
    def children(self):
        return []

    def param_shapes(self) -> dict:
        return {}

    def init_params(self, rng, dtype=np.float32):
        pass

    # -- evaluation --------------------------------------------------------
    def out_shape(self, shape: tuple) -> tuple:
        return tuple(shape)

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    # -- traversal helpers ---------------------------------------------------
    def walk(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.walk(sub)

    def accumulate(self, name, value):
        if name in self.grads:
            self.grads[name] += value
        else:
            self.grads[name] = value.copy()

    def zero_grads(self):
        for _, layer in self.walk():
            layer.grads = {}


class Conv3D(Layer):
    """Trainable dilated 3D convolution."""

    def __init__(self, spec: ConvSpec):
        super().__init__()
        self.spec = spec
        self._tape = None

    def param_shapes(self):
        shapes = {"w": self.spec.weight_shape()}
        if self.spec.bias:
            shapes["b"] = (self.spec.out_channels,)
        return shapes

    def init_params(self, rng, dtype=np.float32):
        # Glorot uniform; fan_in-only scaling doubles activation variance at
        # every conv of the long linear factor chains and blows up the net.
        kt, kh, kw = self.spec.kernel
        taps = kt * kh * kw
        fan_in = taps * self.spec.in_channels
        fan_out = taps * self.spec.out_channels
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.params["w"] = rng.uniform(
            -limit, limit, self.spec.weight_shape()).astype(dtype)
        if self.spec.bias:
            self.params["b"] = np.zeros(self.spec.out_channels, dtype=dtype)

    def out_shape(self, shape):
        if len(shape) != 4:
            raise ShapeError(f"conv input must be rank 4, got {shape}")
        if shape[3] != self.spec.in_channels:
            raise ValueError(
                f"expected {self.spec.in_channels} channels, got {shape[3]}")
        return (*self.spec.out_extents(shape[:3]), self.spec.out_channels)

    def forward(self, x, train=False, rng=None):
        y, self._tape = conv3d_forward(
            x, self.params["w"], self.params.get("b"), self.spec)
        return y

    def backward(self, grad):
        gx, gw, gb = conv3d_backward(self._tape, grad)
        self.accumulate("w", gw)
        if gb is not None:
            self.accumulate("b", gb)
        return gx


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class MaxPoolSpatial(Layer):
    """2x2 spatial max pooling, stride 2; T and C pass through.

    Ties route the gradient to the first maximal element in row-major
    window order, which keeps gradient checks deterministic.
    """

    def out_shape(self, shape):
        t, h, w, c = shape
        if h % 2 or w % 2:
            raise ShapeError(f"H and W must be even for 2x2 pooling, got {h}x{w}")
        return (t, h // 2, w // 2, c)

    def forward(self, x, train=False, rng=None):
        t, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"H and W must be even for 2x2 pooling, got {h}x{w}")
        windows = x.reshape(t, h // 2, 2, w // 2, 2, c)
        windows = windows.transpose(0, 1, 3, 5, 2, 4).reshape(t, h // 2, w // 2, c, 4)
        # argmax returns the first maximum, i.e. row-major tie-breaking
        self._argmax = windows.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(
            windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        t, h, w, c = self._in_shape
        scattered = np.zeros((t, h // 2, w // 2, c, 4), dtype=grad.dtype)
        np.put_along_axis(scattered, self._argmax[..., None], grad[..., None], axis=-1)
        scattered = scattered.reshape(t, h // 2, w // 2, c, 2, 2)
        return np.ascontiguousarray(
            scattered.transpose(0, 1, 4, 2, 5, 3).reshape(t, h, w, c))


class UpsampleNearestSpatial(Layer):
    """Replicate each pixel into a 2x2 spatial block."""

    def out_shape(self, shape):
        t, h, w, c = shape
        return (t, 2 * h, 2 * w, c)

    def forward(self, x, train=False, rng=None):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, grad):
        t, h2, w2, c = grad.shape
        return grad.reshape(t, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


class Activation(Layer):
    KINDS = ("relu", "sigmoid", "linear")

    def __init__(self, kind: str):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, train=False, rng=None):
        if self.kind == "relu":
            self._mask = x > 0
            return np.maximum(x, 0)
        if self.kind == "sigmoid":
            self._out = 1.0 / (1.0 + np.exp(-x))
            return self._out
        return x

    def backward(self, grad):
        if self.kind == "relu":
            return grad * self._mask
        if self.kind == "sigmoid":
            return grad * self._out * (1.0 - self._out)
        return grad


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate); inference is identity."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a seeded rng")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask


class ImageLevelPool(Layer):
    """Global average over (H, W) per time step and channel, broadcast back."""

    def forward(self, x, train=False, rng=None):
        self._hw = x.shape[1] * x.shape[2]
        mean = x.mean(axis=(1, 2), keepdims=True)
        return np.broadcast_to(mean, x.shape).copy()

    def backward(self, grad):
        g = grad.sum(axis=(1, 2), keepdims=True) / self._hw
        return np.broadcast_to(g, grad.shape).copy()


def conv_unit(kernel, in_channels, out_channels, factorized,
              dilation=(1, 1, 1), padding="same", bias=True) -> Layer:
    """A convolution, optionally replaced by its per-axis factor chain."""
    spec = ConvSpec(kernel, in_channels, out_channels,
                    dilation=dilation, padding=padding, bias=bias)
    if not factorized:
        return Conv3D(spec)
    specs = _factor_specs(spec)
    if len(specs) == 1:
        return Conv3D(specs[0])
    return Sequential([Conv3D(s) for s in specs])
