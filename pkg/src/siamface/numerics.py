"""Dense layer primitives with hand-written backward passes.

Tensors are plain numpy arrays in NCHW layout (single images may be given
as CHW where noted). Every function keeps the dtype of its input; the model
runs in float32, tests may drive the same code in float64.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, TrainingError


@dataclass
class Param:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = None


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    @property
    def channels(self):
        return self.gamma.shape[0]


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected CHW or NCHW input, got shape {x.shape}")
    return x, False


# -- reflection padding -----------------------------------------------------

def reflection_pad2d(x, pad):
    """Mirror-pad the two spatial axes; ``pad`` is (left, right, top, bottom).

    The edge pixel itself is not repeated: row [a, b, c] padded by one on
    each side becomes [b, a, b, c, b].
    """
    left, right, top, bottom = pad
    h, w = x.shape[-2:]
    if max(top, bottom) >= h or max(left, right) >= w:
        raise DimensionError(f"padding {pad} too large for spatial size {h}x{w}")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(x, widths, mode="reflect")


def reflection_pad2d_backward(grad, pad):
    left, right, top, bottom = pad
    hp, wp = grad.shape[-2:]
    h, w = hp - top - bottom, wp - left - right

    rows = grad[..., top:top + h, :].copy()
    for r in range(top):
        rows[..., top - r, :] += grad[..., r, :]
    for j in range(bottom):
        rows[..., h - 2 - j, :] += grad[..., top + h + j, :]

    out = rows[..., left:left + w].copy()
    for c in range(left):
        out[..., left - c] += rows[..., c]
    for j in range(right):
        out[..., w - 2 - j] += rows[..., left + w + j]
    return out


# -- convolution ------------------------------------------------------------

def conv2d(x, weight, bias):
    """Stride-1 valid cross-correlation plus per-channel bias."""
    xb, squeezed = _as_batch(x)
    cout, cin, kh, kw = weight.shape
    if xb.shape[1] != cin:
        raise DimensionError(f"conv2d expects {cin} input channels, got {xb.shape[1]}")
    if xb.shape[2] < kh or xb.shape[3] < kw:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {xb.shape[2:]}")
    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    y = np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)
    y += bias[None, :, None, None]
    return y[0] if squeezed else y


def conv2d_backward(x, weight, grad):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv2d`."""
    xb, squeezed = _as_batch(x)
    gb, _ = _as_batch(grad)
    kh, kw = weight.shape[2:]
    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    grad_w = np.einsum("nohw,nchwij->ocij", gb, windows, optimize=True)
    grad_b = gb.sum(axis=(0, 2, 3))
    # full correlation of the output gradient with the flipped kernel
    gpad = np.pad(gb, [(0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)])
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gwin = sliding_window_view(gpad, (kh, kw), axis=(2, 3))
    grad_x = np.einsum("nohwij,coij->nchw", gwin, flipped, optimize=True)
    if squeezed:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


# -- activations ------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad):
    # subgradient at exactly zero is zero
    return grad * (x > 0)


# -- batch normalisation ----------------------------------------------------

def batchnorm2d(x, state, training):
    """Normalise per channel; returns (y, cache).

    Training mode uses biased batch variance for the normalisation but feeds
    the unbiased estimate into ``running_var``. ``cache`` is None in
    inference mode.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise DimensionError(f"batchnorm2d has {state.channels} channels, input has {c}")
    shape = (1, c, 1, 1)
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (state.gamma * inv_std).reshape(shape)
        shift = (state.beta - state.running_mean * state.gamma * inv_std).reshape(shape)
        return (x * scale + shift).astype(x.dtype, copy=False), None

    count = n * h * w
    if count < 2:
        raise DimensionError("batchnorm2d needs at least two values per channel in training mode")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(shape)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    x_hat = centered * inv_std.reshape(shape)
    y = x_hat * state.gamma.reshape(shape) + state.beta.reshape(shape)

    m = state.momentum
    unbiased = var * (count / (count - 1))
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    return y, (x_hat, inv_std)


def batchnorm2d_backward(grad, cache, state):
    """Return (grad_x, grad_gamma, grad_beta) for a training-mode forward."""
    if cache is None:
        raise TrainingError("batchnorm2d backward requires a training-mode forward")
    x_hat, inv_std = cache
    n, c, h, w = grad.shape
    count = n * h * w
    shape = (1, c, 1, 1)
    grad_gamma = (grad * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad.sum(axis=(0, 2, 3))
    g_hat = grad * state.gamma.reshape(shape)
    grad_x = (inv_std / count).reshape(shape) * (
        count * g_hat
        - g_hat.sum(axis=(0, 2, 3)).reshape(shape)
        - x_hat * (g_hat * x_hat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


# -- fully connected --------------------------------------------------------

def linear(x, weight, bias):
    """y = x W^T + b for a single vector or a batch of row vectors."""
    x = np.asarray(x)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} features, got {x.shape[-1]}")
    return x @ weight.T + bias


def linear_backward(x, weight, grad):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None]
    return grad @ weight, grad.T @ x, grad.sum(axis=0)


# -- distance ---------------------------------------------------------------

def euclidean_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


# -- optimiser --------------------------------------------------------------

@dataclass
class SGD:
    """SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    params: list
    lr: float = 0.005
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self):
        for p in self.params:
            if not p.trainable:
                continue
            if p.grad is None:
                raise TrainingError(f"parameter {p.name!r} has no gradient")
            v = self.velocity.get(p.name)
            if v is None:
                v = self.velocity[p.name] = np.zeros_like(p.value)
            v *= self.momentum
            v += p.grad
            if self.lr:
                p.value -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- layer objects ----------------------------------------------------------
#
# Thin stateful wrappers used by the model: each caches what its backward
# pass needs and exposes its Params.

class ReflectionPad2d:
    def __init__(self, pad=(1, 1, 1, 1)):
        self.pad = tuple(pad)

    def params(self):
        return []

    def forward(self, x, training=False):
        return reflection_pad2d(x, self.pad)

    def backward(self, grad):
        return reflection_pad2d_backward(grad, self.pad)


class Conv2d:
    def __init__(self, name, in_channels, out_channels, rng, dtype=np.float32):
        fan_in = in_channels * 9
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Param(
            f"{name}.weight",
            rng.uniform(-bound, bound, (out_channels, in_channels, 3, 3)).astype(dtype),
        )
        self.bias = Param(f"{name}.bias", np.zeros(out_channels, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        if training:
            self._x = x
        return conv2d(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.weight.value, grad)
        self.weight.grad, self.bias.grad = gw, gb
        self._x = None
        return gx


class ReLU:
    def __init__(self):
        self._x = None

    def params(self):
        return []

    def forward(self, x, training=False):
        if training:
            self._x = x
        return relu(x)

    def backward(self, grad):
        gx = relu_backward(self._x, grad)
        self._x = None
        return gx


class BatchNorm2d:
    def __init__(self, name, channels, dtype=np.float32):
        self.name = name
        self.state = BatchNormState.fresh(channels, dtype=dtype)
        self.gamma = Param(f"{name}.gamma", self.state.gamma)
        self.beta = Param(f"{name}.beta", self.state.beta)
        self.running_mean = Param(f"{name}.running_mean", self.state.running_mean, trainable=False)
        self.running_var = Param(f"{name}.running_var", self.state.running_var, trainable=False)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def forward(self, x, training=False):
        y, cache = batchnorm2d(x, self.state, training)
        if training:
            self._cache = cache
        return y

    def backward(self, grad):
        gx, gg, gbeta = batchnorm2d_backward(grad, self._cache, self.state)
        self.gamma.grad, self.beta.grad = gg, gbeta
        self._cache = None
        return gx


class Linear:
    def __init__(self, name, in_features, out_features, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / in_features)
        self.weight = Param(
            f"{name}.weight",
            rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype),
        )
        self.bias = Param(f"{name}.bias", np.zeros(out_features, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        if training:
            self._x = x
        return linear(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = linear_backward(self._x, self.weight.value, grad)
        self.weight.grad, self.bias.grad = gw, gb
        self._x = None
        return gx
