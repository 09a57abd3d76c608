"""Dense NCHW compute core: functional ops with explicit backward passes,
parameter-holding layers built on them, and momentum SGD.

Tensors are plain ``numpy.ndarray`` objects. Training and inference run in
float32; float64 is used by the gradient checker.

Each functional op comes as a pair::

    y, cache = op_forward(x, ...)
    dx, ... = op_backward(dy, cache)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Names of backward passes to corrupt on purpose; used to prove the gradient
# checker actually detects a broken gradient.
SABOTAGE: set[str] = set()


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "pad", _pair(self.pad))

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.pad
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output extent {ho}x{wo} is not positive for input {h}x{w}")
        return ho, wo


@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its gradient and momentum buffer."""

    value: np.ndarray
    name: str = ""
    frozen: bool = False
    grad: np.ndarray = field(init=False)
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def layer(self) -> str:
        return self.name.rsplit(".", 1)[0]

    def zero_grad(self):
        self.grad[...] = 0


def xavier_init(shape, fan_in: int, fan_out: int, rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform samples in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fan_in and fan_out must be positive, got {fan_in}, {fan_out}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def conv_fans(spec: ConvSpec) -> tuple[int, int]:
    kh, kw = spec.kernel
    return spec.in_channels * kh * kw, spec.out_channels * kh * kw


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride=1, pad=0):
    """Zero-padded cross-correlation via im2col.

    x: (N, C, H, W); w: (O, C, kh, kw); b: (O,). Returns y: (N, O, Ho, Wo).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output extent {ho}x{wo} is not positive for input {h}x{wd}")

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
        # (N, Ho, Wo, C, kh, kw) -> rows of patches
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(o, -1)
    y = cols @ wmat.T
    y += b
    y = y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, w, (sh, sw), (ph, pw), (ho, wo))
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    xshape, cols, w, (sh, sw), (ph, pw), (ho, wo) = cache
    n, c, h, wd = xshape
    o, _, kh, kw = w.shape
    dflat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(o, -1)
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        dx = dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    else:
        dcols = dcols.reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph : ph + h, pw : pw + wd]
    if "conv2d" in SABOTAGE:
        dx = -dx
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool_output_extent(size: int, k: int, s: int, pad: int = 0, ceil_mode: bool = False) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"pool window {k} larger than padded input {size + 2 * pad}")
    out = (-(-span // s) if ceil_mode else span // s) + 1
    # last window must start inside the (padded-left) input
    if ceil_mode and (out - 1) * s >= size + pad:
        out -= 1
    return out


def maxpool2d_forward(x, kernel=2, stride=2, pad=0, ceil_mode=False):
    """Max pooling; windows overhanging the border (padding or ceil mode)
    only see real input cells. Ties resolve to the first index in
    row-major window order."""
    n, c, h, wd = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    ho = pool_output_extent(h, kh, sh, ph, ceil_mode)
    wo = pool_output_extent(wd, kw, sw, pw, ceil_mode)
    eh = max((ho - 1) * sh + kh - (h + 2 * ph), 0)
    ew = max((wo - 1) * sw + kw - (wd + 2 * pw), 0)
    if ph or pw or eh or ew:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph + eh), (pw, pw + ew)), constant_values=-np.inf)
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    win = win.reshape(n, c, ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if (ph or pw or eh or ew) and np.isneginf(y).any():
        raise ShapeError("max pool window contains no input cells")
    cache = (x.shape, xp.shape, arg, (kh, kw), (sh, sw), (ph, pw))
    return np.ascontiguousarray(y), cache


def maxpool2d_backward(dy, cache):
    xshape, xpshape, arg, (kh, kw), (sh, sw), (ph, pw) = cache
    n, c, h, wd = xshape
    ho, wo = arg.shape[2:]
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            hit = arg == i * kw + j
            if hit.any():
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.where(hit, dy, 0)
    return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + wd])


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy, xshape):
    h, w = xshape[2:]
    return np.broadcast_to((dy / (h * w))[:, :, None, None], xshape).copy()


# ---------------------------------------------------------------------------
# elementwise, normalization, affine
# ---------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    # np.maximum keeps NaN visible so a corrupt input surfaces as a non-finite loss
    return np.maximum(x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy, mask):
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over (N, H, W).

    In train mode the running statistics arrays are updated in place with
    ``running = momentum * running + (1 - momentum) * batch`` (biased batch
    variance). Returns (y, cache); cache is None in inference mode.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm over {c} channels got gamma of shape {gamma.shape}")
    g = gamma[None, :, None, None]
    bt = beta[None, :, None, None]
    if not train:
        inv = 1.0 / np.sqrt(running_var + eps)
        y = (x - running_mean[None, :, None, None]) * (inv * gamma)[None, :, None, None] + bt
        return y.astype(x.dtype, copy=False), None
    m = n * h * w
    if m < 2:
        raise ValueError("train-mode batchnorm needs at least 2 values per channel")
    mu = x.mean(axis=(0, 2, 3))
    xc = x - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    y = xhat * g + bt
    running_mean *= momentum
    running_mean += (1 - momentum) * mu
    running_var *= momentum
    running_var += (1 - momentum) * var
    return y.astype(x.dtype, copy=False), (xhat, inv, gamma)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    mean_d = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
    mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
    dx = (dxhat - mean_d - xhat * mean_dx) * inv[None, :, None, None]
    return dx, dgamma, dbeta


def concat_forward(xs: Sequence[np.ndarray], axis: int = 1):
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ShapeError(f"concat along axis {axis}: shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[axis] for t in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def concat_backward(dy, cache):
    sizes, axis = cache
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(dy, bounds, axis=axis)]


def linear_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects (N, {w.shape[1]}) input, got {x.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def xent_per_sample(logits, labels):
    return -log_softmax(logits)[np.arange(logits.shape[0]), labels]


def softmax_xent_forward(logits, labels):
    """Returns (probabilities, mean loss, cache)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    probs = np.exp(logp)
    loss = float(-logp[np.arange(n), labels].mean())
    return probs, loss, (probs, labels)


def softmax_xent_backward(cache, scale: float = 1.0):
    probs, labels = cache
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    return d * (scale / n)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer. ``forward`` keeps a cache for ``backward`` only in train
    mode, so inference passes never mutate the layer."""

    name = ""

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Conv2d(Layer):
    def __init__(self, name: str, spec: ConvSpec, rng, dtype=DEFAULT_DTYPE):
        self.name = name
        self.spec = spec
        kh, kw = spec.kernel
        fi, fo = conv_fans(spec)
        shape = (spec.out_channels, spec.in_channels, kh, kw)
        self.weight = Parameter(xavier_init(shape, fi, fo, rng, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype), f"{name}.bias")
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        y, cache = conv2d_forward(x, self.weight.value, self.bias.value, self.spec.stride, self.spec.pad)
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm2d(Layer):
    def __init__(self, name: str, channels: int, dtype=DEFAULT_DTYPE, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, train=False):
        y, cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, train, self.eps, self.momentum
        )
        self._cache = cache
        return y

    def backward(self, dy):
        dx, dg, db = batchnorm_backward(dy, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        y, mask = relu_forward(x)
        self._mask = mask if train else None
        return y

    def backward(self, dy):
        return relu_backward(dy, self._mask)


class MaxPool2d(Layer):
    def __init__(self, name: str, kernel, stride, pad=0, ceil_mode=True):
        self.name = name
        self.kernel, self.stride, self.pad, self.ceil_mode = kernel, stride, pad, ceil_mode
        self._cache = None

    def forward(self, x, train=False):
        y, cache = maxpool2d_forward(x, self.kernel, self.stride, self.pad, self.ceil_mode)
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        return maxpool2d_backward(dy, self._cache)


class GlobalAvgPool(Layer):
    def __init__(self, name: str):
        self.name = name
        self._shape = None

    def forward(self, x, train=False):
        y, shape = global_avg_pool_forward(x)
        self._shape = shape if train else None
        return y

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._shape)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, rng, dtype=DEFAULT_DTYPE):
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(
            xavier_init((out_features, in_features), in_features, out_features, rng, dtype), f"{name}.weight"
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), f"{name}.bias")
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        y, cache = linear_forward(x, self.weight.value, self.bias.value)
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        dx, dw, db = linear_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Sequential(Layer):
    def __init__(self, name: str, layers: Sequence[Layer]):
        self.name = name
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """Momentum SGD with L2 weight decay; skips frozen parameters and clears
    every gradient afterwards."""
    for p in params:
        if not p.frozen:
            g = p.grad + weight_decay * p.value if weight_decay else p.grad
            buf = p.momentum_buffer
            buf *= momentum
            buf += g
            p.value -= (lr * buf).astype(p.value.dtype, copy=False)
        p.zero_grad()
