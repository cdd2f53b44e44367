"""Reference floating-point kernels: convolution, pooling, dense, batchnorm, softmax.

Feature maps are plain ``numpy`` arrays of shape (channels, rows, cols); rows are
the time axis and cols the fiber-position axis. The convolution accumulates in a
fixed (in_channel, kernel_row, kernel_col) order so outputs are bit-reproducible
across runs and can be compared exactly against a naive nested-loop evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError


def as_feature_map(x) -> np.ndarray:
    """Validate and return ``x`` as a (channels, rows, cols) float array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigurationError(f"feature map must be 3-D (channels, rows, cols), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ConfigurationError(f"feature map dimensions must all be >= 1, got {arr.shape}")
    return arr


def _as_float(arr) -> np.ndarray:
    """Keep float32/float64 as is, promote everything else to float64."""
    a = np.asarray(arr)
    if a.dtype not in (np.float32, np.float64):
        return a.astype(np.float64)
    return a


@dataclass(frozen=True)
class ConvLayerParams:
    """Kernel [out][in][kh][kw], bias [out], stride and zero padding."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kernel = _as_float(self.kernel)
        bias = _as_float(self.bias)
        if kernel.ndim != 4:
            raise ConfigurationError(f"kernel must be 4-D [out][in][kh][kw], got shape {kernel.shape}")
        if bias.shape != (kernel.shape[0],):
            raise ConfigurationError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
        if kernel.shape[2] < 1 or kernel.shape[3] < 1:
            raise ConfigurationError("kernel window dimensions must be >= 1")
        if self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if self.padding < 0:
            raise ConfigurationError("padding must be >= 0")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def window(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


@dataclass(frozen=True)
class PoolSpec:
    """Windowed pooling: ``mode`` is "max" or "avg"."""

    mode: str
    window: tuple[int, int] = (2, 2)
    stride: int = 2

    def __post_init__(self):
        if self.mode not in ("max", "avg"):
            raise ConfigurationError(f"pool mode must be 'max' or 'avg', got {self.mode!r}")
        if self.window[0] < 1 or self.window[1] < 1:
            raise ConfigurationError("pool window dimensions must be >= 1")
        if self.stride < 1:
            raise ConfigurationError("pool stride must be >= 1")


@dataclass(frozen=True)
class DenseParams:
    """Fully connected layer: weights [out][in] and bias [out]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weights = _as_float(self.weights)
        bias = _as_float(self.bias)
        if weights.ndim != 2:
            raise ConfigurationError(f"dense weights must be 2-D [out][in], got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ConfigurationError(f"dense bias shape {bias.shape} does not match {weights.shape[0]} outputs")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)


@dataclass(frozen=True)
class BatchNormParams:
    """Per-channel affine normalization with running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = {}
        for name in ("gamma", "beta", "mean", "var"):
            arrays[name] = _as_float(getattr(self, name))
        shapes = {a.shape for a in arrays.values()}
        if len(shapes) != 1 or arrays["gamma"].ndim != 1:
            raise ConfigurationError("batchnorm arrays must be 1-D and share one shape")
        if np.any(arrays["var"] < 0):
            raise ConfigurationError("batchnorm variance must be >= 0")
        if not self.eps > 0:
            raise ConfigurationError("batchnorm epsilon must be > 0")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv_output_shape(in_rows: int, in_cols: int, window: tuple[int, int],
                      stride: int, padding: int = 0) -> tuple[int, int]:
    """Floor-rule output size shared by convolution and pooling."""
    p, q = window
    rows = (in_rows + 2 * padding - p) // stride + 1
    cols = (in_cols + 2 * padding - q) // stride + 1
    return rows, cols


def conv2d_forward(x, params: ConvLayerParams) -> np.ndarray:
    """Cross-correlate ``x`` with the kernel and add the bias.

    Accumulation is performed term by term in (in_channel, kernel_row,
    kernel_col) order with the bias added last, so every output element sees a
    fixed floating-point operation sequence.
    """
    x = as_feature_map(x)
    m, n, p, q = params.kernel.shape
    if x.shape[0] != n:
        raise ConfigurationError(
            f"input has {x.shape[0]} channels but kernel expects {n}")
    s, pad = params.stride, params.padding
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if xp.shape[1] < p or xp.shape[2] < q:
        raise ConfigurationError(
            f"window {p}x{q} larger than padded input {xp.shape[1]}x{xp.shape[2]}")
    oh, ow = conv_output_shape(x.shape[1], x.shape[2], (p, q), s, pad)
    out = np.zeros((m, oh, ow), dtype=np.float64)
    for ni in range(n):
        for pi in range(p):
            for qi in range(q):
                win = xp[ni, pi::s, qi::s][:oh, :ow]
                out += params.kernel[:, ni, pi, qi][:, None, None] * win[None, :, :]
    out += params.bias[:, None, None]
    return out


def pool2d_forward(x, spec: PoolSpec) -> np.ndarray:
    """Per-channel windowed max or arithmetic mean."""
    x = as_feature_map(x)
    p, q = spec.window
    s = spec.stride
    if p > x.shape[1] or q > x.shape[2]:
        raise ConfigurationError(
            f"pool window {p}x{q} larger than input {x.shape[1]}x{x.shape[2]}")
    oh, ow = conv_output_shape(x.shape[1], x.shape[2], (p, q), s)
    if spec.mode == "max":
        out = np.full((x.shape[0], oh, ow), -np.inf)
        for pi in range(p):
            for qi in range(q):
                np.maximum(out, x[:, pi::s, qi::s][:, :oh, :ow], out=out)
        return out
    acc = np.zeros((x.shape[0], oh, ow))
    for pi in range(p):
        for qi in range(q):
            acc += x[:, pi::s, qi::s][:, :oh, :ow]
    return acc / (p * q)


def dense_forward(x, params: DenseParams) -> np.ndarray:
    """out[i] = sum_j W[i, j] * x[j] + b[i]."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.weights.shape[1]:
        raise ConfigurationError(
            f"dense input length {x.shape[0]} does not match weight columns {params.weights.shape[1]}")
    return params.weights @ x + params.bias


def batchnorm_apply(x, bn: BatchNormParams) -> np.ndarray:
    """Normalize per channel with the stored running statistics."""
    x = as_feature_map(x)
    if x.shape[0] != bn.channels:
        raise ConfigurationError(
            f"input has {x.shape[0]} channels but batchnorm expects {bn.channels}")
    scale = bn.gamma / np.sqrt(bn.var + bn.eps)
    shift = bn.beta - bn.mean * scale
    return x * scale[:, None, None] + shift[:, None, None]


def fold_batchnorm(conv: ConvLayerParams, bn: BatchNormParams) -> ConvLayerParams:
    """Absorb a batchnorm into the preceding convolution.

    The returned convolution satisfies conv'(x) == bn(conv(x)) for every input.
    """
    if bn.channels != conv.out_channels:
        raise ConfigurationError(
            f"batchnorm has {bn.channels} channels but conv produces {conv.out_channels}")
    scale = bn.gamma / np.sqrt(bn.var + bn.eps)
    kernel = conv.kernel * scale[:, None, None, None]
    bias = (conv.bias - bn.mean) * scale + bn.beta
    return ConvLayerParams(kernel=kernel, bias=bias, stride=conv.stride, padding=conv.padding)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    """Tempered softmax with max-subtraction for overflow safety."""
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    z = (z - np.max(z, axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    """Numerically stable log(softmax(logits)) along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
