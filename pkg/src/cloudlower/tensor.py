"""Float32 tensor primitives shared by the reference network and the
instruction-set interpreter.

All image-like data is channel-major float32 with shape (channels, height,
width). Convolutions are "same" convolutions with zero padding outside the
image.

Numeric contract, load-bearing for the whole project: every 2-D kernel
application accumulates its taps in float64 (sequential tap order, row-major)
and stores a float32 plane; any combination across input bands then happens in
float32, in ascending in-channel order, bias last. The lowered instruction
stream performs exactly those roundings in exactly that order, and both
engines call the same band-convolution kernel below, so reference and lowered
outputs agree bit for bit up to the final sigmoid. Keep it that way: changing
summation order here silently breaks the equivalence guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


F32 = np.float32
ZERO32 = np.float32(0.0)


# ======================================================================
# VALUE TYPES
# ======================================================================


@dataclass(frozen=True)
class Tensor:
    """A (channels, height, width) float32 array."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if not isinstance(d, np.ndarray) or d.ndim != 3:
            raise DimensionError("tensor data must be a 3-D (C,H,W) array")
        if d.dtype != np.float32:
            raise DimensionError(f"tensor dtype must be float32, got {d.dtype}")
        if min(d.shape) < 1:
            raise DimensionError(f"tensor dims must all be >= 1, got {d.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Kernel2D:
    """A single odd-sized square float32 kernel."""

    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"kernel must be square, got {w.shape}")
        if w.shape[0] % 2 != 1:
            raise DimensionError(f"kernel size must be odd, got {w.shape[0]}")
        if w.dtype != np.float32:
            raise DimensionError(f"kernel dtype must be float32, got {w.dtype}")
        if not np.all(np.isfinite(w)):
            raise ConfigError("kernel weights must be finite")

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ConvWeights:
    """Per-(out,in) 2-D kernels, shape (out, in, k, k), plus optional bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"conv weight must be (O,I,k,k), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise DimensionError(f"kernel size must be odd, got {w.shape[2]}")
        if w.dtype != np.float32:
            raise DimensionError("conv weight dtype must be float32")
        if self.bias is not None:
            b = self.bias
            if b.shape != (w.shape[0],) or b.dtype != np.float32:
                raise DimensionError("bias must be float32 with one entry per out channel")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def kernel(self, o: int, i: int) -> Kernel2D:
        return Kernel2D(self.weight[o, i])


@dataclass(frozen=True)
class BNParams:
    """Inference-time batch norm parameters, one entry per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape
        for name in ("gamma", "beta", "running_mean", "running_var"):
            a = getattr(self, name)
            if a.ndim != 1 or a.shape != n or a.dtype != np.float32:
                raise DimensionError(f"bn {name} must be float32 (C,) matching gamma")
        if self.epsilon <= 0:
            raise ConfigError(f"bn epsilon must be > 0, got {self.epsilon}")
        if not np.all(np.isfinite(self.running_var)) or np.any(self.running_var < 0):
            raise ConfigError("bn running_var must be finite and >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class PReLUParams:
    """Per-channel negative-side slopes."""

    slope: np.ndarray

    def __post_init__(self):
        if self.slope.ndim != 1 or self.slope.dtype != np.float32:
            raise DimensionError("prelu slope must be a float32 (C,) array")

    @property
    def channels(self) -> int:
        return self.slope.shape[0]


# ======================================================================
# BAND CONVOLUTION KERNELS
# ======================================================================
# The scalar leaf and the batched variant must keep the identical tap loop.
# The batch calls the leaf so there is only one accumulation order in the
# program. The numpy fallback reproduces the same per-element operation
# sequence (float64 multiply of exact float32 values, sequential adds in tap
# order), so its results are bit-identical to the jitted path.


@njit(cache=True)
def _conv2d_px_jit(plane, kernel, y, x):  # pragma: no cover - measured via wrapper
    h, w = plane.shape
    k = kernel.shape[0]
    r = k // 2
    acc = 0.0
    for dy in range(k):
        yy = y + dy - r
        if yy < 0 or yy >= h:
            continue
        for dx in range(k):
            xx = x + dx - r
            if xx < 0 or xx >= w:
                continue
            acc += np.float64(kernel[dy, dx]) * np.float64(plane[yy, xx])
    return acc


@njit(cache=True)
def _conv2d_band_jit(plane, kernel):  # pragma: no cover - measured via wrapper
    h, w = plane.shape
    k = kernel.shape[0]
    out = np.empty((h, w), np.float32)
    if k == 3 and h >= 3 and w >= 3:
        # Interior fast path: every tap is in bounds, so the boundary checks
        # drop out and the loop vectorizes. The accumulation is the same
        # chain the generic pixel loop performs: start at 0.0, add the nine
        # float64 tap products in row-major tap order.
        k00 = np.float64(kernel[0, 0])
        k01 = np.float64(kernel[0, 1])
        k02 = np.float64(kernel[0, 2])
        k10 = np.float64(kernel[1, 0])
        k11 = np.float64(kernel[1, 1])
        k12 = np.float64(kernel[1, 2])
        k20 = np.float64(kernel[2, 0])
        k21 = np.float64(kernel[2, 1])
        k22 = np.float64(kernel[2, 2])
        for y in range(1, h - 1):
            for x in range(1, w - 1):
                acc = 0.0
                acc += k00 * np.float64(plane[y - 1, x - 1])
                acc += k01 * np.float64(plane[y - 1, x])
                acc += k02 * np.float64(plane[y - 1, x + 1])
                acc += k10 * np.float64(plane[y, x - 1])
                acc += k11 * np.float64(plane[y, x])
                acc += k12 * np.float64(plane[y, x + 1])
                acc += k20 * np.float64(plane[y + 1, x - 1])
                acc += k21 * np.float64(plane[y + 1, x])
                acc += k22 * np.float64(plane[y + 1, x + 1])
                out[y, x] = acc
        for x in range(w):
            out[0, x] = _conv2d_px_jit(plane, kernel, 0, x)
            out[h - 1, x] = _conv2d_px_jit(plane, kernel, h - 1, x)
        for y in range(1, h - 1):
            out[y, 0] = _conv2d_px_jit(plane, kernel, y, 0)
            out[y, w - 1] = _conv2d_px_jit(plane, kernel, y, w - 1)
        return out
    for y in range(h):
        for x in range(w):
            out[y, x] = _conv2d_px_jit(plane, kernel, y, x)
    return out


@njit(cache=True)
def _conv2d_pairs_jit(planes, kernels):  # pragma: no cover
    n_out, n_in = kernels.shape[0], kernels.shape[1]
    h, w = planes.shape[1], planes.shape[2]
    out = np.empty((n_out, n_in, h, w), np.float32)
    for o in range(n_out):
        for i in range(n_in):
            out[o, i] = _conv2d_band_jit(planes[i], kernels[o, i])
    return out


def _conv2d_band_np(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    k = kernel.shape[0]
    r = k // 2
    padded = np.zeros((h + 2 * r, w + 2 * r), np.float64)
    padded[r : r + h, r : r + w] = plane
    out = np.zeros((h, w), np.float64)
    for dy in range(k):
        for dx in range(k):
            out += np.float64(kernel[dy, dx]) * padded[dy : dy + h, dx : dx + w]
    return out.astype(np.float32)


def conv2d_band(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Apply one 2-D kernel to one float32 plane: float64 taps, float32 out."""
    if _HAVE_NUMBA:
        return _conv2d_band_jit(plane, kernel)
    return _conv2d_band_np(plane, kernel)


def _conv2d_pairs(planes: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """All per-(out,in) band results as a float32 (O,I,H,W) block."""
    if _HAVE_NUMBA:
        return _conv2d_pairs_jit(planes, kernels)
    n_out, n_in = kernels.shape[0], kernels.shape[1]
    h, w = planes.shape[1], planes.shape[2]
    out = np.empty((n_out, n_in, h, w), np.float32)
    for o in range(n_out):
        for i in range(n_in):
            out[o, i] = _conv2d_band_np(planes[i], kernels[o, i])
    return out


# ======================================================================
# NETWORK OPERATIONS
# ======================================================================

# Cap on the transient (O,I,H,W) band block, in floats. Chunking over out
# channels only regroups independent computations, so results are unchanged.
_PAIR_BLOCK_FLOATS = 16 << 20


def conv2d_same(x: Tensor, w: ConvWeights) -> Tensor:
    """Same-size convolution.

    Band results are rounded to float32 per (out,in) pair, then combined in
    float32 in ascending in-channel order; see the module docstring.
    """
    if x.channels != w.in_channels:
        raise DimensionError(
            f"conv expects {w.in_channels} input channels, got {x.channels}"
        )
    n_out, n_in = w.out_channels, w.in_channels
    h, wd = x.height, x.width
    chunk = max(1, _PAIR_BLOCK_FLOATS // max(1, n_in * h * wd))
    out = np.empty((n_out, h, wd), np.float32)
    for o0 in range(0, n_out, chunk):
        o1 = min(n_out, o0 + chunk)
        pairs = _conv2d_pairs(x.data, w.weight[o0:o1])
        acc = pairs[:, 0].copy()
        for i in range(1, n_in):
            np.add(acc, pairs[:, i], out=acc)
        out[o0:o1] = acc
    if w.bias is not None:
        np.add(out, w.bias[:, None, None], out=out)
    return Tensor(out)


def bn_divisors(bn: BNParams) -> np.ndarray:
    """Per-channel sqrt(var + eps): evaluated in float64, stored float32.

    Shared by the inference op and the lowering so both use identical scalars.
    """
    return np.sqrt(bn.running_var.astype(np.float64) + bn.epsilon).astype(np.float32)


def batchnorm_infer(x: Tensor, bn: BNParams) -> Tensor:
    """Normalize with running statistics: ((x - mean) / div) * gamma + beta.

    The four float32 roundings happen in that order, matching the lowered
    scalar-op chain elementwise.
    """
    if x.channels != bn.channels:
        raise DimensionError(f"bn expects {bn.channels} channels, got {x.channels}")
    div = bn_divisors(bn)
    out = x.data - bn.running_mean[:, None, None]
    out /= div[:, None, None]
    out *= bn.gamma[:, None, None]
    out += bn.beta[:, None, None]
    return Tensor(out)


def prelu(x: Tensor, p: PReLUParams) -> Tensor:
    """max(x,0) + slope*min(x,0), float32 multiply then add."""
    if x.channels != p.channels:
        raise DimensionError(f"prelu expects {p.channels} channels, got {x.channels}")
    pos = np.maximum(x.data, ZERO32)
    neg = np.minimum(x.data, ZERO32)
    return Tensor(pos + p.slope[:, None, None] * neg)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Height and width must be even."""
    c, h, w = x.data.shape
    if h % 2 != 0 or w % 2 != 0:
        raise DimensionError(f"maxpool2 needs even dims, got {h}x{w}")
    v = x.data.reshape(c, h // 2, 2, w // 2, 2)
    return Tensor(np.ascontiguousarray(v.max(axis=(2, 4))))


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling (each pixel becomes a 2x2 block)."""
    return Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation, first argument's channels first."""
    if a.height != b.height or a.width != b.width:
        raise DimensionError(
            f"concat needs equal spatial dims, got {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    return Tensor(np.concatenate([a.data, b.data], axis=0))


def head_sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic sigmoid, float64 sign-stable branch, one rounding.

    Output lands strictly inside (0,1) for any logit magnitude the trained
    network produces; the lowered gadget deviates from this by a few float32
    ulps at most.
    """
    z = x.data.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out.astype(np.float32))
