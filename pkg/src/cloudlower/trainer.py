"""From-scratch training: batched layers with hand-derived gradients.

The training path is separate from the inference ops in tensor.py: it works
on (batch, channels, H, W) arrays, batch norm runs in training mode (batch
statistics, momentum 0.1 running updates), and convolutions go through
im2col + GEMM. Every layer here has an analytic backward that is checked
against central finite differences in the test suite; the layer functions
are dtype-generic so the finite-difference harness can run them end to end
in float64.

Loss is binary cross entropy evaluated from the pre-sigmoid logits in the
stable softplus form: mean(log(1+exp(z)) - m*z).

Determinism: the seed feeds exactly two streams (weight init, epoch
shuffling); nothing else consumes randomness, so a (seed, config, dataset)
triple reproduces training bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .graph import ModelConfig, ParamSet, build_graph, registry_shapes

PRELU_INIT_SLOPE = 0.25
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    stop_oa: float | None = None  # stop early once the epoch OA reaches this

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass(frozen=True)
class LabeledPatch:
    bands: np.ndarray  # (C, H, W) float32 in [0,1]
    mask: np.ndarray  # (H, W) uint8 in {0,1}

    def __post_init__(self):
        if self.bands.ndim != 3 or self.bands.dtype != np.float32:
            raise DimensionError("patch bands must be float32 (C,H,W)")
        if self.mask.shape != self.bands.shape[1:] or self.mask.dtype != np.uint8:
            raise DimensionError("mask must be uint8 matching the patch extent")


# ======================================================================
# LAYERS (forward + backward)
# ======================================================================


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*k*k, H*W) patch matrix with zero padding."""
    b, c, h, w = x.shape
    r = k // 2
    xp = np.zeros((b, c, h + 2 * r, w + 2 * r), x.dtype)
    xp[:, :, r : r + h, r : r + w] = x
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (b, c, k, k, h, w), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return windows.reshape(b, c * k * k, h * w)


def conv_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None
) -> np.ndarray:
    b, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise DimensionError(f"conv expects {ci} channels, got {c}")
    cols = _im2col(x, k)
    out = np.matmul(weight.reshape(o, ci * k * k), cols)
    out = out.reshape(b, o, h, w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv_backward(
    x: np.ndarray, weight: np.ndarray, gout: np.ndarray, with_bias: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    b, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    r = k // 2
    cols = _im2col(x, k)
    g = gout.reshape(b, o, h * w)
    dw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, ci, k, k)
    dcols = np.matmul(weight.reshape(o, ci * k * k).T, g)
    dcols = dcols.reshape(b, c, k, k, h, w)
    dxp = np.zeros((b, c, h + 2 * r, w + 2 * r), x.dtype)
    for dy in range(k):
        for dx in range(k):
            dxp[:, :, dy : dy + h, dx : dx + w] += dcols[:, :, dy, dx]
    dx = dxp[:, :, r : r + h, r : r + w]
    db = gout.sum(axis=(0, 2, 3)) if with_bias else None
    return dx, dw, db


def bn_forward(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> tuple[np.ndarray, tuple]:
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # population variance
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, invstd, mu, var)


def bn_backward(
    cache: tuple, gamma: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, invstd, _, _ = cache
    dgamma = (gout * xhat).sum(axis=(0, 2, 3))
    dbeta = gout.sum(axis=(0, 2, 3))
    dxhat = gout * gamma[None, :, None, None]
    m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = invstd[None, :, None, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def prelu_forward(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + slope[None, :, None, None] * np.minimum(x, 0)


def prelu_backward(
    x: np.ndarray, slope: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dx = np.where(x > 0, gout, slope[None, :, None, None] * gout)
    dslope = (gout * np.minimum(x, 0)).sum(axis=(0, 2, 3))
    return dx, dslope


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool needs even dims, got {h}x{w}")
    win = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    # argmax returns the first maximum: row-major within each 2x2 block.
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(idx: np.ndarray, gout: np.ndarray) -> np.ndarray:
    b, c, h2, w2 = gout.shape
    win = np.zeros((b, c, h2, w2, 4), gout.dtype)
    np.put_along_axis(win, idx[..., None], gout[..., None], axis=-1)
    return (
        win.reshape(b, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, 2 * h2, 2 * w2)
    )


def upsample_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_backward(gout: np.ndarray) -> np.ndarray:
    b, c, h, w = gout.shape
    return gout.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ======================================================================
# LOSS
# ======================================================================


def bce_from_logits(logits: np.ndarray, mask: np.ndarray) -> float:
    """Mean BCE over all pixels, stable softplus form, evaluated in float64."""
    z = logits.astype(np.float64)
    m = mask.astype(np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - m * z))


def bce_grad(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d(mean BCE)/dlogits = (sigmoid(z) - m) / N, in the logits' dtype."""
    z = logits.astype(np.float64)
    sig = np.empty_like(z)
    pos = z >= 0
    neg = ~pos
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[neg])
    sig[neg] = ez / (1.0 + ez)
    g = (sig - mask.astype(np.float64)) / z.size
    return g.astype(logits.dtype)


# ======================================================================
# NETWORK FORWARD/BACKWARD (training mode)
# ======================================================================


def forward_train(
    cfg: ModelConfig,
    params: ParamSet,
    x: np.ndarray,
    update_running: bool = False,
    dtype=np.float32,
) -> tuple[np.ndarray, dict]:
    """Batch forward in training mode; returns logits and backward caches.

    update_running mutates the running_mean/running_var tensors in params
    (float32, momentum 0.1, population batch variance).
    """
    if x.ndim != 4 or x.shape[1] != cfg.in_bands:
        raise DimensionError(f"expected (B,{cfg.in_bands},H,W) input, got {x.shape}")
    step = 2**cfg.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise DimensionError(
            f"patch {x.shape[2]}x{x.shape[3]} not divisible by 2**depth = {step}"
        )
    x = x.astype(dtype, copy=False)

    def p(name: str) -> np.ndarray:
        return params[name].astype(dtype, copy=False)

    values: dict[str, np.ndarray] = {}
    caches: dict[str, tuple] = {}

    def run_tcbp(name: str, v: np.ndarray) -> np.ndarray:
        for unit in ("1", "2"):
            conv_in = v
            v = conv_forward(v, p(f"{name}.conv{unit}.weight"), None)
            v, bn_cache = bn_forward(
                v, p(f"{name}.bn{unit}.gamma"), p(f"{name}.bn{unit}.beta"), cfg.bn_epsilon
            )
            if update_running:
                _, _, mu, var = bn_cache
                for stat, val in (("running_mean", mu), ("running_var", var)):
                    arr = params[f"{name}.bn{unit}.{stat}"]
                    arr[:] = ((1.0 - BN_MOMENTUM) * arr + BN_MOMENTUM * val).astype(
                        np.float32
                    )
            prelu_in = v
            v = prelu_forward(v, p(f"{name}.prelu{unit}.slope"))
            caches[f"{name}.unit{unit}"] = (conv_in, bn_cache, prelu_in)
        return v

    for node in build_graph(cfg).nodes:
        if node.kind == "input":
            values[node.name] = x
        elif node.kind == "tcbp":
            values[node.name] = run_tcbp(node.name, values[node.args[0]])
        elif node.kind == "maxpool":
            out, idx = maxpool_forward(values[node.args[0]])
            values[node.name] = out
            caches[node.name] = (idx,)
        elif node.kind == "upsample":
            values[node.name] = upsample_forward(values[node.args[0]])
        elif node.kind == "concat":
            values[node.name] = np.concatenate(
                [values[node.args[0]], values[node.args[1]]], axis=1
            )
        elif node.kind == "head":
            head_in = values[node.args[0]]
            caches["head"] = (head_in,)
            values[node.name] = conv_forward(head_in, p("head.weight"), p("head.bias"))
    caches["_values"] = values
    return values["head"], caches


def backward(
    cfg: ModelConfig, params: ParamSet, caches: dict, dlogits: np.ndarray, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Gradients for every parameter tensor given d(loss)/d(logits)."""

    def p(name: str) -> np.ndarray:
        return params[name].astype(dtype, copy=False)

    grads: dict[str, np.ndarray] = {}
    gvalues: dict[str, np.ndarray] = {}

    def accumulate(name: str, g: np.ndarray) -> None:
        if name in gvalues:
            gvalues[name] = gvalues[name] + g
        else:
            gvalues[name] = g

    def tcbp_backward(name: str, g: np.ndarray) -> np.ndarray:
        for unit in ("2", "1"):
            conv_in, bn_cache, prelu_in = caches[f"{name}.unit{unit}"]
            g, dslope = prelu_backward(prelu_in, p(f"{name}.prelu{unit}.slope"), g)
            grads[f"{name}.prelu{unit}.slope"] = dslope
            g, dgamma, dbeta = bn_backward(bn_cache, p(f"{name}.bn{unit}.gamma"), g)
            grads[f"{name}.bn{unit}.gamma"] = dgamma
            grads[f"{name}.bn{unit}.beta"] = dbeta
            g, dw, _ = conv_backward(conv_in, p(f"{name}.conv{unit}.weight"), g, False)
            grads[f"{name}.conv{unit}.weight"] = dw
        return g

    nodes = build_graph(cfg).nodes
    width = cfg.width
    # Head first: it is the last node.
    (head_in,) = caches["head"]
    g, dw, db = conv_backward(head_in, p("head.weight"), dlogits, True)
    grads["head.weight"] = dw
    grads["head.bias"] = db
    accumulate(nodes[-1].args[0], g)

    for node in reversed(nodes[:-1]):
        if node.name not in gvalues:
            continue
        g = gvalues.pop(node.name)
        if node.kind == "tcbp":
            accumulate(node.args[0], tcbp_backward(node.name, g))
        elif node.kind == "maxpool":
            (idx,) = caches[node.name]
            accumulate(node.args[0], maxpool_backward(idx, g))
        elif node.kind == "upsample":
            accumulate(node.args[0], upsample_backward(g))
        elif node.kind == "concat":
            accumulate(node.args[0], g[:, :width])
            accumulate(node.args[1], g[:, width:])
    return grads


# ======================================================================
# INITIALIZATION AND ADAM
# ======================================================================


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """He-style init adapted for PReLU: conv weights are zero-mean normal
    with variance 2 / ((1 + a^2) * fan_in), a = 0.25; slopes start at 0.25;
    BN starts as identity with zeroed running mean and unit running var."""
    rng = np.random.default_rng([seed, 0])
    params = ParamSet()
    a2 = PRELU_INIT_SLOPE**2
    for name, shape in registry_shapes(cfg):
        if name.endswith("conv1.weight") or name.endswith("conv2.weight") or name == "head.weight":
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.sqrt(2.0 / ((1.0 + a2) * fan_in))
            params[name] = rng.normal(0.0, std, shape).astype(np.float32)
        elif name.endswith(".slope"):
            params[name] = np.full(shape, PRELU_INIT_SLOPE, np.float32)
        elif name.endswith(".gamma") or name.endswith("running_var"):
            params[name] = np.ones(shape, np.float32)
        else:  # beta, running_mean, head.bias
            params[name] = np.zeros(shape, np.float32)
    return params


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, tc: TrainConfig
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = tc.beta1, tc.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        g = g.astype(np.float32, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * g * g
        mhat = m / np.float32(c1)
        vhat = v / np.float32(c2)
        params[name][...] -= np.float32(tc.lr) * mhat / (np.sqrt(vhat) + np.float32(tc.adam_eps))


# ======================================================================
# TRAINING LOOP
# ======================================================================


def train(
    cfg: ModelConfig, tc: TrainConfig, dataset: list[LabeledPatch]
) -> tuple[ParamSet, list[dict]]:
    """Train from scratch; returns the trained params and per-epoch log.

    Epoch OA is accumulated from the training-mode predictions of each batch
    (logit >= 0 means probability >= 0.5).
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    shapes = {p.bands.shape for p in dataset}
    if len(shapes) != 1:
        raise DimensionError(f"patches disagree on shape: {sorted(shapes)}")
    xs = np.stack([p.bands for p in dataset])
    ms = np.stack([p.mask for p in dataset])
    params = init_params(cfg, tc.seed)
    state = AdamState()
    rng = np.random.default_rng([tc.seed, 1])
    log: list[dict] = []
    n = xs.shape[0]
    for epoch in range(1, tc.epochs + 1):
        perm = rng.permutation(n)
        loss_sum = 0.0
        hits = 0
        for b0 in range(0, n, tc.batch):
            sel = perm[b0 : b0 + tc.batch]
            bx, bm = xs[sel], ms[sel]
            logits, caches = forward_train(cfg, params, bx, update_running=True)
            z = logits[:, 0]
            loss_sum += bce_from_logits(z, bm) * sel.size
            grads = backward(cfg, params, caches, bce_grad(logits, bm[:, None]))
            adam_step(params, grads, state, tc)
            hits += int(np.count_nonzero((z >= 0) == (bm > 0)))
        oa = hits / (n * xs.shape[2] * xs.shape[3])
        log.append({"epoch": epoch, "loss": loss_sum / n, "oa": oa})
        if tc.stop_oa is not None and oa >= tc.stop_oa:
            break
    return params, log


# ======================================================================
# SYNTHETIC DATA
# ======================================================================


def _terrain(rng: np.random.Generator, patch: int) -> np.ndarray:
    """Smooth low-amplitude background field in roughly [0, 1]."""
    yy, xx = np.mgrid[0:patch, 0:patch].astype(np.float64) / patch
    field = np.zeros((patch, patch))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    field -= field.min()
    peak = field.max()
    if peak > 0:
        field /= peak
    return field


def _blob_mask(rng: np.random.Generator, patch: int) -> np.ndarray:
    """Union of 2-3 random ellipses with cloud fraction in [0.2, 0.6]."""
    yy, xx = np.mgrid[0:patch, 0:patch].astype(np.float64)
    for _ in range(40):
        mask = np.zeros((patch, patch), bool)
        for _ in range(int(rng.integers(2, 4))):
            cy, cx = rng.uniform(patch * 0.2, patch * 0.8, 2)
            ry = rng.uniform(patch / 6, patch / 3)
            rx = rng.uniform(patch / 6, patch / 3)
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        frac = mask.mean()
        if 0.2 <= frac <= 0.6:
            return mask
    return mask  # last attempt; fraction may sit slightly outside the band


def synth_dataset(
    n: int, patch: int, seed: int, in_bands: int = 10
) -> list[LabeledPatch]:
    """Deterministic synthetic scenes: dark smooth terrain under bright,
    low-texture cloud blobs. The last band behaves thermally (clouds cold);
    all other bands are optical (clouds bright)."""
    if n < 1 or patch < 8:
        raise ConfigError("need n >= 1 and patch >= 8")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 2, i])
        terrain = _terrain(rng, patch)
        mask = _blob_mask(rng, patch)
        band_mix = rng.uniform(0.0, 1.0, in_bands)
        bands = np.empty((in_bands, patch, patch), np.float64)
        for b in range(in_bands):
            ground = 0.15 + 0.25 * band_mix[b] + 0.12 * terrain
            if b == in_bands - 1:
                cloud = 0.16 + 0.05 * band_mix[b]  # thermal: clouds are cold
                ground = 0.55 + 0.1 * terrain
            else:
                cloud = 0.72 + 0.2 * band_mix[b]
            bands[b] = np.where(mask, cloud, ground)
        bands += rng.normal(0.0, 0.015, bands.shape)
        np.clip(bands, 0.0, 1.0, out=bands)
        out.append(LabeledPatch(bands.astype(np.float32), mask.astype(np.uint8)))
    return out
