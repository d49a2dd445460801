"""Network structure: an encoder/decoder graph of TCBP blocks.

One TCBP block is two (conv 3x3 + batch norm + PReLU) units. The encoder
stacks depth blocks, each followed by a 2x2 max pool; the decoder mirrors it
with nearest x2 upsampling, concatenating the upsampled stream (first) with
the matching encoder block output (second) before each decoder block. The
decoder starts directly from the last pooled map. A single 3x3 conv with bias
plus a sigmoid produces the cloud probability.

Filter widths are fixed by the published architecture: the first encoder conv
is in_bands -> 64, each decoder block's first conv is 128 -> 64, everything
else is 64 -> 64, and the head is 64 -> 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

WIDTH = 64


@dataclass(frozen=True)
class ModelConfig:
    in_bands: int = 10
    depth: int = 4
    width: int = WIDTH
    kernel: int = 3
    pool: int = 2
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.width != WIDTH:
            raise ConfigError(f"width is fixed at {WIDTH}, got {self.width}")
        if not 1 <= self.depth <= 6:
            raise ConfigError(f"depth must be in 1..6, got {self.depth}")
        if self.in_bands < 1:
            raise ConfigError(f"in_bands must be >= 1, got {self.in_bands}")
        if self.kernel != 3:
            raise ConfigError(f"kernel is fixed at 3, got {self.kernel}")
        if self.pool != 2:
            raise ConfigError(f"pool factor is fixed at 2, got {self.pool}")
        if self.bn_epsilon <= 0:
            raise ConfigError(f"bn_epsilon must be > 0, got {self.bn_epsilon}")


@dataclass(frozen=True)
class GraphNode:
    name: str
    kind: str  # input | tcbp | maxpool | upsample | concat | head
    args: tuple[str, ...]
    in_channels: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class GraphSpec:
    config: ModelConfig
    nodes: tuple[GraphNode, ...]
    output: str

    def node(self, name: str) -> GraphNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


def build_graph(cfg: ModelConfig) -> GraphSpec:
    """Construct the node list in execution order."""
    w = cfg.width
    nodes: list[GraphNode] = [GraphNode("input", "input", (), 0, cfg.in_bands)]
    prev = "input"
    for lvl in range(1, cfg.depth + 1):
        cin = cfg.in_bands if lvl == 1 else w
        nodes.append(GraphNode(f"down{lvl}", "tcbp", (prev,), cin, w))
        nodes.append(GraphNode(f"pool{lvl}", "maxpool", (f"down{lvl}",), w, w))
        prev = f"pool{lvl}"
    for lvl in range(cfg.depth, 0, -1):
        up = f"up{lvl}.upsample"
        nodes.append(GraphNode(up, "upsample", (prev,), w, w))
        # Concat order is fixed: upsampled stream first, skip second.
        nodes.append(GraphNode(f"concat{lvl}", "concat", (up, f"down{lvl}"), 2 * w, 2 * w))
        nodes.append(GraphNode(f"up{lvl}", "tcbp", (f"concat{lvl}",), 2 * w, w))
        prev = f"up{lvl}"
    nodes.append(GraphNode("head", "head", (prev,), w, 1))
    return GraphSpec(cfg, tuple(nodes), "head")


# ======================================================================
# PARAMETER REGISTRY
# ======================================================================

_TCBP_SUFFIXES = (
    ("conv1.weight", "conv"),
    ("bn1.gamma", "bn"),
    ("bn1.beta", "bn"),
    ("bn1.running_mean", "bn"),
    ("bn1.running_var", "bn"),
    ("prelu1.slope", "prelu"),
    ("conv2.weight", "conv"),
    ("bn2.gamma", "bn"),
    ("bn2.beta", "bn"),
    ("bn2.running_mean", "bn"),
    ("bn2.running_var", "bn"),
    ("prelu2.slope", "prelu"),
)


def registry_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) for every parameter tensor in the model."""
    w, k = cfg.width, cfg.kernel
    out: list[tuple[str, tuple[int, ...]]] = []
    for node in build_graph(cfg).nodes:
        if node.kind == "tcbp":
            cin = node.in_channels
            for suffix, group in _TCBP_SUFFIXES:
                if suffix == "conv1.weight":
                    shape: tuple[int, ...] = (w, cin, k, k)
                elif suffix == "conv2.weight":
                    shape = (w, w, k, k)
                else:
                    shape = (w,)
                out.append((f"{node.name}.{suffix}", shape))
        elif node.kind == "head":
            out.append(("head.weight", (1, w, k, k)))
            out.append(("head.bias", (1,)))
    return out


@dataclass
class ParamSet:
    """Ordered name -> float32 array mapping for one model."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def conv(self, prefix: str) -> T.ConvWeights:
        bias = self.arrays.get(f"{prefix}.bias")
        return T.ConvWeights(self.arrays[f"{prefix}.weight"], bias)

    def bn(self, prefix: str, epsilon: float) -> T.BNParams:
        return T.BNParams(
            self.arrays[f"{prefix}.gamma"],
            self.arrays[f"{prefix}.beta"],
            self.arrays[f"{prefix}.running_mean"],
            self.arrays[f"{prefix}.running_var"],
            epsilon,
        )

    def prelu(self, prefix: str) -> T.PReLUParams:
        return T.PReLUParams(self.arrays[f"{prefix}.slope"])


def check_params(cfg: ModelConfig, params: ParamSet) -> None:
    """Verify the ParamSet matches the registry exactly (names and shapes)."""
    expected = registry_shapes(cfg)
    names = params.names()
    if names != [n for n, _ in expected]:
        raise ConfigError("parameter registry does not match the model config")
    for name, shape in expected:
        a = params[name]
        if tuple(a.shape) != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {tuple(a.shape)}")
        if a.dtype != np.float32:
            raise DimensionError(f"{name}: expected float32, got {a.dtype}")


def param_count(cfg: ModelConfig) -> int:
    """Total scalar parameter count."""
    return sum(int(np.prod(shape)) for _, shape in registry_shapes(cfg))


def random_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Random, well-conditioned parameters exercising every tensor role.

    Used by equivalence trials: variances stay away from zero so batch norm
    divisors are benign, and every scalar (means, betas, slopes, bias) is
    nonzero with probability one so nothing cancels structurally.
    """
    params = ParamSet()
    for name, shape in registry_shapes(cfg):
        if name.endswith("weight"):
            params[name] = rng.normal(0.0, 0.3, shape).astype(np.float32)
        elif name.endswith("running_var"):
            params[name] = rng.uniform(0.25, 2.0, shape).astype(np.float32)
        elif name.endswith(".gamma"):
            params[name] = rng.uniform(0.5, 1.5, shape).astype(np.float32)
        elif name.endswith(".slope"):
            params[name] = rng.uniform(0.05, 0.5, shape).astype(np.float32)
        else:  # beta, running_mean, head.bias
            params[name] = rng.normal(0.0, 0.2, shape).astype(np.float32)
    return params


# ======================================================================
# REFERENCE FORWARD
# ======================================================================


def _tcbp_forward(x: T.Tensor, params: ParamSet, name: str, eps: float) -> T.Tensor:
    for unit in ("1", "2"):
        x = T.conv2d_same(x, params.conv(f"{name}.conv{unit}"))
        x = T.batchnorm_infer(x, params.bn(f"{name}.bn{unit}", eps))
        x = T.prelu(x, params.prelu(f"{name}.prelu{unit}"))
    return x


def forward(cfg: ModelConfig, params: ParamSet, x: T.Tensor) -> T.Tensor:
    """Inference-mode forward pass: (in_bands, H, W) -> (1, H, W) probability.

    H and W must be divisible by 2**depth so every pooling stage sees even
    dims; use raster.pad_to_multiple for arbitrary scenes.
    """
    if x.channels != cfg.in_bands:
        raise DimensionError(f"model expects {cfg.in_bands} bands, got {x.channels}")
    step = 2**cfg.depth
    if x.height % step != 0 or x.width % step != 0:
        raise DimensionError(
            f"input {x.height}x{x.width} not divisible by 2**depth = {step}"
        )
    check_params(cfg, params)
    graph = build_graph(cfg)
    values: dict[str, T.Tensor] = {}
    for node in graph.nodes:
        if node.kind == "input":
            values[node.name] = x
        elif node.kind == "tcbp":
            values[node.name] = _tcbp_forward(
                values[node.args[0]], params, node.name, cfg.bn_epsilon
            )
        elif node.kind == "maxpool":
            values[node.name] = T.maxpool2(values[node.args[0]])
        elif node.kind == "upsample":
            values[node.name] = T.upsample2(values[node.args[0]])
        elif node.kind == "concat":
            values[node.name] = T.concat(values[node.args[0]], values[node.args[1]])
        elif node.kind == "head":
            logits = T.conv2d_same(values[node.args[0]], params.conv("head"))
            values[node.name] = T.head_sigmoid(logits)
    return values[graph.output]


# ======================================================================
# RECEPTIVE HALO
# ======================================================================


def receptive_halo(cfg: ModelConfig) -> int:
    """Chebyshev radius beyond which an input pixel cannot affect an output.

    Computed by exact interval propagation, walking the graph backwards: for
    each node we track the index interval (per axis, both axes identical by
    symmetry) of its output that the final output pixel [0] depends on, then
    widen it through each op. A 3x3 conv widens by 1 per conv, a 2x2 pool maps
    interval [lo,hi] to [2lo, 2hi+1] in its input, nearest upsampling maps to
    [floor(lo/2), floor(hi/2)]. Intervals meeting at a node (skip connections)
    take the union.
    """
    graph = build_graph(cfg)
    need: dict[str, tuple[int, int]] = {graph.output: (0, 0)}

    def widen(name: str, lo: int, hi: int) -> None:
        cur = need.get(name)
        if cur is None:
            need[name] = (lo, hi)
        else:
            need[name] = (min(cur[0], lo), max(cur[1], hi))

    for node in reversed(graph.nodes):
        if node.name not in need:
            continue
        lo, hi = need[node.name]
        if node.kind == "tcbp":
            widen(node.args[0], lo - 2, hi + 2)
        elif node.kind == "head":
            widen(node.args[0], lo - 1, hi + 1)
        elif node.kind == "maxpool":
            widen(node.args[0], 2 * lo, 2 * hi + 1)
        elif node.kind == "upsample":
            widen(node.args[0], lo // 2, hi // 2)
        elif node.kind == "concat":
            widen(node.args[0], lo, hi)
            widen(node.args[1], lo, hi)
    lo, hi = need["input"]
    return max(-lo, hi)
