"""Lowering the network onto the restricted instruction set.

A 4-D convolution does not exist in the target op set, so each conv layer is
unrolled into per-(out,in) band work: SELECT one input band, CONV2D with that
pair's 2-D kernel, then an ADD chain over in-channels, out-channel major and
in-channel minor, bias last, and a final CAT of the per-out-channel planes in
channel order. Batch norm becomes a per-band scalar chain (sub mean, div by a
divisor precomputed as float32 sqrt(var+eps), mul gamma, add beta). PReLU
becomes maxzero + slope * minzero, and the head sigmoid becomes
neg -> exp -> add 1 -> recip.

The emitted instruction order is fully deterministic, and the float32
roundings land in exactly the same places as the reference ops in tensor.py,
so both engines produce bit-identical planes up to the sigmoid gadget (which
stays within a few float32 ulps of the reference sigmoid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LoweringError
from .graph import GraphSpec, ModelConfig, ParamSet, build_graph, check_params
from .isa import Instr, Program
from .tensor import BNParams, ConvWeights, PReLUParams, bn_divisors


@dataclass
class LoweringContext:
    """Accumulates instructions and tracks value ids during one lowering."""

    program: Program = field(default_factory=Program)

    def emit(self, op: str, args: tuple[int, ...] = (), **attrs) -> int:
        dest = len(self.program.instrs)
        self.program.instrs.append(Instr(dest, op, args, **attrs))
        return dest

    def declare_input(self, name: str, bands: int) -> int:
        self.program.inputs[name] = bands
        return self.emit("INPUT", input_name=name)


@dataclass(frozen=True)
class LoweredNetwork:
    program: Program
    # Per graph node: the value id holding its result, and the half-open
    # instruction index range that produced it. The emitter leans on these.
    node_values: dict[str, int]
    node_spans: dict[str, tuple[int, int]]
    graph: GraphSpec


def lower_conv(ctx: LoweringContext, src: int, w: ConvWeights) -> int:
    """Unroll one conv layer; see module docstring for the fixed order."""
    n_out, n_in = w.out_channels, w.in_channels
    outs: list[int] = []
    for o in range(n_out):
        acc: int | None = None
        for i in range(n_in):
            band = ctx.emit("SELECT", (src,), bands=(i,))
            conv = ctx.emit("CONV2D", (band,), kernel=np.ascontiguousarray(w.weight[o, i]))
            acc = conv if acc is None else ctx.emit("BINARY", (acc, conv), kind="add")
        if w.bias is not None:
            acc = ctx.emit(
                "SCALAR_BINARY", (acc,), kind="add", scalar=np.float32(w.bias[o])
            )
        outs.append(acc)
    if len(outs) == 1:
        return outs[0]
    return ctx.emit("CAT", tuple(outs))


def lower_bn(ctx: LoweringContext, src: int, bn: BNParams) -> int:
    """Per-band scalar chain with the divisor precomputed at lowering time."""
    div = bn_divisors(bn)
    outs = []
    for c in range(bn.channels):
        band = ctx.emit("SELECT", (src,), bands=(c,))
        v = ctx.emit(
            "SCALAR_BINARY", (band,), kind="sub", scalar=np.float32(bn.running_mean[c])
        )
        v = ctx.emit("SCALAR_BINARY", (v,), kind="div", scalar=np.float32(div[c]))
        v = ctx.emit("SCALAR_BINARY", (v,), kind="mul", scalar=np.float32(bn.gamma[c]))
        v = ctx.emit("SCALAR_BINARY", (v,), kind="add", scalar=np.float32(bn.beta[c]))
        outs.append(v)
    if len(outs) == 1:
        return outs[0]
    return ctx.emit("CAT", tuple(outs))


def lower_prelu(ctx: LoweringContext, src: int, p: PReLUParams) -> int:
    """maxzero(x) + slope * minzero(x), per band."""
    outs = []
    for c in range(p.channels):
        band = ctx.emit("SELECT", (src,), bands=(c,))
        pos = ctx.emit("UNARY", (band,), kind="maxzero")
        neg = ctx.emit("UNARY", (band,), kind="minzero")
        scaled = ctx.emit(
            "SCALAR_BINARY", (neg,), kind="mul", scalar=np.float32(p.slope[c])
        )
        outs.append(ctx.emit("BINARY", (pos, scaled), kind="add"))
    if len(outs) == 1:
        return outs[0]
    return ctx.emit("CAT", tuple(outs))


def lower_pool(ctx: LoweringContext, src: int) -> int:
    return ctx.emit("REDUCE_MAX", (src,), factor=2)


def lower_upsample(ctx: LoweringContext, src: int) -> int:
    return ctx.emit("UPSAMPLE_NEAREST", (src,), factor=2)


def lower_concat(ctx: LoweringContext, upsampled: int, skip: int) -> int:
    """Fixed order: upsampled stream first, encoder skip second."""
    return ctx.emit("CAT", (upsampled, skip))


def lower_sigmoid(ctx: LoweringContext, src: int) -> int:
    """1/(1+exp(-x)) from primitive ops: neg, exp, add 1, recip."""
    v = ctx.emit("UNARY", (src,), kind="neg")
    v = ctx.emit("UNARY", (v,), kind="exp")
    v = ctx.emit("SCALAR_BINARY", (v,), kind="add", scalar=np.float32(1.0))
    return ctx.emit("UNARY", (v,), kind="recip")


def _lower_tcbp(
    ctx: LoweringContext, src: int, params: ParamSet, name: str, eps: float
) -> int:
    v = src
    for unit in ("1", "2"):
        v = lower_conv(ctx, v, params.conv(f"{name}.conv{unit}"))
        v = lower_bn(ctx, v, params.bn(f"{name}.bn{unit}", eps))
        v = lower_prelu(ctx, v, params.prelu(f"{name}.prelu{unit}"))
    return v


def lower_network(cfg: ModelConfig, params: ParamSet) -> LoweredNetwork:
    """Lower the whole network to one straight-line program.

    The program has a single input named "x" with cfg.in_bands bands and
    outputs the one-band cloud probability at scale 0.
    """
    check_params(cfg, params)
    graph = build_graph(cfg)
    ctx = LoweringContext()
    node_values: dict[str, int] = {}
    node_spans: dict[str, tuple[int, int]] = {}
    for node in graph.nodes:
        start = len(ctx.program.instrs)
        if node.kind == "input":
            val = ctx.declare_input("x", cfg.in_bands)
        elif node.kind == "tcbp":
            val = _lower_tcbp(
                ctx, node_values[node.args[0]], params, node.name, cfg.bn_epsilon
            )
        elif node.kind == "maxpool":
            val = lower_pool(ctx, node_values[node.args[0]])
        elif node.kind == "upsample":
            val = lower_upsample(ctx, node_values[node.args[0]])
        elif node.kind == "concat":
            val = lower_concat(ctx, node_values[node.args[0]], node_values[node.args[1]])
        elif node.kind == "head":
            val = lower_conv(ctx, node_values[node.args[0]], params.conv("head"))
            val = lower_sigmoid(ctx, val)
        else:  # pragma: no cover - build_graph emits no other kinds
            raise LoweringError(f"cannot lower node kind {node.kind!r}")
        node_values[node.name] = val
        node_spans[node.name] = (start, len(ctx.program.instrs))
    ctx.program.output = node_values[graph.output]
    return LoweredNetwork(ctx.program, node_values, node_spans, graph)
