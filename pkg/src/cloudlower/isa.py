"""The restricted whole-image instruction set.

Values are grids of named float32 bands that all share one spatial extent per
scale level. Programs are straight-line SSA: each instruction writes one new
value id and may only read ids defined earlier. The op set is closed; the
lowering in lowering.py targets exactly these ops and nothing else:

    INPUT             bind a declared multiband input
    CONST             one-band plane holding a scalar (input-sized, scale 0)
    SELECT            pick bands by index
    CONV2D            apply ONE 2-D kernel to every band independently,
                      zero padding, float64 taps, float32 band results
                      (same contract as tensor.conv2d_band)
    BINARY            bandwise add|sub|mul|div|min|max of two same-shape values
    SCALAR_BINARY     combine every pixel with one float32 scalar
    UNARY             exp|sqrt|neg|recip|maxzero|minzero
    CAT               band concatenation, argument order preserved
    REDUCE_MAX        2x2 max reduction (scale level +1)
    UPSAMPLE_NEAREST  nearest x2 upsampling (scale level -1)

Numeric semantics: BINARY and SCALAR_BINARY run directly in float32 (IEEE
correctly rounded); exp and sqrt evaluate in float64 and round to float32;
recip is float32 division; neg, maxzero, minzero are exact.

Text form, one instruction per line (grammar below is exact; floats use
numformat.render_f32):

    program v1
    input <name> bands=<int>
    v<id> = INPUT(<name>)
    v<id> = CONST(; s=<float>)
    v<id> = SELECT(v<a>; bands=[<int>,...])
    v<id> = CONV2D(v<a>; k=<int>, w=[<float> x k*k, row-major])
    v<id> = BINARY(v<a>, v<b>; kind=<kind>)
    v<id> = SCALAR_BINARY(v<a>; kind=<kind>, s=<float>)
    v<id> = UNARY(v<a>; kind=<kind>)
    v<id> = CAT(v<a>, v<b>, ...)
    v<id> = REDUCE_MAX(v<a>; factor=2)
    v<id> = UPSAMPLE_NEAREST(v<a>; factor=2)
    output v<id>
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, NumericDomainError, ValidationError
from .numformat import parse_f32, render_f32
from .tensor import conv2d_band

BINARY_KINDS = ("add", "sub", "mul", "div", "min", "max")
UNARY_KINDS = ("exp", "sqrt", "neg", "recip", "maxzero", "minzero")
OPS = (
    "INPUT",
    "CONST",
    "SELECT",
    "CONV2D",
    "BINARY",
    "SCALAR_BINARY",
    "UNARY",
    "CAT",
    "REDUCE_MAX",
    "UPSAMPLE_NEAREST",
)


@dataclass(frozen=True)
class GridImage:
    """Named float32 bands sharing one spatial extent."""

    bands: tuple[str, ...]
    data: np.ndarray
    scale: int = 0

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.dtype != np.float32:
            raise DimensionError("grid data must be float32 (C,H,W)")
        if len(self.bands) != self.data.shape[0]:
            raise DimensionError(
                f"{len(self.bands)} band names for {self.data.shape[0]} planes"
            )
        if len(set(self.bands)) != len(self.bands):
            raise DimensionError("band names must be unique")


class Instr(NamedTuple):
    # A NamedTuple, not a dataclass: lowered networks materialize hundreds of
    # thousands of these, and tuple construction keeps that step cheap.
    dest: int
    op: str
    args: tuple[int, ...] = ()
    kind: str | None = None
    scalar: np.float32 | None = None
    kernel: np.ndarray | None = None
    bands: tuple[int, ...] | None = None
    input_name: str | None = None
    factor: int | None = None


@dataclass
class Program:
    """Straight-line SSA program over grid values."""

    inputs: dict[str, int] = field(default_factory=dict)  # name -> band count
    instrs: list[Instr] = field(default_factory=list)
    output: int = -1


@dataclass(frozen=True)
class ValueInfo:
    bands: int
    scale: int


@dataclass(frozen=True)
class ProgramStats:
    op_counts: dict[str, int]
    total: int
    conv_instructions: int
    kernel_applications: int


# ======================================================================
# VALIDATION
# ======================================================================


def _fail(i: int, msg: str):
    raise ValidationError(f"instr {i}: {msg}")


def validate(prog: Program) -> dict[int, ValueInfo]:
    """Static checks: SSA form, closed op set, band/scale typing.

    Returns per-value band counts and scale levels.
    """
    info: dict[int, ValueInfo] = {}
    info_get = info.get
    bound_inputs: set[str] = set()
    for name, bands in prog.inputs.items():
        if bands < 1:
            raise ValidationError(f"input {name}: band count must be >= 1")

    def arg_info(i: int, a: int) -> ValueInfo:
        if a not in info:
            _fail(i, f"use of undefined value v{a}")
        return info[a]

    # Branches are ordered by how often lowered networks hit them; the loop
    # body avoids helper calls on those paths.
    for i, ins in enumerate(prog.instrs):
        op = ins.op
        if ins.dest in info:
            _fail(i, f"v{ins.dest} assigned twice (SSA violation)")
        if op == "SELECT":
            src = info_get(ins.args[0])
            if src is None:
                src = arg_info(i, ins.args[0])
            if not ins.bands:
                _fail(i, "SELECT needs at least one band index")
            n = src.bands
            for b in ins.bands:
                if not 0 <= b < n:
                    _fail(i, f"band {b} out of range (source has {n})")
            info[ins.dest] = ValueInfo(len(ins.bands), src.scale)
        elif op == "CONV2D":
            src = info_get(ins.args[0])
            if src is None:
                src = arg_info(i, ins.args[0])
            k = ins.kernel
            if k is None or k.ndim != 2 or k.shape[0] != k.shape[1]:
                _fail(i, "CONV2D kernel must be square")
            if k.shape[0] % 2 != 1:
                _fail(i, f"CONV2D kernel size must be odd, got {k.shape[0]}")
            # A float64 sum of float32 taps cannot overflow, so it is finite
            # exactly when every tap is (any nan or inf propagates into it).
            if k.dtype != np.float32 or not math.isfinite(float(k.sum(dtype=np.float64))):
                _fail(i, "CONV2D kernel must be finite float32")
            info[ins.dest] = src
        elif op == "BINARY":
            if ins.kind not in BINARY_KINDS:
                _fail(i, f"unknown BINARY kind {ins.kind!r}")
            a = info_get(ins.args[0])
            if a is None:
                a = arg_info(i, ins.args[0])
            b = info_get(ins.args[1])
            if b is None:
                b = arg_info(i, ins.args[1])
            if a.bands != b.bands:
                _fail(i, f"BINARY band mismatch: {a.bands} vs {b.bands}")
            if a.scale != b.scale:
                _fail(i, f"BINARY scale mismatch: {a.scale} vs {b.scale}")
            info[ins.dest] = a
        elif op == "SCALAR_BINARY":
            if ins.kind not in BINARY_KINDS:
                _fail(i, f"unknown SCALAR_BINARY kind {ins.kind!r}")
            if ins.scalar is None or not math.isfinite(ins.scalar):
                _fail(i, "SCALAR_BINARY needs a finite scalar")
            if ins.kind == "div" and ins.scalar == 0:
                _fail(i, "SCALAR_BINARY div by zero")
            info[ins.dest] = arg_info(i, ins.args[0])
        elif op == "UNARY":
            if ins.kind not in UNARY_KINDS:
                _fail(i, f"unknown UNARY kind {ins.kind!r}")
            info[ins.dest] = arg_info(i, ins.args[0])
        elif op == "CAT":
            if not ins.args:
                _fail(i, "CAT needs at least one argument")
            parts = [arg_info(i, a) for a in ins.args]
            scale = parts[0].scale
            for p in parts[1:]:
                if p.scale != scale:
                    _fail(i, "CAT arguments must share one scale")
            info[ins.dest] = ValueInfo(sum(p.bands for p in parts), scale)
        elif op == "REDUCE_MAX":
            if ins.factor != 2:
                _fail(i, f"REDUCE_MAX factor must be 2, got {ins.factor}")
            src = arg_info(i, ins.args[0])
            info[ins.dest] = ValueInfo(src.bands, src.scale + 1)
        elif op == "UPSAMPLE_NEAREST":
            if ins.factor != 2:
                _fail(i, f"UPSAMPLE_NEAREST factor must be 2, got {ins.factor}")
            src = arg_info(i, ins.args[0])
            info[ins.dest] = ValueInfo(src.bands, src.scale - 1)
        elif op == "INPUT":
            if ins.input_name not in prog.inputs:
                _fail(i, f"undeclared input {ins.input_name!r}")
            if ins.input_name in bound_inputs:
                _fail(i, f"input {ins.input_name!r} bound twice")
            bound_inputs.add(ins.input_name)
            info[ins.dest] = ValueInfo(prog.inputs[ins.input_name], 0)
        elif op == "CONST":
            if ins.scalar is None or not math.isfinite(ins.scalar):
                _fail(i, "CONST needs a finite scalar")
            info[ins.dest] = ValueInfo(1, 0)
        else:
            _fail(i, f"unknown op {ins.op!r}")
    if prog.output not in info:
        raise ValidationError(f"output v{prog.output} is never defined")
    return info


# ======================================================================
# INTERPRETER
# ======================================================================


def interpret(prog: Program, inputs: dict[str, GridImage]) -> GridImage:
    """Execute a validated program on concrete inputs.

    All inputs must share one spatial extent; every REDUCE_MAX must see even
    dims at runtime. Intermediate values are freed at their last use.
    """
    info = validate(prog)
    for name, bands in prog.inputs.items():
        if name not in inputs:
            raise DimensionError(f"missing input {name!r}")
        g = inputs[name]
        if g.data.shape[0] != bands:
            raise DimensionError(
                f"input {name!r}: expected {bands} bands, got {g.data.shape[0]}"
            )
    dims = {inputs[n].data.shape[1:] for n in prog.inputs}
    if len(dims) > 1:
        raise DimensionError(f"inputs disagree on spatial dims: {sorted(dims)}")
    base_hw = dims.pop() if dims else None

    last_use: dict[int, int] = {}
    for i, ins in enumerate(prog.instrs):
        for a in ins.args:
            last_use[a] = i
    last_use[prog.output] = len(prog.instrs)

    values: dict[int, np.ndarray] = {}
    one = np.float32(1.0)
    zero = np.float32(0.0)
    last_use_get = last_use.get
    # Branch order follows lowered-network op frequency; conv chains are by
    # far the most common, so their three ops come first.
    for i, ins in enumerate(prog.instrs):
        op = ins.op
        if op == "SELECT":
            src = values[ins.args[0]]
            b = ins.bands
            if len(b) == 1:
                out = src[b[0] : b[0] + 1]
            else:
                out = src[list(b)]
        elif op == "CONV2D":
            src = values[ins.args[0]]
            if src.shape[0] == 1:
                out = conv2d_band(src[0], ins.kernel)[None]
            else:
                out = np.empty_like(src)
                for c in range(src.shape[0]):
                    out[c] = conv2d_band(src[c], ins.kernel)
        elif op == "BINARY":
            a = values[ins.args[0]]
            b = values[ins.args[1]]
            if a.shape != b.shape:
                raise DimensionError(f"instr {i}: BINARY shape mismatch {a.shape} vs {b.shape}")
            out = a + b if ins.kind == "add" else _binary(ins.kind, a, b, i)
        elif op == "SCALAR_BINARY":
            out = _binary(ins.kind, values[ins.args[0]], ins.scalar, i)
        elif op == "UNARY":
            a = values[ins.args[0]]
            kind = ins.kind
            if kind == "exp":
                # Large arguments saturate to +inf in float32; downstream
                # recip turns that into an exact 0, so suppress the warning
                # instead of failing (the sigmoid gadget relies on this).
                with np.errstate(over="ignore"):
                    out = np.exp(a.astype(np.float64)).astype(np.float32)
            elif kind == "sqrt":
                if np.any(a < 0):
                    raise NumericDomainError(f"instr {i}: sqrt of negative plane")
                out = np.sqrt(a.astype(np.float64)).astype(np.float32)
            elif kind == "neg":
                out = -a
            elif kind == "recip":
                if np.any(a == 0):
                    raise NumericDomainError(f"instr {i}: recip of zero plane")
                out = one / a
            elif kind == "maxzero":
                out = np.maximum(a, zero)
            else:  # minzero
                out = np.minimum(a, zero)
        elif op == "CAT":
            out = np.concatenate([values[a] for a in ins.args], axis=0)
        elif op == "REDUCE_MAX":
            a = values[ins.args[0]]
            c, h, w = a.shape
            if h % 2 != 0 or w % 2 != 0:
                raise DimensionError(f"instr {i}: REDUCE_MAX on odd dims {h}x{w}")
            out = np.ascontiguousarray(
                a.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))
            )
        elif op == "UPSAMPLE_NEAREST":
            a = values[ins.args[0]]
            out = np.repeat(np.repeat(a, 2, axis=1), 2, axis=2)
        elif op == "INPUT":
            out = inputs[ins.input_name].data
        else:  # CONST
            if base_hw is None:
                raise DimensionError("CONST needs an input to define dimensions")
            out = np.full((1, *base_hw), ins.scalar, np.float32)
        values[ins.dest] = out
        for a in ins.args:
            if last_use_get(a) == i and a != prog.output:
                values.pop(a, None)

    result = values[prog.output]
    names = tuple(f"b{c}" for c in range(result.shape[0]))
    return GridImage(names, np.ascontiguousarray(result), info[prog.output].scale)


def _binary(kind: str, a, b, i: int):
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "div":
        if isinstance(b, np.ndarray) and np.any(b == 0):
            raise NumericDomainError(f"instr {i}: division by zero plane")
        return a / b
    if kind == "min":
        return np.minimum(a, b)
    return np.maximum(a, b)


# ======================================================================
# STATS
# ======================================================================


def program_stats(prog: Program) -> ProgramStats:
    """Op histogram plus the whole-image work measure: one "kernel
    application" is one 2-D kernel applied to one band."""
    info = validate(prog)
    counts: dict[str, int] = {}
    conv_instrs = 0
    applications = 0
    for ins in prog.instrs:
        counts[ins.op] = counts.get(ins.op, 0) + 1
        if ins.op == "CONV2D":
            conv_instrs += 1
            applications += info[ins.args[0]].bands
    return ProgramStats(counts, len(prog.instrs), conv_instrs, applications)


# ======================================================================
# TEXT FORM
# ======================================================================


def serialize_program(prog: Program) -> str:
    validate(prog)
    lines = ["program v1"]
    for name, bands in prog.inputs.items():
        lines.append(f"input {name} bands={bands}")
    for ins in prog.instrs:
        lines.append(_render_instr(ins))
    lines.append(f"output v{prog.output}")
    return "\n".join(lines) + "\n"


def _render_instr(ins: Instr) -> str:
    args = ", ".join(f"v{a}" for a in ins.args)
    attrs: list[str] = []
    if ins.op == "INPUT":
        args = ins.input_name
    if ins.op == "SELECT":
        attrs.append("bands=[" + ",".join(str(b) for b in ins.bands) + "]")
    if ins.op == "CONV2D":
        attrs.append(f"k={ins.kernel.shape[0]}")
        flat = ",".join(render_f32(v) for v in ins.kernel.ravel())
        attrs.append(f"w=[{flat}]")
    if ins.kind is not None:
        attrs.append(f"kind={ins.kind}")
    if ins.scalar is not None:
        attrs.append(f"s={render_f32(ins.scalar)}")
    if ins.factor is not None:
        attrs.append(f"factor={ins.factor}")
    body = args
    if attrs:
        body = f"{args}; " + ", ".join(attrs)
    return f"v{ins.dest} = {ins.op}({body})"


def _split_top(text: str) -> list[str]:
    """Split on top-level commas (not inside brackets)."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        parts.append(tail)
    return parts


def parse_program(text: str) -> Program:
    """Parse the text form back; serialize(parse(s)) == s for valid s."""
    prog = Program()
    saw_output = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line.startswith("program "):
                if line != "program v1":
                    raise ValueError(f"unsupported version {line!r}")
            elif line.startswith("input "):
                _, name, bandspec = line.split()
                if not bandspec.startswith("bands="):
                    raise ValueError("malformed input declaration")
                prog.inputs[name] = int(bandspec[6:])
            elif line.startswith("output "):
                prog.output = int(line.split()[1].lstrip("v"))
                saw_output = True
            else:
                prog.instrs.append(_parse_instr(line))
        except (ValueError, IndexError, KeyError) as e:
            raise ValidationError(f"line {lineno}: {e}") from e
    if not saw_output:
        raise ValidationError("program has no output line")
    validate(prog)
    return prog


def _parse_instr(line: str) -> Instr:
    head, _, rest = line.partition(" = ")
    dest = int(head.strip().lstrip("v"))
    op, _, body = rest.partition("(")
    op = op.strip()
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}")
    if not body.endswith(")"):
        raise ValueError("missing closing paren")
    body = body[:-1]
    argpart, _, attrpart = body.partition(";")
    kw: dict[str, str] = {}
    for item in _split_top(attrpart):
        k, _, v = item.partition("=")
        kw[k.strip()] = v.strip()

    args: tuple[int, ...] = ()
    input_name = None
    if op == "INPUT":
        input_name = argpart.strip()
    else:
        toks = _split_top(argpart)
        args = tuple(int(t.lstrip("v")) for t in toks if t)

    kind = kw.get("kind")
    scalar = parse_f32(kw["s"]) if "s" in kw else None
    factor = int(kw["factor"]) if "factor" in kw else None
    bands = None
    if "bands" in kw:
        inner = kw["bands"].strip("[]")
        bands = tuple(int(t) for t in inner.split(",") if t != "")
    kernel = None
    if op == "CONV2D":
        k = int(kw["k"])
        vals = [parse_f32(t) for t in kw["w"].strip("[]").split(",")]
        if len(vals) != k * k:
            raise ValueError(f"kernel literal has {len(vals)} values, expected {k*k}")
        kernel = np.array(vals, np.float32).reshape(k, k)
    return Instr(dest, op, args, kind, scalar, kernel, bands, input_name, factor)
