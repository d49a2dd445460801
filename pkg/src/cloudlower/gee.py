"""Client-script emitter for the Earth Engine code editor.

Turns a lowered network into a self-contained ECMAScript-dialect script plus
upload-ready parameter tables. The script packages repeated structure into
named helper functions (one conv+BN+PReLU composite, a max-pool helper, an
up-sample helper, a kernel builder fed by parameter rows, and one main
assembly), mirroring how the op sequence was verified: before rendering,
emit() walks the lowered instruction stream node by node and checks, bit for
bit, that it matches the exact pattern each helper encodes. Any drift between
the lowering and this emitter fails loudly instead of shipping a wrong script.

Parameter placement: tensors with fewer scalars than inline_threshold become
inline literal arrays; the rest become per-tensor CSV tables (the params-io
row schema) referenced through asset ids. Batch norm is shipped in inference
form (mean, divisor, gamma, beta) where divisor = float32(sqrt(var + eps)),
exactly the scalars the lowered program divides by.

Everything here is a pure function of (model, params, options): emission is
byte-deterministic, and no output embeds a timestamp or environment detail.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LoweringError
from .graph import ModelConfig, ParamSet, build_graph
from .isa import Program, program_stats
from .lowering import LoweredNetwork, lower_network
from .numformat import render_f32
from .params_io import TABLE_HEADER
from .tensor import bn_divisors

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class EmitOptions:
    name: str = "cloud_model"  # used in the header and exports
    band_names: tuple[str, ...] | None = None  # None: b1..bN
    inline_threshold: float = 512  # tensors with fewer scalars are inlined
    asset_prefix: str = ""  # asset path stem, required once any tensor is large

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ConfigError(f"model name {self.name!r} is not an identifier")
        if self.inline_threshold < 0:
            raise ConfigError("inline_threshold must be >= 0")
        if self.band_names is not None:
            if len(set(self.band_names)) != len(self.band_names):
                raise ConfigError("band names must be unique")
            for b in self.band_names:
                if not _NAME_RE.match(b):
                    raise ConfigError(f"band name {b!r} is not an identifier")


@dataclass(frozen=True)
class EmittedBundle:
    script: str
    tables: dict[str, str]  # tensor name -> CSV text (params-io row schema)
    report: dict


# ======================================================================
# LOWERED-PROGRAM VERIFICATION
# ======================================================================
# The checkers below re-derive, independently of lowering.py, the exact
# instruction pattern each script helper encodes, and confirm the lowered
# program is that pattern with the same scalars and kernel taps.


def _bits(x) -> bytes:
    return np.float32(x).tobytes()


@dataclass
class _SpanChecker:
    program: Program
    node: str
    pos: int
    end: int

    def take(self, op: str):
        if self.pos >= self.end:
            raise LoweringError(f"node {self.node}: span ended early, expected {op}")
        ins = self.program.instrs[self.pos]
        if ins.op != op:
            raise LoweringError(
                f"node {self.node}: instr {self.pos} is {ins.op}, expected {op}"
            )
        self.pos += 1
        return ins

    def expect(self, cond: bool, ins, what: str) -> None:
        if not cond:
            raise LoweringError(f"node {self.node}: instr {ins.dest} fails {what} check")

    def done(self) -> None:
        if self.pos != self.end:
            raise LoweringError(
                f"node {self.node}: {self.end - self.pos} unexpected trailing instrs"
            )


def _verify_conv(chk: _SpanChecker, src: int, weight: np.ndarray, bias) -> int:
    n_out, n_in = weight.shape[0], weight.shape[1]
    outs = []
    for o in range(n_out):
        acc = -1
        for i in range(n_in):
            sel = chk.take("SELECT")
            chk.expect(sel.args == (src,) and sel.bands == (i,), sel, "conv select")
            conv = chk.take("CONV2D")
            chk.expect(conv.args == (sel.dest,), conv, "conv source")
            taps = np.ascontiguousarray(weight[o, i])
            chk.expect(conv.kernel.tobytes() == taps.tobytes(), conv, "kernel taps")
            if i == 0:
                acc = conv.dest
            else:
                add = chk.take("BINARY")
                chk.expect(
                    add.kind == "add" and add.args == (acc, conv.dest), add, "add chain"
                )
                acc = add.dest
        if bias is not None:
            sb = chk.take("SCALAR_BINARY")
            chk.expect(
                sb.kind == "add" and sb.args == (acc,) and _bits(sb.scalar) == _bits(bias[o]),
                sb,
                "bias",
            )
            acc = sb.dest
        outs.append(acc)
    if len(outs) == 1:
        return outs[0]
    cat = chk.take("CAT")
    chk.expect(cat.args == tuple(outs), cat, "channel cat")
    return cat.dest


def _verify_scalar(chk: _SpanChecker, kind: str, src: int, value) -> int:
    sb = chk.take("SCALAR_BINARY")
    chk.expect(
        sb.kind == kind and sb.args == (src,) and _bits(sb.scalar) == _bits(value),
        sb,
        f"scalar {kind}",
    )
    return sb.dest


def _verify_bn(chk: _SpanChecker, src: int, bn) -> int:
    div = bn_divisors(bn)
    outs = []
    for c in range(bn.channels):
        sel = chk.take("SELECT")
        chk.expect(sel.args == (src,) and sel.bands == (c,), sel, "bn select")
        v = _verify_scalar(chk, "sub", sel.dest, bn.running_mean[c])
        v = _verify_scalar(chk, "div", v, div[c])
        v = _verify_scalar(chk, "mul", v, bn.gamma[c])
        v = _verify_scalar(chk, "add", v, bn.beta[c])
        outs.append(v)
    if len(outs) == 1:
        return outs[0]
    cat = chk.take("CAT")
    chk.expect(cat.args == tuple(outs), cat, "bn cat")
    return cat.dest


def _verify_prelu(chk: _SpanChecker, src: int, slope: np.ndarray) -> int:
    outs = []
    for c in range(slope.shape[0]):
        sel = chk.take("SELECT")
        chk.expect(sel.args == (src,) and sel.bands == (c,), sel, "prelu select")
        pos = chk.take("UNARY")
        chk.expect(pos.kind == "maxzero" and pos.args == (sel.dest,), pos, "maxzero")
        neg = chk.take("UNARY")
        chk.expect(neg.kind == "minzero" and neg.args == (sel.dest,), neg, "minzero")
        scaled = _verify_scalar(chk, "mul", neg.dest, slope[c])
        add = chk.take("BINARY")
        chk.expect(
            add.kind == "add" and add.args == (pos.dest, scaled), add, "prelu add"
        )
        outs.append(add.dest)
    if len(outs) == 1:
        return outs[0]
    cat = chk.take("CAT")
    chk.expect(cat.args == tuple(outs), cat, "prelu cat")
    return cat.dest


def _verify_sigmoid(chk: _SpanChecker, src: int) -> int:
    neg = chk.take("UNARY")
    chk.expect(neg.kind == "neg" and neg.args == (src,), neg, "neg")
    ex = chk.take("UNARY")
    chk.expect(ex.kind == "exp" and ex.args == (neg.dest,), ex, "exp")
    one = _verify_scalar(chk, "add", ex.dest, np.float32(1.0))
    rec = chk.take("UNARY")
    chk.expect(rec.kind == "recip" and rec.args == (one,), rec, "recip")
    return rec.dest


def verify_lowered(lowered: LoweredNetwork, cfg: ModelConfig, params: ParamSet) -> None:
    """Confirm the lowered program is exactly the pattern the script encodes.

    Walks every node span, checking op order, dataflow, kernel taps and
    scalars bit for bit. Raises LoweringError on the first mismatch.
    """
    values = lowered.node_values
    for node in lowered.graph.nodes:
        start, end = lowered.node_spans[node.name]
        chk = _SpanChecker(lowered.program, node.name, start, end)
        if node.kind == "input":
            ins = chk.take("INPUT")
            chk.expect(ins.input_name == "x", ins, "input name")
            got = ins.dest
        elif node.kind == "tcbp":
            got = values[node.args[0]]
            for unit in ("1", "2"):
                got = _verify_conv(
                    chk, got, params[f"{node.name}.conv{unit}.weight"], None
                )
                got = _verify_bn(chk, got, params.bn(f"{node.name}.bn{unit}", cfg.bn_epsilon))
                got = _verify_prelu(chk, got, params[f"{node.name}.prelu{unit}.slope"])
        elif node.kind == "maxpool":
            ins = chk.take("REDUCE_MAX")
            chk.expect(
                ins.factor == 2 and ins.args == (values[node.args[0]],), ins, "pool"
            )
            got = ins.dest
        elif node.kind == "upsample":
            ins = chk.take("UPSAMPLE_NEAREST")
            chk.expect(
                ins.factor == 2 and ins.args == (values[node.args[0]],), ins, "upsample"
            )
            got = ins.dest
        elif node.kind == "concat":
            ins = chk.take("CAT")
            chk.expect(
                ins.args == (values[node.args[0]], values[node.args[1]]),
                ins,
                "concat order",
            )
            got = ins.dest
        else:  # head
            got = _verify_conv(
                chk, values[node.args[0]], params["head.weight"], params["head.bias"]
            )
            got = _verify_sigmoid(chk, got)
        chk.expect(got == values[node.name], lowered.program.instrs[end - 1], "node value")
        chk.done()


# ======================================================================
# SCRIPT RENDERING
# ======================================================================


def _script_tensors(cfg: ModelConfig, params: ParamSet) -> list[tuple[str, np.ndarray]]:
    """The tensors the script consumes, in usage order, inference form."""
    out: list[tuple[str, np.ndarray]] = []
    for node in build_graph(cfg).nodes:
        if node.kind == "tcbp":
            for u in ("1", "2"):
                out.append(
                    (f"{node.name}.conv{u}.weight", params[f"{node.name}.conv{u}.weight"].ravel())
                )
                bn = params.bn(f"{node.name}.bn{u}", cfg.bn_epsilon)
                out.append((f"{node.name}.bn{u}.mean", bn.running_mean))
                out.append((f"{node.name}.bn{u}.divisor", bn_divisors(bn)))
                out.append((f"{node.name}.bn{u}.gamma", bn.gamma))
                out.append((f"{node.name}.bn{u}.beta", bn.beta))
                out.append(
                    (f"{node.name}.prelu{u}.slope", params[f"{node.name}.prelu{u}.slope"])
                )
        elif node.kind == "head":
            out.append(("head.weight", params["head.weight"].ravel()))
            out.append(("head.bias", params["head.bias"].ravel()))
    return out


def _tensor_table(name: str, values: np.ndarray) -> str:
    lines = [TABLE_HEADER]
    for idx in range(values.shape[0]):
        lines.append(f"{name},{idx},{render_f32(values[idx])}")
    return "\n".join(lines) + "\n"


def _inline_entry(name: str, values: np.ndarray) -> str:
    rendered = [render_f32(v) for v in values]
    rows = []
    for i in range(0, len(rendered), 4):
        rows.append("    " + ", ".join(rendered[i : i + 4]))
    return f"  '{name}': [\n" + ",\n".join(rows) + "\n  ]"


_HELPERS = """\
function tensorRows(name) {
  // Rows of one uploaded parameter table (CSV: tensor_name,flat_index,value).
  return ee.FeatureCollection(ASSETS[name]).sort('flat_index');
}

function tensorValues(name) {
  // One tensor as a flat ee.List in flat-index order.
  if (name in ASSETS) {
    return tensorRows(name).aggregate_array('value');
  }
  return ee.List(PARAMS[name]);
}

function bandNames(n) {
  // Stable band names c0..c(n-1) so concatenated stages stay addressable.
  return ee.List.sequence(0, n - 1).map(function (i) {
    return ee.String('c').cat(ee.Number(i).format('%d'));
  });
}

function kernel3(values, base) {
  // 3x3 kernel from nine consecutive scalars, row major from flat index base.
  var rows = ee.List([
    values.slice(base, base + 3),
    values.slice(base + 3, base + 6),
    values.slice(base + 6, base + 9)
  ]);
  return ee.Kernel.fixed(3, 3, rows);
}

function convLayer(img, weightName, biasName, nOut, nIn) {
  // Unrolled same-padding convolution: out-channel major, in-channel minor,
  // one single-band convolve per (out, in) pair, an add chain in ascending
  // in-channel order, bias last. This is the verified lowered op order.
  var w = tensorValues(weightName);
  var bias = biasName === null ? null : tensorValues(biasName);
  var outs = [];
  for (var o = 0; o < nOut; o++) {
    var acc = null;
    for (var i = 0; i < nIn; i++) {
      var tap = img.select([i]).convolve(kernel3(w, 9 * (o * nIn + i)));
      acc = acc === null ? tap : acc.add(tap);
    }
    if (bias !== null) {
      acc = acc.add(ee.Number(bias.get(o)));
    }
    outs.push(acc);
  }
  return ee.Image.cat(outs).rename(bandNames(nOut));
}

function bnLayer(img, prefix, n) {
  // Inference batch norm, band by band: (x - mean) / divisor * gamma + beta.
  // divisor = sqrt(running_var + epsilon) is precomputed into the tables.
  var mean = tensorValues(prefix + '.mean');
  var divisor = tensorValues(prefix + '.divisor');
  var gamma = tensorValues(prefix + '.gamma');
  var beta = tensorValues(prefix + '.beta');
  var outs = [];
  for (var c = 0; c < n; c++) {
    outs.push(img.select([c])
      .subtract(ee.Number(mean.get(c)))
      .divide(ee.Number(divisor.get(c)))
      .multiply(ee.Number(gamma.get(c)))
      .add(ee.Number(beta.get(c))));
  }
  return ee.Image.cat(outs).rename(bandNames(n));
}

function preluLayer(img, slopeName, n) {
  // max(x, 0) + slope * min(x, 0), band by band.
  var slope = tensorValues(slopeName);
  var outs = [];
  for (var c = 0; c < n; c++) {
    var band = img.select([c]);
    outs.push(band.max(0).add(band.min(0).multiply(ee.Number(slope.get(c)))));
  }
  return ee.Image.cat(outs).rename(bandNames(n));
}

function convBnPrelu(img, weightName, bnPrefix, slopeName, nOut, nIn) {
  // The fused building block: convolution + batch norm + PReLU.
  var v = convLayer(img, weightName, null, nOut, nIn);
  v = bnLayer(v, bnPrefix, nOut);
  return preluLayer(v, slopeName, nOut);
}

function tcbp(img, name, nOut, nIn) {
  // Two chained conv+BN+PReLU units sharing one name prefix.
  var v = convBnPrelu(img, name + '.conv1.weight', name + '.bn1',
                      name + '.prelu1.slope', nOut, nIn);
  return convBnPrelu(v, name + '.conv2.weight', name + '.bn2',
                     name + '.prelu2.slope', nOut, nOut);
}

function pool2(img) {
  // 2x2 max pooling: aggregate onto a grid twice as coarse with max.
  var proj = img.projection();
  return img
    .reduceResolution({reducer: ee.Reducer.max(), maxPixels: 4})
    .reproject({crs: proj, scale: proj.nominalScale().multiply(2)});
}

function up2(img) {
  // Nearest-neighbour x2 upsampling: resample onto a grid twice as fine
  // (nearest is the platform default when no resampling mode is set).
  var proj = img.projection();
  return img.reproject({crs: proj, scale: proj.nominalScale().divide(2)});
}

function sigmoidLayer(img) {
  // 1 / (1 + exp(-x)) from primitive ops, matching the lowered gadget.
  return ee.Image.constant(1).divide(img.multiply(-1).exp().add(1.000000000e+00));
}
"""


def _render_script(
    cfg: ModelConfig,
    opts: EmitOptions,
    band_names: tuple[str, ...],
    inline: list[tuple[str, np.ndarray]],
    assets: dict[str, str],
) -> str:
    w = cfg.width
    out: list[str] = []
    out.append(f"// {opts.name}: cloud probability network for the Earth Engine code editor.")
    out.append("// Generated file, do not edit by hand; regeneration is byte-deterministic.")
    out.append("//")
    out.append(f"// Input: an ee.Image with the {cfg.in_bands} bands listed in INPUT_BANDS,")
    out.append("// values scaled to [0, 1]. Output: one band 'cloud_prob' in [0, 1].")
    out.append("// All numeric literals are float32-exact (9-digit scientific rendering)")
    out.append("// and the operation order follows the verified lowered instruction stream.")
    out.append("//")
    out.append("// Usage from another script:")
    out.append(f"//   var m = require('users/you/repo:{opts.name}');")
    out.append("//   var prob = m.cloudProbability(m.prepareInput(yourImage));")
    out.append("")
    quoted = ", ".join(f"'{b}'" for b in band_names)
    out.append(f"var INPUT_BANDS = [{quoted}];")
    out.append("")
    out.append("// Inline parameter tensors (flat, row-major).")
    if inline:
        entries = ",\n".join(_inline_entry(name, vals) for name, vals in inline)
        out.append("var PARAMS = {\n" + entries + "\n};")
    else:
        out.append("var PARAMS = {};")
    out.append("")
    out.append("// Larger tensors are read from uploaded CSV table assets")
    out.append("// (columns: tensor_name,flat_index,value). Upload each emitted")
    out.append("// <tensor>.csv under the asset id given here.")
    if assets:
        entries = ",\n".join(f"  '{t}': '{a}'" for t, a in assets.items())
        out.append("var ASSETS = {\n" + entries + "\n};")
    else:
        out.append("var ASSETS = {};")
    out.append("")
    out.append(_HELPERS)
    out.append("function prepareInput(img) {")
    out.append("  // Band selection fixes the channel order the kernels were trained on.")
    out.append("  return img.select(INPUT_BANDS).toFloat();")
    out.append("}")
    out.append("")
    out.append("function buildModel(input) {")
    out.append("  // Main assembly, encoder then decoder, skip links by name.")
    prev = "input"
    for lvl in range(1, cfg.depth + 1):
        cin = cfg.in_bands if lvl == 1 else w
        out.append(f"  var d{lvl} = tcbp({prev}, 'down{lvl}', {w}, {cin});")
        out.append(f"  var p{lvl} = pool2(d{lvl});")
        prev = f"p{lvl}"
    for lvl in range(cfg.depth, 0, -1):
        out.append(f"  var t{lvl} = up2({prev});")
        out.append(
            f"  var c{lvl} = ee.Image.cat([t{lvl}, d{lvl}]).rename(bandNames({2 * w}));"
        )
        out.append(f"  var u{lvl} = tcbp(c{lvl}, 'up{lvl}', {w}, {2 * w});")
        prev = f"u{lvl}"
    out.append(f"  var logits = convLayer({prev}, 'head.weight', 'head.bias', 1, {w});")
    out.append("  return sigmoidLayer(logits).rename(['cloud_prob']);")
    out.append("}")
    out.append("")
    out.append(f"exports.modelName = '{opts.name}';")
    out.append("exports.inputBands = INPUT_BANDS;")
    out.append("exports.prepareInput = prepareInput;")
    out.append("exports.cloudProbability = buildModel;")
    out.append("")
    return "\n".join(out)


# ======================================================================
# LINT
# ======================================================================

_ALLOWED_METHODS = frozenset(
    {
        # image ops (the closed op surface)
        "select", "convolve", "add", "subtract", "multiply", "divide",
        "max", "min", "exp", "rename", "toFloat",
        # constructors and statics
        "Image", "List", "Number", "String", "FeatureCollection",
        "cat", "constant", "fixed", "sequence",
        # grids
        "projection", "nominalScale", "reduceResolution", "reproject",
        # collections and lists
        "sort", "aggregate_array", "slice", "get", "map", "format",
        # client-side array building
        "push",
    }
)
_ALLOWED_EE_ROOTS = frozenset(
    {"Image", "Kernel", "List", "Number", "String", "Reducer", "FeatureCollection"}
)
_KEYWORD_CALLS = frozenset({"function", "if", "for", "while", "switch", "return"})

_ASSET_BLOCK_RE = re.compile(r"var ASSETS = \{(.*?)\};", re.S)
_ASSET_ENTRY_RE = re.compile(r"'([^']*)':\s*'([^']*)'")


def _strip_code(script: str) -> str:
    """Remove comments and string literal contents, preserving newlines."""
    out = []
    i, n = 0, len(script)
    state = "code"
    while i < n:
        ch = script[i]
        nxt = script[i + 1] if i + 1 < n else ""
        if state == "code":
            if ch == "/" and nxt == "/":
                state = "line"
                i += 2
                continue
            if ch == "/" and nxt == "*":
                state = "block"
                i += 2
                continue
            if ch == "'":
                state = "str"
                out.append("''")
                i += 1
                continue
            out.append(ch)
        elif state == "line":
            if ch == "\n":
                state = "code"
                out.append(ch)
        elif state == "block":
            if ch == "*" and nxt == "/":
                state = "code"
                i += 2
                continue
            if ch == "\n":
                out.append(ch)
        elif state == "str":
            if ch == "'":
                state = "code"
            elif ch == "\n":
                out.append(ch)  # unterminated string; keep line count honest
        i += 1
    return "".join(out)


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def lint_script(script: str, expected_assets: set[str] | None = None) -> list[str]:
    """Structural lint; returns findings (empty means clean).

    Checks: balanced delimiters; every declared function referenced at least
    once beyond its declaration; method calls and ee.* namespaces restricted
    to the closed construct whitelist; and, when expected_assets is given,
    the asset ids in the ASSETS block equal that set exactly.
    """
    findings: list[str] = []
    code = _strip_code(script)

    pairs = {")": "(", "]": "[", "}": "{"}
    stack: list[tuple[str, int]] = []
    for pos, ch in enumerate(code):
        if ch in "([{":
            stack.append((ch, _line_of(code, pos)))
        elif ch in ")]}":
            if not stack or stack[-1][0] != pairs[ch]:
                findings.append(f"line {_line_of(code, pos)}: unbalanced '{ch}'")
                stack.clear()
                break
            stack.pop()
    for ch, line in stack:
        findings.append(f"line {line}: unclosed '{ch}'")

    declared = re.findall(r"\bfunction\s+(\w+)\s*\(", code)
    for name in declared:
        uses = len(re.findall(rf"\b{name}\b", code))
        decls = len(re.findall(rf"\bfunction\s+{name}\b", code))
        if uses - decls <= 0:
            findings.append(f"helper {name} is declared but never referenced")

    for m in re.finditer(r"\.\s*(\w+)\s*\(", code):
        name = m.group(1)
        if name not in _ALLOWED_METHODS:
            findings.append(
                f"line {_line_of(code, m.start())}: method '{name}' outside the whitelist"
            )
    for m in re.finditer(r"\bee\.(\w+)", code):
        name = m.group(1)
        if name not in _ALLOWED_EE_ROOTS:
            findings.append(
                f"line {_line_of(code, m.start())}: namespace 'ee.{name}' outside the whitelist"
            )
    for m in re.finditer(r"(?<![.\w])(\w+)\s*\(", code):
        name = m.group(1)
        if name not in _KEYWORD_CALLS and name not in declared:
            findings.append(
                f"line {_line_of(code, m.start())}: call of undeclared '{name}'"
            )

    if expected_assets is not None:
        block = _ASSET_BLOCK_RE.search(script)
        if block is None:
            findings.append("no ASSETS block found")
        else:
            found = {aid for _, aid in _ASSET_ENTRY_RE.findall(block.group(1))}
            for missing in sorted(expected_assets - found):
                findings.append(f"asset id {missing!r} is expected but never referenced")
            for extra in sorted(found - expected_assets):
                findings.append(f"asset id {extra!r} referenced but not emitted")
    return findings


# ======================================================================
# EMISSION
# ======================================================================


def emit(cfg: ModelConfig, params: ParamSet, opts: EmitOptions) -> EmittedBundle:
    """Lower, verify, and render the full deployment bundle."""
    lowered = lower_network(cfg, params)
    verify_lowered(lowered, cfg, params)
    stats = program_stats(lowered.program)

    if opts.band_names is None:
        band_names = tuple(f"b{i + 1}" for i in range(cfg.in_bands))
    else:
        band_names = tuple(opts.band_names)
    if len(band_names) != cfg.in_bands:
        raise ConfigError(
            f"{len(band_names)} band names given for a {cfg.in_bands}-band model"
        )

    tensors = _script_tensors(cfg, params)
    inline: list[tuple[str, np.ndarray]] = []
    asset_ids: dict[str, str] = {}
    tables: dict[str, str] = {}
    for name, vals in tensors:
        if vals.shape[0] < opts.inline_threshold:
            inline.append((name, vals))
        else:
            asset_ids[name] = f"{opts.asset_prefix}/{name.replace('.', '_')}"
            tables[name] = _tensor_table(name, vals)
    if asset_ids and not opts.asset_prefix:
        raise ConfigError(
            "asset_prefix is required: "
            + ", ".join(sorted(asset_ids))
            + " exceed the inline threshold"
        )

    script = _render_script(cfg, opts, band_names, inline, asset_ids)
    findings = lint_script(script, set(asset_ids.values()))
    if findings:  # pragma: no cover - guards emitter regressions
        raise LoweringError("generated script failed its own lint: " + "; ".join(findings))

    placement = []
    for name, vals in tensors:
        entry: dict = {"name": name, "rows": int(vals.shape[0])}
        if name in asset_ids:
            entry["placement"] = "asset"
            entry["asset_id"] = asset_ids[name]
            entry["table_sha256"] = hashlib.sha256(tables[name].encode()).hexdigest()
        else:
            entry["placement"] = "inline"
        placement.append(entry)
    threshold = opts.inline_threshold
    report = {
        "model_name": opts.name,
        "model": {
            "in_bands": cfg.in_bands,
            "depth": cfg.depth,
            "width": cfg.width,
            "kernel": cfg.kernel,
            "pool": cfg.pool,
            "bn_epsilon": cfg.bn_epsilon,
        },
        "band_names": list(band_names),
        "inline_threshold": "inf" if math.isinf(threshold) else int(threshold),
        "helpers": re.findall(r"^function (\w+)\(", script, re.M),
        "program": {
            "total_instructions": stats.total,
            "op_counts": {k: stats.op_counts[k] for k in sorted(stats.op_counts)},
            "conv_instructions": stats.conv_instructions,
            "kernel_applications": stats.kernel_applications,
        },
        "tensors": placement,
        "script_sha256": hashlib.sha256(script.encode()).hexdigest(),
        "lint": "clean",
    }
    return EmittedBundle(script, tables, report)
