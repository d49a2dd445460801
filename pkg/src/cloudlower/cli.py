"""Command-line entry point.

One executable, nine subcommands covering the pipeline end to end:

    synth-data     write a deterministic synthetic labeled dataset
    train          train from scratch on synthetic or on-disk patches
    infer          run tiled inference with either engine
    lower          compile a model to the restricted instruction set
    verify         reference-vs-lowered equivalence trials
    emit-gee       generate the client script and parameter tables
    metrics        score a predicted mask against a reference mask
    export-params  re-render a model's parameter files
    import-params  validate parameter files and write a model

Exit codes: 0 success, 1 verification or tolerance failure, 2 bad user
input (including malformed file content), 3 file I/O failure. Every source
of randomness hangs off an explicit --seed; nothing reads the clock.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import graph as G
from . import isa, lowering, metrics, params_io, raster, trainer
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    LoweringError,
    NumericDomainError,
    ToleranceError,
    ValidationError,
)
from .gee import EmitOptions, emit, lint_script
from .tensor import Tensor


# ======================================================================
# SUBCOMMANDS
# ======================================================================


def _cmd_synth_data(args) -> int:
    dataset = trainer.synth_dataset(args.count, args.patch, args.seed, args.bands)
    os.makedirs(args.out, exist_ok=True)
    names = tuple(f"b{i + 1}" for i in range(args.bands))
    for i, patch in enumerate(dataset):
        rst_path, mask_path = raster.synth_raster_name(args.out, i)
        raster.write_raster(rst_path, raster.Raster(names, patch.bands))
        raster.write_mask(mask_path, patch.mask)
    print(f"wrote {len(dataset)} patches ({args.patch}x{args.patch}, {args.bands} bands) to {args.out}")
    return 0


def _load_data_dir(directory: str) -> list[trainer.LabeledPatch]:
    stems = sorted(
        f[: -len(".rst.json")]
        for f in os.listdir(directory)
        if f.endswith(".rst.json")
    )
    if not stems:
        raise ConfigError(f"no .rst.json rasters found in {directory}")
    patches = []
    for stem in stems:
        scene = raster.read_raster(os.path.join(directory, stem))
        mask = raster.read_mask(os.path.join(directory, f"{stem}.mask.pgm"))
        patches.append(trainer.LabeledPatch(scene.data, mask))
    return patches


def _cmd_train(args) -> int:
    if args.synthetic is not None:
        dataset = trainer.synth_dataset(args.synthetic, args.patch, args.seed, args.bands)
    else:
        dataset = _load_data_dir(args.data)
    in_bands = dataset[0].bands.shape[0]
    cfg = G.ModelConfig(in_bands=in_bands, depth=args.depth)
    tc = trainer.TrainConfig(
        epochs=args.epochs,
        batch=args.batch,
        lr=args.lr,
        seed=args.seed,
        stop_oa=args.stop_oa,
    )
    params, log = trainer.train(cfg, tc, dataset)
    for entry in log:
        print(f"epoch {entry['epoch']} loss {entry['loss']:.6f} oa {entry['oa']:.4f}")
    manifest_path, table_path = params_io.write_model(args.out, cfg, params)
    last = log[-1]
    print(f"final oa {last['oa']:.4f} after {last['epoch']} epochs")
    print(f"wrote {manifest_path}")
    print(f"wrote {table_path}")
    if args.log:
        with open(args.log, "w", encoding="utf-8", newline="") as f:
            f.write(json.dumps(log, indent=2) + "\n")
        print(f"wrote {args.log}")
    return 0


def _cmd_infer(args) -> int:
    if not args.prob_out and not args.mask_out:
        raise ConfigError("nothing to do: pass --prob-out and/or --mask-out")
    cfg, params = params_io.read_model(args.model)
    scene = raster.read_raster(args.input)
    prob = raster.tiled_infer(
        scene, cfg, params, engine=args.engine, tile=args.tile, halo=args.halo
    )
    if args.prob_out:
        raster.write_raster(args.prob_out, raster.Raster(("cloud_prob",), prob[None]))
        print(f"wrote {args.prob_out}")
    if args.mask_out:
        mask = metrics.threshold_mask(prob, args.threshold)
        raster.write_mask(args.mask_out, mask)
        print(f"wrote {args.mask_out}")
    return 0


def _cmd_lower(args) -> int:
    cfg, params = params_io.read_model(args.model)
    lowered = lowering.lower_network(cfg, params)
    text = isa.serialize_program(lowered.program)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    stats = isa.program_stats(lowered.program)
    print(f"wrote {args.out}")
    print(f"instructions {stats.total}")
    for op in sorted(stats.op_counts):
        print(f"  {op} {stats.op_counts[op]}")
    print(f"conv instructions {stats.conv_instructions}")
    print(f"kernel applications {stats.kernel_applications}")
    return 0


def _cmd_verify(args) -> int:
    if args.trials < 1:
        raise ConfigError(f"trials must be >= 1, got {args.trials}")
    try:
        depths = tuple(int(d) for d in args.depths.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --depths {args.depths!r}") from e
    fixed = params_io.read_model(args.model) if args.model else None
    max_dev = 0.0
    failures: list[int] = []
    for t in range(args.trials):
        rng = np.random.default_rng([args.seed, 4, t])
        if fixed is not None:
            cfg, params = fixed
        else:
            cfg = G.ModelConfig(in_bands=10, depth=depths[t % len(depths)])
            params = G.random_params(cfg, rng)
        step = 2**cfg.depth
        lo = -(-16 // step)  # smallest multiple of step that is >= 16
        hi = max(lo, 64 // step)
        h = step * int(rng.integers(lo, hi + 1))
        w = step * int(rng.integers(lo, hi + 1))
        x = rng.uniform(0.0, 1.0, (cfg.in_bands, h, w)).astype(np.float32)
        ref = G.forward(cfg, params, Tensor(x)).data
        program = lowering.lower_network(cfg, params).program
        grid = isa.GridImage(tuple(f"b{i + 1}" for i in range(cfg.in_bands)), x)
        low = isa.interpret(program, {"x": grid}).data
        dev = float(np.max(np.abs(ref.astype(np.float64) - low.astype(np.float64))))
        max_dev = max(max_dev, dev)
        status = "ok" if dev <= args.tolerance else "FAIL"
        print(f"trial {t}: depth {cfg.depth} size {h}x{w} max_dev {dev:.3e} {status}")
        if dev > args.tolerance:
            failures.append(t)
    print(
        f"max deviation {max_dev:.3e} over {args.trials} trials"
        f" (tolerance {args.tolerance:.1e})"
    )
    if failures:
        raise ToleranceError(
            f"{len(failures)} of {args.trials} trials exceeded {args.tolerance}:"
            f" trials {failures} at seed {args.seed}"
        )
    return 0


def _parse_inline_threshold(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError as e:
        raise ConfigError(f"bad --inline-threshold {text!r}") from e


def _cmd_emit_gee(args) -> int:
    cfg, params = params_io.read_model(args.model)
    band_names = tuple(args.band_names.split(",")) if args.band_names else None
    opts = EmitOptions(
        name=args.name,
        band_names=band_names,
        inline_threshold=_parse_inline_threshold(args.inline_threshold),
        asset_prefix=args.asset_prefix,
    )
    bundle = emit(cfg, params, opts)
    script_path = f"{args.out}.gee.js"
    with open(script_path, "w", encoding="utf-8", newline="") as f:
        f.write(bundle.script)
    print(f"wrote {script_path}")
    for tensor_name, table in bundle.tables.items():
        table_path = f"{args.out}.{tensor_name}.csv"
        with open(table_path, "w", encoding="utf-8", newline="") as f:
            f.write(table)
        print(f"wrote {table_path}")
    report_path = f"{args.out}.report.json"
    with open(report_path, "w", encoding="utf-8", newline="") as f:
        f.write(json.dumps(bundle.report, indent=2) + "\n")
    print(f"wrote {report_path}")
    expected = {
        entry["asset_id"] for entry in bundle.report["tensors"] if "asset_id" in entry
    }
    findings = lint_script(bundle.script, expected)
    if findings:
        for finding in findings:
            print(f"lint: {finding}", file=sys.stderr)
        return 1
    print("lint: clean")
    return 0


def _cmd_metrics(args) -> int:
    pred = raster.read_mask(args.pred)
    ref = raster.read_mask(args.ref)
    if args.dilate_pred:
        pred = metrics.dilate(pred, args.dilate_pred)
    rep = metrics.report(metrics.confusion(pred, ref))
    text = json.dumps(rep.to_json_dict(), indent=2)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            f.write(text + "\n")
    return 0


def _cmd_export_params(args) -> int:
    cfg, params = params_io.read_model(args.model)
    manifest_path, table_path = params_io.write_model(args.out, cfg, params)
    print(f"wrote {manifest_path}")
    print(f"wrote {table_path}")
    return 0


def _cmd_import_params(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as f:
        manifest_text = f.read()
    with open(args.table, "r", encoding="utf-8") as f:
        table = f.read()
    cfg, params = params_io.import_params(manifest_text, table)
    manifest_path, table_path = params_io.write_model(args.out, cfg, params)
    print(
        f"imported model: depth {cfg.depth}, {cfg.in_bands} bands,"
        f" {G.param_count(cfg)} parameters"
    )
    print(f"wrote {manifest_path}")
    print(f"wrote {table_path}")
    return 0


# ======================================================================
# PARSER
# ======================================================================


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudlower",
        description="Cloud detection: train, lower, verify, and emit client scripts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic labeled dataset")
    p.add_argument("--count", type=int, required=True, help="number of patches")
    p.add_argument("--patch", type=int, default=64, help="patch edge length in px")
    p.add_argument("--bands", type=int, default=10, help="band count")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train a model from scratch")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=int, help="train on N generated patches")
    src.add_argument("--data", help="train on rasters + masks from this directory")
    p.add_argument("--patch", type=int, default=64, help="synthetic patch edge length")
    p.add_argument("--bands", type=int, default=10, help="synthetic band count")
    p.add_argument("--depth", type=int, default=2, help="encoder/decoder levels")
    p.add_argument("--epochs", type=int, default=100, help="max training epochs")
    p.add_argument("--batch", type=int, default=10, help="batch size")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="init and shuffle seed")
    p.add_argument("--stop-oa", type=float, default=None, help="early-stop accuracy")
    p.add_argument("--out", required=True, help="output model stem")
    p.add_argument("--log", default=None, help="write the epoch log as JSON here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run inference over a raster")
    p.add_argument("--model", required=True, help="model stem")
    p.add_argument("--input", required=True, help="input raster stem or .rst path")
    p.add_argument(
        "--engine",
        choices=("reference", "lowered"),
        default="reference",
        help="execution engine",
    )
    p.add_argument("--tile", type=int, default=0, help="core tile size, 0 = whole scene")
    p.add_argument("--halo", type=int, default=None, help="override the window halo")
    p.add_argument("--threshold", type=float, default=0.5, help="mask threshold")
    p.add_argument("--prob-out", default=None, help="probability raster stem")
    p.add_argument("--mask-out", default=None, help="binary mask PGM path")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("lower", help="compile a model to instruction text")
    p.add_argument("--model", required=True, help="model stem")
    p.add_argument("--out", required=True, help="program text output path")
    p.set_defaults(func=_cmd_lower)

    p = sub.add_parser("verify", help="reference-vs-lowered equivalence trials")
    p.add_argument("--trials", type=int, default=100, help="number of trials")
    p.add_argument("--depths", default="1,2,3", help="comma list of depths to sample")
    p.add_argument("--seed", type=int, default=0, help="trial seed")
    p.add_argument("--tolerance", type=float, default=1e-6, help="max allowed deviation")
    p.add_argument("--model", default=None, help="verify this model instead of random ones")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("emit-gee", help="emit the client script and tables")
    p.add_argument("--model", required=True, help="model stem")
    p.add_argument("--out", required=True, help="output stem")
    p.add_argument("--name", default="cloud_model", help="script/module name")
    p.add_argument("--band-names", default=None, help="comma list of input band names")
    p.add_argument(
        "--asset-prefix",
        default="users/example/cloud_model",
        help="asset id stem for large tensors",
    )
    p.add_argument(
        "--inline-threshold",
        default="512",
        help="inline tensors smaller than this many scalars ('inf' inlines all)",
    )
    p.set_defaults(func=_cmd_emit_gee)

    p = sub.add_parser("metrics", help="score a mask against a reference")
    p.add_argument("--pred", required=True, help="predicted mask PGM")
    p.add_argument("--ref", required=True, help="reference mask PGM")
    p.add_argument(
        "--dilate-pred", type=int, default=0, help="dilate the prediction first"
    )
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("export-params", help="re-render a model's parameter files")
    p.add_argument("--model", required=True, help="model stem")
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=_cmd_export_params)

    p = sub.add_parser("import-params", help="validate and import parameter files")
    p.add_argument("--manifest", required=True, help="manifest JSON path")
    p.add_argument("--table", required=True, help="parameter table CSV path")
    p.add_argument("--out", required=True, help="output model stem")
    p.set_defaults(func=_cmd_import_params)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ToleranceError, NumericDomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DimensionError, ValidationError, FormatError, LoweringError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
