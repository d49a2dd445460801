"""End-to-end tests for the command line interface.

Every test drives cli.main() in process with argv lists, so exit codes and
stdout/stderr are asserted exactly as a shell user would see them.
"""

import hashlib
import json
import os

import numpy as np
import pytest

from cloudlower import cli, metrics, params_io, raster
from cloudlower.isa import parse_program


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: synthetic dataset plus a briefly trained model."""
    root = tmp_path_factory.mktemp("cli_ws")
    data = root / "data"
    rc = cli.main(
        [
            "synth-data",
            "--count", "3",
            "--patch", "16",
            "--bands", "3",
            "--seed", "7",
            "--out", str(data),
        ]
    )
    assert rc == 0
    model = root / "model"
    rc = cli.main(
        [
            "train",
            "--synthetic", "3",
            "--patch", "16",
            "--bands", "3",
            "--depth", "1",
            "--epochs", "2",
            "--batch", "2",
            "--seed", "0",
            "--out", str(model),
            "--log", str(root / "train_log.json"),
        ]
    )
    assert rc == 0
    return {
        "root": root,
        "data": data,
        "model": str(model),
        "log": root / "train_log.json",
        "patch0": str(data / "patch0000.rst"),
        "mask0": str(data / "patch0000.mask.pgm"),
    }


# ======================================================================
# DATA AND TRAINING
# ======================================================================


def test_synth_data_reports_and_is_deterministic(tmp_path, capsys):
    argv = ["synth-data", "--count", "2", "--patch", "16", "--bands", "3",
            "--seed", "11", "--out"]
    assert cli.main(argv + [str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "wrote 2 patches (16x16, 3 bands)" in out
    assert cli.main(argv + [str(tmp_path / "b")]) == 0
    for name in ("patch0000.rst.json", "patch0000.rst.bin", "patch0000.mask.pgm",
                 "patch0001.rst.bin"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b


def test_train_writes_model_and_log(ws):
    cfg, params = params_io.read_model(ws["model"])
    assert cfg.depth == 1 and cfg.in_bands == 3
    log = json.loads(ws["log"].read_text())
    assert [e["epoch"] for e in log] == [1, 2]
    for e in log:
        assert set(e) == {"epoch", "loss", "oa"}
        assert 0.0 <= e["oa"] <= 1.0


def test_train_requires_exactly_one_data_source(tmp_path, capsys):
    with pytest.raises(SystemExit) as ex:
        cli.main(["train", "--out", str(tmp_path / "m")])
    assert ex.value.code == 2
    with pytest.raises(SystemExit) as ex:
        cli.main(
            ["train", "--synthetic", "2", "--data", "somewhere",
             "--out", str(tmp_path / "m")]
        )
    assert ex.value.code == 2
    capsys.readouterr()


def test_train_from_directory(ws, tmp_path, capsys):
    out = tmp_path / "dirmodel"
    rc = cli.main(
        ["train", "--data", str(ws["data"]), "--depth", "1", "--epochs", "1",
         "--batch", "3", "--out", str(out)]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "final oa" in text
    cfg, _ = params_io.read_model(str(out))
    assert cfg.in_bands == 3


# ======================================================================
# INFERENCE
# ======================================================================


def infer(ws, outstem, engine, extra=()):
    return cli.main(
        [
            "infer",
            "--model", ws["model"],
            "--input", ws["patch0"],
            "--engine", engine,
            "--prob-out", f"{outstem}.rst",
            "--mask-out", f"{outstem}.mask.pgm",
            *extra,
        ]
    )


def test_infer_engines_agree(ws, tmp_path, capsys):
    assert infer(ws, tmp_path / "ref", "reference") == 0
    assert infer(ws, tmp_path / "low", "lowered") == 0
    capsys.readouterr()
    ref = raster.read_raster(str(tmp_path / "ref.rst"))
    low = raster.read_raster(str(tmp_path / "low.rst"))
    assert ref.band_names == ("cloud_prob",)
    assert ref.data.shape == (1, 16, 16)
    dev = np.max(np.abs(ref.data.astype(np.float64) - low.data.astype(np.float64)))
    assert dev <= 1e-6
    mask = raster.read_mask(str(tmp_path / "ref.mask.pgm"))
    want = metrics.threshold_mask(ref.data[0], 0.5)
    assert mask.tobytes() == want.tobytes()


def test_infer_is_deterministic(ws, tmp_path, capsys):
    assert infer(ws, tmp_path / "one", "reference") == 0
    assert infer(ws, tmp_path / "two", "reference") == 0
    capsys.readouterr()
    one = (tmp_path / "one.rst.bin").read_bytes()
    two = (tmp_path / "two.rst.bin").read_bytes()
    assert one == two


def test_infer_tiled_matches_whole(ws, tmp_path, capsys):
    assert infer(ws, tmp_path / "whole", "reference") == 0
    assert infer(ws, tmp_path / "tiled", "reference", ("--tile", "12")) == 0
    capsys.readouterr()
    whole = (tmp_path / "whole.rst.bin").read_bytes()
    tiled = (tmp_path / "tiled.rst.bin").read_bytes()
    assert whole == tiled


def test_infer_threshold_changes_mask(ws, tmp_path, capsys):
    assert infer(ws, tmp_path / "lo", "reference", ("--threshold", "0.0")) == 0
    capsys.readouterr()
    mask = raster.read_mask(str(tmp_path / "lo.mask.pgm"))
    assert np.all(mask == 1)  # every probability clears a zero threshold


# ======================================================================
# METRICS
# ======================================================================


def test_metrics_prints_report_and_writes_file(ws, tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = cli.main(
        ["metrics", "--pred", ws["mask0"], "--ref", ws["mask0"], "--out", str(out)]
    )
    assert rc == 0
    printed = capsys.readouterr().out
    rep = json.loads(printed)
    assert out.read_text() == printed.rstrip("\n") + "\n"
    counts = rep["counts"]
    assert counts["total"] == 16 * 16
    assert counts["fp"] == 0 and counts["fn"] == 0
    assert rep["oa"] == 1.0
    assert "definitions" in rep


def test_metrics_dilate_flag_is_applied(ws, tmp_path, capsys):
    rc = cli.main(
        ["metrics", "--pred", ws["mask0"], "--ref", ws["mask0"],
         "--dilate-pred", "2"]
    )
    assert rc == 0
    rep = json.loads(capsys.readouterr().out)
    base = json.loads((lambda: (cli.main(
        ["metrics", "--pred", ws["mask0"], "--ref", ws["mask0"]]
    ), capsys.readouterr().out)[1])())
    # Dilation can only grow the predicted cloud area.
    grown = rep["counts"]["tp"] + rep["counts"]["fp"]
    flat = base["counts"]["tp"] + base["counts"]["fp"]
    assert grown >= flat


# ======================================================================
# LOWERING AND VERIFY
# ======================================================================


def test_lower_writes_parseable_program(ws, tmp_path, capsys):
    out = tmp_path / "program.txt"
    rc = cli.main(["lower", "--model", ws["model"], "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "instructions" in text and "kernel applications" in text
    prog = parse_program(out.read_text())
    assert prog.inputs == {"x": 3}


def test_verify_passes_on_faithful_lowering(ws, capsys):
    rc = cli.main(
        ["verify", "--model", ws["model"], "--trials", "2", "--seed", "3"]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("ok") == 2
    assert "max deviation" in out


def test_verify_fails_at_impossible_tolerance(ws, capsys):
    rc = cli.main(
        ["verify", "--model", ws["model"], "--trials", "1", "--seed", "3",
         "--tolerance", "1e-12"]
    )
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "exceeded" in err


def test_verify_rejects_zero_trials(ws, capsys):
    rc = cli.main(["verify", "--trials", "0"])
    assert rc == 2
    assert "trials" in capsys.readouterr().err


# ======================================================================
# EMITTER
# ======================================================================


def test_emit_gee_writes_bundle(ws, tmp_path, capsys):
    stem = tmp_path / "deploy"
    rc = cli.main(["emit-gee", "--model", ws["model"], "--out", str(stem)])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.rstrip().endswith("lint: clean")
    script = (tmp_path / "deploy.gee.js").read_text()
    report = json.loads((tmp_path / "deploy.report.json").read_text())
    assert report["script_sha256"] == hashlib.sha256(script.encode()).hexdigest()
    csvs = sorted(p.name for p in tmp_path.glob("deploy.*.csv"))
    assert csvs == [
        "deploy.down1.conv1.weight.csv",
        "deploy.down1.conv2.weight.csv",
        "deploy.head.weight.csv",
        "deploy.up1.conv1.weight.csv",
        "deploy.up1.conv2.weight.csv",
    ]
    rc = cli.main(["emit-gee", "--model", ws["model"], "--out", str(tmp_path / "again")])
    assert rc == 0
    capsys.readouterr()
    assert (tmp_path / "again.gee.js").read_text() == script


def test_emit_gee_inline_threshold_inf(ws, tmp_path, capsys):
    stem = tmp_path / "inline"
    rc = cli.main(
        ["emit-gee", "--model", ws["model"], "--out", str(stem),
         "--inline-threshold", "inf"]
    )
    assert rc == 0
    capsys.readouterr()
    assert list(tmp_path.glob("inline.*.csv")) == []
    report = json.loads((tmp_path / "inline.report.json").read_text())
    assert report["inline_threshold"] == "inf"


def test_emit_gee_rejects_bad_threshold(ws, tmp_path, capsys):
    rc = cli.main(
        ["emit-gee", "--model", ws["model"], "--out", str(tmp_path / "x"),
         "--inline-threshold", "abc"]
    )
    assert rc == 2
    assert "inline-threshold" in capsys.readouterr().err


# ======================================================================
# PARAMETER FILES
# ======================================================================


def test_export_import_roundtrip(ws, tmp_path, capsys):
    exp = tmp_path / "exported"
    rc = cli.main(["export-params", "--model", ws["model"], "--out", str(exp)])
    assert rc == 0
    imp = tmp_path / "imported"
    rc = cli.main(
        [
            "import-params",
            "--manifest", str(tmp_path / "exported.manifest.json"),
            "--table", str(tmp_path / "exported.params.csv"),
            "--out", str(imp),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "imported model: depth 1, 3 bands" in out
    for suffix in (".manifest.json", ".params.csv"):
        a = (tmp_path / f"exported{suffix}").read_bytes()
        b = (tmp_path / f"imported{suffix}").read_bytes()
        assert a == b


def test_import_rejects_corrupt_table(ws, tmp_path, capsys):
    exp = tmp_path / "exported"
    assert cli.main(["export-params", "--model", ws["model"], "--out", str(exp)]) == 0
    table = (tmp_path / "exported.params.csv").read_text().splitlines()
    broken = "\n".join(table[:-5]) + "\n"  # drop rows, keep the header
    (tmp_path / "broken.csv").write_text(broken)
    rc = cli.main(
        [
            "import-params",
            "--manifest", str(tmp_path / "exported.manifest.json"),
            "--table", str(tmp_path / "broken.csv"),
            "--out", str(tmp_path / "n"),
        ]
    )
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


# ======================================================================
# EXIT CODES AND HELP
# ======================================================================


def test_missing_file_exits_3(tmp_path, capsys):
    rc = cli.main(
        ["infer", "--model", str(tmp_path / "nope"), "--input", str(tmp_path / "x"),
         "--prob-out", str(tmp_path / "p.rst")]
    )
    assert rc == 3
    assert capsys.readouterr().err.startswith("error:")


def test_band_mismatch_exits_2(ws, tmp_path, capsys):
    bad = np.zeros((4, 16, 16), dtype=np.float32)
    raster.write_raster(str(tmp_path / "bad.rst"), raster.Raster(("a", "b", "c", "d"), bad))
    rc = cli.main(
        ["infer", "--model", ws["model"], "--input", str(tmp_path / "bad.rst"),
         "--prob-out", str(tmp_path / "p.rst")]
    )
    assert rc == 2
    assert "band" in capsys.readouterr().err


def test_infer_with_no_outputs_exits_2(ws, capsys):
    rc = cli.main(["infer", "--model", ws["model"], "--input", ws["patch0"]])
    assert rc == 2
    assert "nothing to do" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as ex:
        cli.main(["verify", "--bogus"])
    assert ex.value.code == 2
    capsys.readouterr()


def test_help_lists_all_subcommands(capsys):
    with pytest.raises(SystemExit) as ex:
        cli.main(["--help"])
    assert ex.value.code == 0
    out = capsys.readouterr().out
    for name in ("synth-data", "train", "infer", "lower", "verify", "emit-gee",
                 "metrics", "export-params", "import-params"):
        assert name in out


@pytest.mark.parametrize(
    "sub,flags",
    [
        ("train", ["--synthetic", "--data", "--depth", "--epochs", "--batch",
                   "--lr", "--seed", "--stop-oa", "--log"]),
        ("infer", ["--engine", "--tile", "--halo", "--threshold", "--prob-out",
                   "--mask-out"]),
        ("verify", ["--trials", "--depths", "--tolerance", "--model"]),
        ("emit-gee", ["--name", "--band-names", "--asset-prefix",
                      "--inline-threshold"]),
        ("metrics", ["--pred", "--ref", "--dilate-pred", "--out"]),
    ],
)
def test_subcommand_help_mentions_flags(sub, flags, capsys):
    with pytest.raises(SystemExit) as ex:
        cli.main([sub, "--help"])
    assert ex.value.code == 0
    out = capsys.readouterr().out
    for flag in flags:
        assert flag in out
