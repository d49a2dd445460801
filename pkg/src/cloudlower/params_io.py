"""Parameter transport as text: one CSV table plus a JSON manifest.

Table format, one scalar per row, header included:

    tensor_name,flat_index,value

Rows are ordered by the model's parameter registry, then by flat (row-major)
index. Values use the canonical float32 rendering from numformat, so a
export -> import round trip is bit-exact for every finite float32, subnormals
and signed zeros included. NaN and Inf are rejected in both directions.

The manifest records the model config, every tensor's name/shape/row count,
and a sha256 of the table text, so imports fail loudly on missing rows,
duplicates, shape mismatches, and silent corruption.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterator

import numpy as np

from .errors import FormatError
from .graph import ModelConfig, ParamSet, registry_shapes
from .numformat import parse_f32, render_f32

FORMAT_VERSION = 1
TABLE_HEADER = "tensor_name,flat_index,value"


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def export_params(cfg: ModelConfig, params: ParamSet) -> tuple[str, str]:
    """Render (manifest_text, table_text). Pure function of its inputs."""
    expected = registry_shapes(cfg)
    lines = [TABLE_HEADER]
    tensors = []
    total = 0
    for name, shape in expected:
        arr = params[name]
        if tuple(arr.shape) != shape:
            raise FormatError(f"{name}: shape {tuple(arr.shape)} != registry {shape}")
        flat = arr.ravel()
        if not np.all(np.isfinite(flat)):
            raise FormatError(f"{name}: refusing to export non-finite values")
        for idx in range(flat.shape[0]):
            lines.append(f"{name},{idx},{render_f32(flat[idx])}")
        tensors.append({"name": name, "shape": list(shape), "rows": int(flat.shape[0])})
        total += int(flat.shape[0])
    table = "\n".join(lines) + "\n"
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": {
            "in_bands": cfg.in_bands,
            "depth": cfg.depth,
            "width": cfg.width,
            "kernel": cfg.kernel,
            "pool": cfg.pool,
            "bn_epsilon": cfg.bn_epsilon,
        },
        "tensors": tensors,
        "total_rows": total,
        "table_sha256": _sha256(table),
    }
    manifest_text = json.dumps(manifest, indent=2) + "\n"
    return manifest_text, table


def parse_rows(table: str) -> Iterator[tuple[str, int, np.float32]]:
    """Yield (tensor_name, flat_index, value) from table text."""
    lines = table.splitlines()
    if not lines or lines[0] != TABLE_HEADER:
        raise FormatError(f"table must start with header {TABLE_HEADER!r}")
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"table line {lineno}: expected 3 fields, got {len(parts)}")
        name, idx_text, value_text = parts
        try:
            idx = int(idx_text)
        except ValueError as e:
            raise FormatError(f"table line {lineno}: bad flat_index {idx_text!r}") from e
        try:
            value = parse_f32(value_text)
        except FormatError as e:
            raise FormatError(f"table line {lineno}: {e}") from e
        yield name, idx, value


def import_params(manifest_text: str, table: str) -> tuple[ModelConfig, ParamSet]:
    """Parse and fully validate a (manifest, table) pair."""
    try:
        manifest = json.loads(manifest_text)
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format_version {manifest.get('format_version')!r}"
        )
    model = manifest.get("model", {})
    try:
        cfg = ModelConfig(
            in_bands=int(model["in_bands"]),
            depth=int(model["depth"]),
            width=int(model["width"]),
            kernel=int(model["kernel"]),
            pool=int(model["pool"]),
            bn_epsilon=float(model["bn_epsilon"]),
        )
    except KeyError as e:
        raise FormatError(f"manifest model section missing {e}") from e

    expected = registry_shapes(cfg)
    expected_by_name = dict(expected)
    listed = manifest.get("tensors", [])
    if [t.get("name") for t in listed] != [n for n, _ in expected]:
        raise FormatError("manifest tensor list does not match the model registry")
    for t in listed:
        shape = tuple(t.get("shape", ()))
        if shape != expected_by_name[t["name"]]:
            raise FormatError(
                f"{t['name']}: manifest shape {shape} mismatches registry "
                f"{expected_by_name[t['name']]}"
            )
        if t.get("rows") != int(np.prod(shape)):
            raise FormatError(f"{t['name']}: manifest row count mismatches shape")

    digest = _sha256(table)
    if digest != manifest.get("table_sha256"):
        raise FormatError(
            f"table checksum mismatch: manifest says {manifest.get('table_sha256')}, "
            f"table hashes to {digest}"
        )

    arrays = {
        name: np.full(int(np.prod(shape)), np.nan, np.float32)
        for name, shape in expected
    }
    seen = {name: np.zeros(int(np.prod(shape)), bool) for name, shape in expected}
    for name, idx, value in parse_rows(table):
        if name not in arrays:
            raise FormatError(f"unknown tensor {name!r} in table")
        if not 0 <= idx < arrays[name].shape[0]:
            raise FormatError(f"{name}: flat_index {idx} out of range")
        if seen[name][idx]:
            raise FormatError(f"{name}: duplicate row for flat_index {idx}")
        seen[name][idx] = True
        arrays[name][idx] = value
    for name, _ in expected:
        missing = int(seen[name].shape[0] - seen[name].sum())
        if missing:
            raise FormatError(f"{name}: {missing} missing rows")

    params = ParamSet()
    for name, shape in expected:
        params[name] = arrays[name].reshape(shape)
    return cfg, params


# ======================================================================
# FILE CONVENTIONS
# ======================================================================
# A model on disk is <stem>.manifest.json + <stem>.params.csv.


def model_paths(stem: str) -> tuple[str, str]:
    if stem.endswith(".manifest.json"):
        stem = stem[: -len(".manifest.json")]
    elif stem.endswith(".params.csv"):
        stem = stem[: -len(".params.csv")]
    return f"{stem}.manifest.json", f"{stem}.params.csv"


def write_model(stem: str, cfg: ModelConfig, params: ParamSet) -> tuple[str, str]:
    manifest_path, table_path = model_paths(stem)
    manifest_text, table = export_params(cfg, params)
    with open(manifest_path, "w", encoding="utf-8", newline="") as f:
        f.write(manifest_text)
    with open(table_path, "w", encoding="utf-8", newline="") as f:
        f.write(table)
    return manifest_path, table_path


def read_model(stem: str) -> tuple[ModelConfig, ParamSet]:
    manifest_path, table_path = model_paths(stem)
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest_text = f.read()
    with open(table_path, "r", encoding="utf-8") as f:
        table = f.read()
    return import_params(manifest_text, table)
