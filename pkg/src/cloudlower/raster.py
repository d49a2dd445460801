"""Raster and mask file formats, padding, and tiled inference.

Raster on disk is a pair of files sharing a stem: <stem>.rst.json (header)
and <stem>.rst.bin (payload). Normative byte layout of the payload:
band-sequential (all of band 0, then band 1, ...), each band row-major
(top row first, left to right), little-endian IEEE float32, no padding or
alignment. The header records width, height, band names, dtype "float32",
interleave "bsq", byte_order "little". Payload length must equal
width*height*bands*4 exactly.

Masks are binary PGM (P5), maxval 255, one byte per pixel, restricted to the
values 0 (clear) and 255 (cloud). Anything else is rejected.

Tiled inference splits a scene into core rectangles and runs the engine on
halo-padded windows. Window origins and sizes stay aligned to 2**depth, so
pooling grids match a whole-image run exactly and every core pixel comes out
bit-identical to whole-image inference; the halo radius comes from
graph.receptive_halo rounded up to a multiple of 2**depth.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import graph as G
from . import isa
from . import lowering
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor


@dataclass(frozen=True)
class Raster:
    """A multiband scene: band names plus float32 (bands, H, W) data."""

    band_names: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.dtype != np.float32:
            raise DimensionError("raster data must be float32 (bands, H, W)")
        if len(self.band_names) != self.data.shape[0]:
            raise DimensionError("band_names length must match band count")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _raster_paths(path: str) -> tuple[str, str]:
    stem = path
    for suffix in (".rst.json", ".rst.bin", ".rst"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return f"{stem}.rst.json", f"{stem}.rst.bin"


def write_raster(path: str, raster: Raster) -> tuple[str, str]:
    header_path, bin_path = _raster_paths(path)
    header = {
        "width": raster.width,
        "height": raster.height,
        "bands": raster.bands,
        "band_names": list(raster.band_names),
        "dtype": "float32",
        "interleave": "bsq",
        "byte_order": "little",
        "nodata": None,
    }
    with open(header_path, "w", encoding="utf-8", newline="") as f:
        f.write(json.dumps(header, indent=2) + "\n")
    with open(bin_path, "wb") as f:
        f.write(np.ascontiguousarray(raster.data, dtype="<f4").tobytes())
    return header_path, bin_path


def read_raster(path: str) -> Raster:
    header_path, bin_path = _raster_paths(path)
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{header_path}: invalid JSON: {e}") from e
    for key, expect in (("dtype", "float32"), ("interleave", "bsq"), ("byte_order", "little")):
        if header.get(key) != expect:
            raise FormatError(f"{header_path}: {key} must be {expect!r}, got {header.get(key)!r}")
    try:
        w, h, b = int(header["width"]), int(header["height"]), int(header["bands"])
        names = tuple(str(n) for n in header["band_names"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{header_path}: malformed header: {e}") from e
    if len(names) != b:
        raise FormatError(f"{header_path}: {len(names)} band names for {b} bands")
    if w < 1 or h < 1 or b < 1:
        raise FormatError(f"{header_path}: non-positive dimensions")
    with open(bin_path, "rb") as f:
        payload = f.read()
    expected = w * h * b * 4
    if len(payload) != expected:
        raise FormatError(
            f"{bin_path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(b, h, w).astype(np.float32)
    return Raster(names, data)


# ======================================================================
# MASKS (PGM P5 SUBSET)
# ======================================================================


def write_mask(path: str, mask: np.ndarray) -> str:
    """Write a {0,1} uint8 mask as binary PGM (0 -> 0, 1 -> 255)."""
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise DimensionError("mask must be a 2-D uint8 array")
    if not np.all((mask == 0) | (mask == 1)):
        raise FormatError("mask values must be 0 or 1")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask * np.uint8(255)).tobytes())
    return path


def read_mask(path: str) -> np.ndarray:
    """Read the strict PGM subset back to a {0,1} uint8 array."""
    with open(path, "rb") as f:
        blob = f.read()
    # Header: magic, width, height, maxval, separated by single whitespace
    # bytes; comments are not part of the subset.
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    if len(fields) != 4 or fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise FormatError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    payload = blob[pos:]
    if len(payload) != w * h:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {w * h}")
    raw = np.frombuffer(payload, np.uint8).reshape(h, w)
    if not np.all((raw == 0) | (raw == 255)):
        raise FormatError(f"{path}: mask bytes must be 0 or 255 only")
    return (raw == 255).astype(np.uint8)


# ======================================================================
# PADDING AND TILING
# ======================================================================


def pad_to_multiple(data: np.ndarray, multiple: int) -> tuple[np.ndarray, int, int]:
    """Reflect-pad right/bottom to the next multiple; returns original dims.

    Reflection excludes the edge pixel (abcd -> abcd|cba), which bounds the
    pad amount to dim-1; smaller scenes are rejected.
    """
    h, w = data.shape[-2], data.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph >= h or pw >= w:
        raise DimensionError(
            f"scene {h}x{w} too small to pad to a multiple of {multiple}"
        )
    if ph == 0 and pw == 0:
        return data, h, w
    pad = [(0, 0)] * (data.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(data, pad, mode="reflect"), h, w


@dataclass(frozen=True)
class TileEntry:
    core: tuple[int, int, int, int]  # y, x, h, w on the padded canvas
    window: tuple[int, int, int, int]


@dataclass(frozen=True)
class TilePlan:
    height: int  # padded canvas dims
    width: int
    tile: int
    halo: int
    entries: tuple[TileEntry, ...]


def plan_tiles(height: int, width: int, tile: int, halo: int, step: int) -> TilePlan:
    """Cover a padded canvas with non-overlapping cores and haloed windows.

    tile and halo must be multiples of step (= 2**depth) so window origins
    stay aligned with the whole-image pooling grid.
    """
    if tile < 1:
        raise ConfigError(f"tile must be >= 1, got {tile}")
    if tile % step != 0:
        raise ConfigError(f"tile {tile} must be a multiple of 2**depth = {step}")
    if halo % step != 0:
        raise ConfigError(f"halo {halo} must be a multiple of 2**depth = {step}")
    if tile < 2 * halo:
        raise ConfigError(f"tile {tile} smaller than twice the halo {halo}")
    if height % step != 0 or width % step != 0:
        raise DimensionError(f"canvas {height}x{width} not aligned to {step}")
    entries = []
    for y0 in range(0, height, tile):
        ch = min(tile, height - y0)
        wy0 = max(0, y0 - halo)
        wy1 = min(height, y0 + ch + halo)
        for x0 in range(0, width, tile):
            cw = min(tile, width - x0)
            wx0 = max(0, x0 - halo)
            wx1 = min(width, x0 + cw + halo)
            entries.append(
                TileEntry((y0, x0, ch, cw), (wy0, wx0, wy1 - wy0, wx1 - wx0))
            )
    return TilePlan(height, width, tile, halo, tuple(entries))


def _round_up(value: int, multiple: int) -> int:
    return ((value + multiple - 1) // multiple) * multiple


def _make_runner(
    cfg: G.ModelConfig, params: G.ParamSet, engine: str
) -> Callable[[np.ndarray], np.ndarray]:
    """A (bands,H,W) -> (H,W) probability callable for one engine."""
    if engine == "reference":

        def run(window: np.ndarray) -> np.ndarray:
            return G.forward(cfg, params, Tensor(window)).data[0]

    elif engine == "lowered":
        program = lowering.lower_network(cfg, params).program

        def run(window: np.ndarray) -> np.ndarray:
            grid = isa.GridImage(
                tuple(f"b{i}" for i in range(window.shape[0])), window
            )
            return isa.interpret(program, {"x": grid}).data[0]

    else:
        raise ConfigError(f"unknown engine {engine!r}")
    return run


def tiled_infer(
    raster: Raster,
    cfg: G.ModelConfig,
    params: G.ParamSet,
    engine: str = "reference",
    tile: int = 0,
    halo: int | None = None,
) -> np.ndarray:
    """Cloud probability for a whole scene, computed tile by tile.

    tile = 0 runs the padded scene as a single window. halo defaults to the
    model's receptive halo rounded up to a multiple of 2**depth; passing a
    smaller value deliberately breaks the seam guarantee (used by the
    negative-control test).
    """
    if raster.bands != cfg.in_bands:
        raise DimensionError(
            f"model expects {cfg.in_bands} bands, raster has {raster.bands}"
        )
    step = 2**cfg.depth
    padded, orig_h, orig_w = pad_to_multiple(raster.data, step)
    height, width = padded.shape[1], padded.shape[2]
    run = _make_runner(cfg, params, engine)
    if tile == 0:
        return run(padded)[:orig_h, :orig_w]
    if halo is None:
        halo = _round_up(G.receptive_halo(cfg), step)
    plan = plan_tiles(height, width, tile, halo, step)
    out = np.empty((height, width), np.float32)
    for entry in plan.entries:
        y0, x0, ch, cw = entry.core
        wy0, wx0, wh, ww = entry.window
        prob = run(np.ascontiguousarray(padded[:, wy0 : wy0 + wh, wx0 : wx0 + ww]))
        oy, ox = y0 - wy0, x0 - wx0
        out[y0 : y0 + ch, x0 : x0 + cw] = prob[oy : oy + ch, ox : ox + cw]
    return out[:orig_h, :orig_w]


def synth_raster_name(directory: str, index: int) -> tuple[str, str]:
    """File naming for generated datasets: patch NNNN + matching mask."""
    stem = os.path.join(directory, f"patch{index:04d}")
    return f"{stem}.rst", f"{stem}.mask.pgm"
