"""Raster container and tiled-inference tests.

The tiling invariant under test is strong on purpose: with a halo at least
the receptive radius, every core pixel sees its full input neighborhood
inside its window, the window origins stay on the pooling grid, and the
float32 operations run identically, so tiled output equals whole-scene
output bit for bit. The negative control halves the halo and must break.
"""

import numpy as np
import pytest

from cloudlower import graph as G
from cloudlower import raster as R
from cloudlower.errors import ConfigError, DimensionError, FormatError


def make_rng(label: int) -> np.random.Generator:
    return np.random.default_rng([20260507, label])


def damped_params(cfg: G.ModelConfig, rng: np.random.Generator) -> G.ParamSet:
    """Random parameters scaled down so probabilities stay off the sigmoid
    rails; seam differences would be invisible at a saturated 0 or 1."""
    params = G.random_params(cfg, rng)
    for name in params.names():
        if name.endswith("weight"):
            params[name] = (params[name] * np.float32(0.12)).astype(np.float32)
        elif name.endswith(".beta") or name.endswith("running_mean") or name == "head.bias":
            params[name] = (params[name] * np.float32(0.3)).astype(np.float32)
    return params


def random_raster(rng, bands, h, w) -> R.Raster:
    names = tuple(f"b{i + 1}" for i in range(bands))
    return R.Raster(names, rng.uniform(0, 1, (bands, h, w)).astype(np.float32))


# ======================================================================
# RASTER FILES
# ======================================================================


def test_raster_validation():
    with pytest.raises(DimensionError):
        R.Raster(("a",), np.zeros((1, 4, 4), np.float64))
    with pytest.raises(DimensionError):
        R.Raster(("a", "b"), np.zeros((1, 4, 4), np.float32))


def test_raster_round_trip(tmp_path):
    rng = make_rng(1)
    r = random_raster(rng, 3, 7, 9)
    path = str(tmp_path / "scene.rst")
    R.write_raster(path, r)
    back = R.read_raster(path)
    assert back.band_names == r.band_names
    assert back.data.tobytes() == r.data.tobytes()
    # Stem access works too.
    again = R.read_raster(str(tmp_path / "scene"))
    assert again.data.tobytes() == r.data.tobytes()


def test_raster_header_corruption(tmp_path):
    import json

    rng = make_rng(2)
    r = random_raster(rng, 2, 4, 4)
    path = str(tmp_path / "scene.rst")
    header_path, payload_path = R.write_raster(path, r)
    with open(header_path) as f:
        doc = json.load(f)

    def rewrite(mutate):
        bad = json.loads(json.dumps(doc))
        mutate(bad)
        with open(header_path, "w") as f:
            json.dump(bad, f)

    rewrite(lambda d: d.update(dtype="float64"))
    with pytest.raises(FormatError, match="dtype"):
        R.read_raster(path)
    rewrite(lambda d: d.update(interleave="bip"))
    with pytest.raises(FormatError, match="interleave"):
        R.read_raster(path)
    rewrite(lambda d: d.update(byte_order="big"))
    with pytest.raises(FormatError, match="byte_order"):
        R.read_raster(path)
    rewrite(lambda d: d.update(height=5))
    with pytest.raises(FormatError, match="payload"):
        R.read_raster(path)
    rewrite(lambda d: d.update(band_names=["b1"]))
    with pytest.raises(FormatError, match="band names"):
        R.read_raster(path)
    rewrite(lambda d: d.update(width=0))
    with pytest.raises(FormatError, match="non-positive"):
        R.read_raster(path)
    with open(header_path, "w") as f:
        f.write("{broken")
    with pytest.raises(FormatError, match="invalid JSON"):
        R.read_raster(path)


def test_raster_payload_truncation(tmp_path):
    rng = make_rng(3)
    r = random_raster(rng, 2, 4, 4)
    path = str(tmp_path / "scene.rst")
    _, payload_path = R.write_raster(path, r)
    with open(payload_path, "rb") as f:
        raw = f.read()
    with open(payload_path, "wb") as f:
        f.write(raw[:-4])
    with pytest.raises(FormatError, match="payload"):
        R.read_raster(path)


def test_mask_round_trip_and_encoding(tmp_path):
    rng = make_rng(4)
    mask = (rng.uniform(size=(5, 7)) < 0.4).astype(np.uint8)
    path = str(tmp_path / "m.pgm")
    R.write_mask(path, mask)
    with open(path, "rb") as f:
        raw = f.read()
    assert raw.startswith(b"P5")
    assert b"255" in raw.split(b"\n")[0:3][-1] or b"255" in raw  # maxval present
    payload = raw[-mask.size :]
    assert set(payload) <= {0, 255}
    back = R.read_mask(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, mask)


def test_mask_write_validation(tmp_path):
    with pytest.raises(FormatError, match="0 or 1"):
        R.write_mask(str(tmp_path / "m.pgm"), np.full((3, 3), 2, np.uint8))
    with pytest.raises(DimensionError):
        R.write_mask(str(tmp_path / "m.pgm"), np.zeros((3, 3, 1), np.uint8))


def test_mask_read_rejections(tmp_path):
    path = str(tmp_path / "m.pgm")

    def put(data: bytes):
        with open(path, "wb") as f:
            f.write(data)

    put(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(FormatError, match="P5"):
        R.read_mask(path)
    put(b"P5\n2 2\n300\n" + bytes([0, 0, 0, 0]))
    with pytest.raises(FormatError, match="maxval"):
        R.read_mask(path)
    put(b"P5\n2 2\n255\n" + bytes([0, 255, 0]))
    with pytest.raises(FormatError, match="payload"):
        R.read_mask(path)
    put(b"P5\n2 2\n255\n" + bytes([0, 255, 7, 0]))
    with pytest.raises(FormatError, match="0 or 255"):
        R.read_mask(path)
    put(b"P5\nx 2\n255\n" + bytes([0, 0, 0, 0]))
    with pytest.raises(FormatError, match="malformed"):
        R.read_mask(path)


# ======================================================================
# PADDING AND TILE PLANNING
# ======================================================================


def test_pad_to_multiple_reflects_without_edge():
    data = np.arange(2 * 5 * 6, dtype=np.float32).reshape(2, 5, 6)
    padded, h, w = R.pad_to_multiple(data, 4)
    assert (h, w) == (5, 6)
    assert padded.shape == (2, 8, 8)
    # Rows 5..7 reflect rows 3,2,1 (edge row 4 excluded); cols 6..7 -> 4,3.
    assert np.array_equal(padded[:, 5], padded[:, 3])
    assert np.array_equal(padded[:, 6], padded[:, 2])
    assert np.array_equal(padded[:, 7], padded[:, 1])
    assert np.array_equal(padded[:, :, 6], padded[:, :, 4])
    assert np.array_equal(padded[:, :, 7], padded[:, :, 3])
    assert np.array_equal(padded[:, :5, :6], data)


def test_pad_to_multiple_identity_when_aligned():
    data = np.zeros((1, 8, 16), np.float32)
    padded, h, w = R.pad_to_multiple(data, 8)
    assert padded is data and (h, w) == (8, 16)


def test_pad_to_multiple_rejects_tiny_scenes():
    with pytest.raises(DimensionError, match="too small"):
        R.pad_to_multiple(np.zeros((1, 3, 9), np.float32), 8)


def test_plan_tiles_partitions_canvas():
    plan = R.plan_tiles(48, 80, tile=16, halo=8, step=4)
    paint = np.zeros((48, 80), np.int32)
    for entry in plan.entries:
        y, x, h, w = entry.core
        paint[y : y + h, x : x + w] += 1
        wy, wx, wh, ww = entry.window
        assert 0 <= wy and wy + wh <= 48 and 0 <= wx and wx + ww <= 80
        assert wy <= y and wx <= x
        assert wy + wh >= y + h and wx + ww >= x + w
        assert wy % 4 == 0 and wx % 4 == 0  # window origin stays grid-aligned
    assert np.all(paint == 1)


def test_plan_tiles_validation():
    with pytest.raises(ConfigError, match="multiple"):
        R.plan_tiles(32, 32, tile=10, halo=4, step=4)
    with pytest.raises(ConfigError, match="multiple"):
        R.plan_tiles(32, 32, tile=16, halo=6, step=4)
    with pytest.raises(ConfigError, match="twice the halo"):
        R.plan_tiles(32, 32, tile=8, halo=8, step=4)
    with pytest.raises(ConfigError, match=">= 1"):
        R.plan_tiles(32, 32, tile=0, halo=0, step=4)
    with pytest.raises(DimensionError, match="aligned"):
        R.plan_tiles(30, 32, tile=16, halo=4, step=4)


# ======================================================================
# TILED INFERENCE
# ======================================================================


def test_tiled_equals_whole_bit_exact_reference_engine():
    cfg = G.ModelConfig(in_bands=3, depth=2)
    params = damped_params(cfg, make_rng(5))
    r = random_raster(make_rng(6), 3, 41, 57)  # forces padding too
    whole = R.tiled_infer(r, cfg, params, engine="reference", tile=0)
    # Default halo is 16 here (receptive radius 14 rounded to the grid), and
    # the planner insists on tile >= 2 * halo.
    tiled = R.tiled_infer(r, cfg, params, engine="reference", tile=32)
    assert whole.shape == (41, 57)
    assert whole.dtype == tiled.dtype == np.float32
    assert tiled.tobytes() == whole.tobytes()


def test_tiled_equals_whole_bit_exact_lowered_engine():
    cfg = G.ModelConfig(in_bands=2, depth=1)
    params = damped_params(cfg, make_rng(7))
    r = random_raster(make_rng(8), 2, 20, 26)
    whole = R.tiled_infer(r, cfg, params, engine="lowered", tile=0)
    tiled = R.tiled_infer(r, cfg, params, engine="lowered", tile=12)
    assert tiled.tobytes() == whole.tobytes()


def test_halved_halo_breaks_the_seams():
    cfg = G.ModelConfig(in_bands=3, depth=2)
    params = damped_params(cfg, make_rng(5))
    r = random_raster(make_rng(6), 3, 48, 48)
    whole = R.tiled_infer(r, cfg, params, engine="reference", tile=0)
    # Default halo: receptive radius 14 rounded up to 16. Half of that still
    # satisfies every planner constraint but undercuts the receptive field.
    broken = R.tiled_infer(r, cfg, params, engine="reference", tile=16, halo=8)
    dev = np.max(np.abs(broken.astype(np.float64) - whole.astype(np.float64)))
    assert dev > 1e-6


def test_tiled_infer_validation():
    cfg = G.ModelConfig(in_bands=3, depth=1)
    params = damped_params(cfg, make_rng(9))
    r = random_raster(make_rng(10), 4, 16, 16)
    with pytest.raises(DimensionError, match="bands"):
        R.tiled_infer(r, cfg, params)
    r3 = random_raster(make_rng(11), 3, 16, 16)
    with pytest.raises(ConfigError, match="engine"):
        R.tiled_infer(r3, cfg, params, engine="jit")


def test_synth_raster_name():
    raster_path, mask_path = R.synth_raster_name("/data/d", 7)
    assert raster_path.endswith("patch0007.rst")
    assert mask_path.endswith("patch0007.mask.pgm")
