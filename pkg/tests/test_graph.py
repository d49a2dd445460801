"""Model graph tests: structure, parameter registry, reference forward pass,
and the receptive halo bound.

The halo tests are the load-bearing ones: tiled inference leans on
receptive_halo being a true upper bound, so the bound is probed empirically
by scrambling inputs outside the claimed radius and demanding bit-identical
output, and tightness is probed by scrambling at exactly the radius.
"""

import numpy as np
import pytest

from cloudlower import graph as G
from cloudlower import tensor as T
from cloudlower.errors import ConfigError, DimensionError


def make_rng(label: int) -> np.random.Generator:
    return np.random.default_rng([20260502, label])


# ======================================================================
# CONFIG AND STRUCTURE
# ======================================================================


def test_model_config_validation():
    with pytest.raises(ConfigError):
        G.ModelConfig(width=32)
    with pytest.raises(ConfigError):
        G.ModelConfig(depth=0)
    with pytest.raises(ConfigError):
        G.ModelConfig(depth=7)
    with pytest.raises(ConfigError):
        G.ModelConfig(in_bands=0)
    with pytest.raises(ConfigError):
        G.ModelConfig(kernel=5)
    with pytest.raises(ConfigError):
        G.ModelConfig(pool=3)
    with pytest.raises(ConfigError):
        G.ModelConfig(bn_epsilon=0.0)


def test_graph_node_order_depth2():
    g = G.build_graph(G.ModelConfig(in_bands=4, depth=2))
    names = [n.name for n in g.nodes]
    assert names == [
        "input",
        "down1",
        "pool1",
        "down2",
        "pool2",
        "up2.upsample",
        "concat2",
        "up2",
        "up1.upsample",
        "concat1",
        "up1",
        "head",
    ]
    byname = {n.name: n for n in g.nodes}
    # Concat order is normative: upsampled stream first, skip second.
    assert byname["concat2"].args == ("up2.upsample", "down2")
    assert byname["concat1"].args == ("up1.upsample", "down1")
    assert byname["down1"].in_channels == 4
    assert byname["down2"].in_channels == 64
    assert byname["up2"].in_channels == 128
    assert byname["head"].out_channels == 1
    assert g.output == "head"


def test_registry_order_and_shapes_depth1():
    cfg = G.ModelConfig(in_bands=3, depth=1)
    reg = G.registry_shapes(cfg)
    names = [n for n, _ in reg]
    assert names[0] == "down1.conv1.weight"
    assert names[-2:] == ["head.weight", "head.bias"]
    # 12 tensors per block, 2 blocks per level, plus the two head tensors.
    assert len(names) == 12 * 2 + 2
    shapes = dict(reg)
    assert shapes["down1.conv1.weight"] == (64, 3, 3, 3)
    assert shapes["down1.conv2.weight"] == (64, 64, 3, 3)
    assert shapes["up1.conv1.weight"] == (64, 128, 3, 3)
    assert shapes["head.weight"] == (1, 64, 3, 3)
    assert shapes["head.bias"] == (1,)
    assert shapes["up1.bn2.running_var"] == (64,)


def closed_form_params(in_bands: int, depth: int, w: int = 64) -> int:
    """Independent parameter count: each block is two conv+bn+prelu units."""

    def tcbp(cin: int) -> int:
        unit1 = w * cin * 9 + 4 * w + w  # conv1 + bn1 (4 vectors) + slope
        unit2 = w * w * 9 + 4 * w + w
        return unit1 + unit2

    total = tcbp(in_bands)  # down1
    total += (depth - 1) * tcbp(w)  # down2..downN
    total += depth * tcbp(2 * w)  # decoder blocks
    total += w * 9 + 1  # head conv + bias
    return total


@pytest.mark.parametrize("in_bands", [1, 3, 10])
@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_param_count_matches_closed_form(in_bands, depth):
    cfg = G.ModelConfig(in_bands=in_bands, depth=depth)
    assert G.param_count(cfg) == closed_form_params(in_bands, depth)


def test_param_count_frozen_reference_values():
    # Depth 1, 10 bands: one encoder block, one decoder block, head.
    assert G.param_count(G.ModelConfig(in_bands=10, depth=1)) == 155073
    # Every extra level adds one width-64 encoder block and one 128-in
    # decoder block: (18 + 27) * 64^2 + 20 * 64 = 185600.
    for d in range(1, 6):
        a = G.param_count(G.ModelConfig(in_bands=10, depth=d))
        b = G.param_count(G.ModelConfig(in_bands=10, depth=d + 1))
        assert b - a == 185600


def test_check_params_rejects_drift():
    cfg = G.ModelConfig(in_bands=2, depth=1)
    params = G.random_params(cfg, make_rng(1))
    G.check_params(cfg, params)  # sanity: the generator satisfies the registry
    bad = G.ParamSet(dict(params.items()))
    bad["down1.conv1.weight"] = np.zeros((64, 3, 3, 3), np.float32)
    with pytest.raises(DimensionError):
        G.check_params(cfg, bad)
    missing = G.ParamSet({k: v for k, v in params.items() if k != "head.bias"})
    with pytest.raises(ConfigError):
        G.check_params(cfg, missing)


# ======================================================================
# REFERENCE FORWARD
# ======================================================================


def test_forward_shape_and_range():
    cfg = G.ModelConfig(in_bands=3, depth=2)
    params = G.random_params(cfg, make_rng(2))
    x = T.Tensor(make_rng(3).uniform(0, 1, (3, 16, 20)).astype(np.float32))
    out = G.forward(cfg, params, x)
    assert out.data.shape == (1, 16, 20)
    assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)


def test_forward_zero_weights_collapse_to_bias_sigmoid():
    # With every conv weight, bn shift, and running mean at zero the logits
    # equal the head bias everywhere, so the output is one constant value
    # computed by the scalar sigmoid.
    cfg = G.ModelConfig(in_bands=2, depth=1)
    params = G.ParamSet()
    for name, shape in G.registry_shapes(cfg):
        if name.endswith("running_var") or name.endswith(".gamma"):
            params[name] = np.ones(shape, np.float32)
        elif name.endswith(".slope"):
            params[name] = np.full(shape, 0.25, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    params["head.bias"] = np.array([-0.7], np.float32)
    x = T.Tensor(make_rng(4).uniform(0, 1, (2, 8, 8)).astype(np.float32))
    out = G.forward(cfg, params, x)
    logits = T.Tensor(np.full((1, 8, 8), -0.7, np.float32))
    want = T.head_sigmoid(logits).data
    assert out.data.tobytes() == want.tobytes()


def test_forward_input_validation():
    cfg = G.ModelConfig(in_bands=3, depth=2)
    params = G.random_params(cfg, make_rng(5))
    with pytest.raises(DimensionError):
        G.forward(cfg, params, T.Tensor(np.zeros((4, 16, 16), np.float32)))
    with pytest.raises(DimensionError):
        G.forward(cfg, params, T.Tensor(np.zeros((3, 18, 16), np.float32)))


# ======================================================================
# RECEPTIVE HALO
# ======================================================================


def mild_params(cfg: G.ModelConfig, rng: np.random.Generator) -> G.ParamSet:
    """Random but damped parameters: keeps the probed logit away from the
    sigmoid's saturated ends, where single-bit influence would be invisible."""
    params = G.random_params(cfg, rng)
    for name in params.names():
        if name.endswith("weight"):
            params[name] = (params[name] * np.float32(0.12)).astype(np.float32)
        elif name.endswith(".beta") or name.endswith("running_mean") or name == "head.bias":
            params[name] = (params[name] * np.float32(0.3)).astype(np.float32)
    return params


def test_receptive_halo_closed_form():
    # Each level adds four 3x3 convs around a pool/upsample pair; unrolling
    # the interval recurrence gives 2^(depth+2) - 2.
    for depth in range(1, 7):
        cfg = G.ModelConfig(in_bands=3, depth=depth)
        assert G.receptive_halo(cfg) == 2 ** (depth + 2) - 2


def test_receptive_halo_hand_derived_depth1():
    # Depth 1 by hand: head conv 1, decoder block 2+2, upsample halves and
    # floors, pool doubles (+1), encoder block 2+2 -> 6 input pixels.
    assert G.receptive_halo(G.ModelConfig(in_bands=3, depth=1)) == 6


@pytest.mark.parametrize("depth,size", [(1, 16), (2, 36)])
def test_halo_is_a_true_bound(depth, size):
    # Scramble every input pixel whose Chebyshev distance from the probed
    # output pixel exceeds the halo; the probed output must not move a bit.
    cfg = G.ModelConfig(in_bands=3, depth=depth)
    params = mild_params(cfg, make_rng(6))
    halo = G.receptive_halo(cfg)
    assert halo < size
    rng = make_rng(7 + depth)
    x = rng.uniform(0, 1, (3, size, size)).astype(np.float32)
    base = G.forward(cfg, params, T.Tensor(x)).data[0, 0, 0]
    assert 1e-3 < float(base) < 1.0 - 1e-3  # probe sits in the sensitive range
    far = x.copy()
    far[:, halo + 1 :, :] = rng.uniform(-5, 5, far[:, halo + 1 :, :].shape)
    far[:, :, halo + 1 :] = rng.uniform(-5, 5, far[:, :, halo + 1 :].shape)
    moved = G.forward(cfg, params, T.Tensor(far)).data[0, 0, 0]
    assert moved.tobytes() == base.tobytes()


@pytest.mark.parametrize("depth,size", [(1, 16), (2, 36)])
def test_halo_is_tight(depth, size):
    # The dependence interval is asymmetric (pooling floors toward negative
    # offsets), and the radius is attained on the up-left side only. So probe
    # the output pixel at (halo, halo) and bump the input at the origin,
    # exactly halo away: for generic parameters that must move the value.
    cfg = G.ModelConfig(in_bands=3, depth=depth)
    params = mild_params(cfg, make_rng(6))
    halo = G.receptive_halo(cfg)
    assert halo < size
    rng = make_rng(9 + depth)
    x = rng.uniform(0, 1, (3, size, size)).astype(np.float32)
    base = G.forward(cfg, params, T.Tensor(x)).data[0, halo, halo]
    assert 1e-3 < float(base) < 1.0 - 1e-3
    bumped = x.copy()
    bumped[:, 0, 0] = 50.0
    moved = G.forward(cfg, params, T.Tensor(bumped)).data[0, halo, halo]
    assert moved.tobytes() != base.tobytes()
