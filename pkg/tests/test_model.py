from fractions import Fraction

import numpy as np
import pytest

from mobilexnet.layers import BatchNorm2d, Conv2d, ConvBNReLU, ConvSpec
from mobilexnet.model import (ArchitectureConfig, build, count, encoder1_state, init_weights,
                              load_pretrained_backbone, mac_ratio, stage_widths)
from mobilexnet.tensor import ShapeError, Tensor


def micro(variant="base", hw=(32, 32), **kw):
    return build(ArchitectureConfig(variant, hw + (3,), backbone_width=stage_widths(4), **kw))


@pytest.mark.parametrize("hw", [(228, 304), (160, 256)])
def test_base_output_matches_input_resolution(hw):
    model = build(ArchitectureConfig("base", hw + (3,), backbone_width=stage_widths(2)))
    init_weights(model, 0)
    x = Tensor(np.random.default_rng(0).random((1, 3) + hw, dtype=np.float32))
    out, feats = model(x, return_features=True)
    assert out.shape == (1, 1) + hw
    ph, pw = model.config.padded_hw(*hw)
    assert feats["F1"].shape[-2:] == (ph // 16, pw // 16)
    assert feats["F2"].shape[-2:] == (ph // 4, pw // 4)
    assert feats["E7"].shape[-2:] == (ph // 16, pw // 16)


@pytest.mark.parametrize("variant,k", [("small", 3), ("base", 4), ("large", 5)])
def test_downsampling_count_per_variant(variant, k):
    model = micro(variant, (64, 64))
    init_weights(model, 0)
    out, feats = model(Tensor(np.zeros((1, 3, 64, 64), np.float32)), return_features=True)
    assert feats["F1"].shape[-1] == 64 // 2 ** k
    assert feats["F2"].shape[-1] == 64 // 2 ** (k - 2)
    assert out.shape == (1, 1, 64, 64)


def test_odd_sizes_are_padded_and_cropped():
    model = micro("base", (21, 37))
    init_weights(model, 0)
    out = model(Tensor(np.zeros((2, 3, 21, 37), np.float32)))
    assert out.shape == (2, 1, 21, 37)


def test_bridge_all_ones_is_regular_convs():
    model = micro(bridge_dilations=(1, 1, 1))
    for blk in model.bridge1:
        assert blk.spec.dilation == 1 and blk.spec.kernel == 3
    model = micro()
    assert [b.spec.dilation for b in model.bridge2] == [1, 2, 3]


def test_encoder2_has_exactly_two_stride_two_convs():
    model = micro()
    strides = [m.spec.stride for _, m in model.encoder2.named_modules() if isinstance(m, Conv2d)]
    assert sorted(strides) == [1, 1, 1, 2, 2]


def test_only_head_has_bias():
    model = micro()
    with_bias = [n for n, m in model.named_modules() if isinstance(m, Conv2d) and m.bias is not None]
    assert with_bias == ["head"]


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        ArchitectureConfig("tiny")
    with pytest.raises(ValueError):
        ArchitectureConfig(backbone_width=(32, 64, 100, 256, 512, 1024))
    with pytest.raises(ValueError):
        ArchitectureConfig(input_shape=(228, 304, 1))


def test_config_round_trip():
    cfg = ArchitectureConfig("small", (64, 96, 3), (1, 1, 1), stage_widths(8))
    assert ArchitectureConfig.from_dict(cfg.to_dict()) == cfg


# -- cost model -----------------------------------------------------------------------

def test_single_conv_parameter_count():
    rep = count(Conv2d(ConvSpec(32, 64, 3)), (8, 8, 32))
    assert rep.parameters == 18432
    assert rep.macs == 18432 * 64


@pytest.mark.parametrize("n", [8, 64, 512])
def test_separable_mac_ratio_is_exact(n):
    assert mac_ratio(32, n) == Fraction(1, n) + Fraction(1, 9)


def test_mac_ratio_example_value():
    assert abs(float(mac_ratio(32, 64)) - 0.1267) < 1e-4


def test_breakdown_sums_to_totals():
    rep = count(build(ArchitectureConfig("base")), (228, 304))
    assert sum(r[2] for r in rep.rows()) == rep.parameters
    assert sum(r[3] for r in rep.rows()) == rep.macs
    model_params = sum(p.size for p in build(ArchitectureConfig("base")).parameters())
    assert model_params == rep.parameters


def test_macs_scale_with_pixels():
    model = build(ArchitectureConfig("base", (64, 64, 3)))
    a = count(model, (64, 64)).macs
    b = count(model, (64, 128)).macs
    assert b == 2 * a


def test_variant_ordering():
    p = {v: count(build(ArchitectureConfig(v)), (228, 304)).parameters for v in ("small", "base", "large")}
    assert p["small"] < p["base"] < p["large"]


# -- init and pretrained weights -----------------------------------------------------------

def test_he_init_std():
    conv = Conv2d(ConvSpec(64, 64, 3))
    big = ConvBNReLU(ConvSpec(64, 200, 3))
    init_weights(big, 0)
    w = big[0].weight.data
    assert w.size > 10 ** 5
    assert abs(w.std() / np.sqrt(2 / 576) - 1) < 0.02
    assert abs(w.mean()) < 1e-3
    assert conv.fan_in == 576


def test_init_is_deterministic_and_sets_bn():
    a, b = micro(), micro()
    init_weights(a, 7)
    init_weights(b, 7)
    for (n, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert x.tobytes() == y.tobytes(), n
    for _, m in a.named_modules():
        if isinstance(m, BatchNorm2d):
            assert (m.gamma.data == 1).all() and (m.beta.data == 0).all()


def test_load_pretrained_backbone_touches_encoder1_only():
    src, dst = micro(), micro()
    init_weights(src, 1)
    init_weights(dst, 2)
    before = {n: a.copy() for n, a in dst.state_dict().items()}
    load_pretrained_backbone(dst, encoder1_state(src))
    for n, a in dst.state_dict().items():
        if n.startswith("encoder1."):
            assert np.array_equal(a, src.state_dict()[n]), n
        else:
            assert np.array_equal(a, before[n]), n


def test_load_pretrained_backbone_errors_name_tensor():
    model = micro()
    tensors = dict(encoder1_state(model))
    name = next(iter(tensors))
    missing = {k: v for k, v in tensors.items() if k != name}
    with pytest.raises(KeyError, match=name.replace(".", r"\.")):
        load_pretrained_backbone(model, missing)
    bad = dict(tensors)
    bad[name] = np.zeros((1, 2, 3))
    with pytest.raises(ShapeError, match=name.replace(".", r"\.")):
        load_pretrained_backbone(model, bad)
