"""Architecture-level tests: parameter bookkeeping, the encoder module,
whole-network forward contracts and the receptive-field arithmetic."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from aggnet.errors import ContractError
from aggnet.model import (
    CANONICAL_NINE,
    MIN_INPUT_SIZE,
    AggNetConfig,
    aggnet_forward,
    aggnet_head_map,
    class_name,
    he_init,
    init_params,
    is_bias,
    msenc_forward,
    param_count,
    param_shapes,
    perturb_biases,
    predict_class,
    receptive_field,
    tape_loss,
)

from conftest import make_rng


def _tiny(variant, class_count=3, stem=4, depths=(4, 4, 4, 4)):
    return AggNetConfig(variant=variant, class_count=class_count,
                        stem_depth=stem, module_depths=depths)


def hand_counted_params(stem, depths, n_classes, in_ch=3):
    """Independent tally of every weight and bias, straight from the layout."""
    total = 9 * in_ch * stem + stem
    c = stem
    for d in depths:
        q = d // 2
        total += 9 * c * d + d              # residual conv
        total += 3 * (9 * c * q + q)        # three dilated branches
        total += 9 * (3 * q) + 3 * q        # depthwise stage
        total += (3 * q) * d + d            # pointwise stage
        c = d
    total += c * n_classes + n_classes      # head
    return total


def test_param_count_matches_hand_tally():
    for stem, depths, n in [(4, (4, 4, 4, 4), 3),
                            (8, (8, 16, 16, 16), 9),
                            (32, (64, 128, 256, 256), 9)]:
        cfg = _tiny("MS", class_count=n, stem=stem, depths=depths)
        assert param_count(cfg) == hand_counted_params(stem, depths, n)


def test_variants_have_identical_parameter_budgets():
    # Dilation spreads the same 3x3 taps; it must not change a single shape.
    for stem, depths in [(4, (4, 4, 4, 4)), (32, (64, 128, 256, 256))]:
        ms = _tiny("MS", stem=stem, depths=depths)
        base = _tiny("Base", stem=stem, depths=depths)
        assert param_count(ms) == param_count(base)
        assert param_shapes(ms) == param_shapes(base)


def test_config_validation():
    with pytest.raises(ContractError):
        AggNetConfig(variant="huge", class_count=3)
    with pytest.raises(ContractError):
        AggNetConfig(variant="MS", class_count=1)
    with pytest.raises(ContractError):
        AggNetConfig(variant="MS", class_count=3, module_depths=(4, 4, 4))
    with pytest.raises(ContractError):
        AggNetConfig(variant="MS", class_count=3, module_depths=(4, 4, 4, 1))


def _module_params(gen, in_depth, depth):
    q = depth // 2
    return {
        "res.w": he_init((3, 3, in_depth, depth), gen),
        "res.b": he_init((depth,), gen),
        "br0.w": he_init((3, 3, in_depth, q), gen),
        "br0.b": he_init((q,), gen),
        "br1.w": he_init((3, 3, in_depth, q), gen),
        "br1.b": he_init((q,), gen),
        "br2.w": he_init((3, 3, in_depth, q), gen),
        "br2.b": he_init((q,), gen),
        "sep.dw": he_init((3, 3, 3 * q), gen),
        "sep.dwb": he_init((3 * q,), gen),
        "sep.pw": he_init((1, 1, 3 * q, depth), gen),
        "sep.pwb": he_init((depth,), gen),
    }


@settings(max_examples=20, deadline=None)
@given(m=st.integers(min_value=2, max_value=17),
       n=st.integers(min_value=2, max_value=17),
       variant=st.sampled_from(["MS", "Base"]))
def test_encoder_module_halves_spatial_size(m, n, variant):
    gen = make_rng(m * 100 + n)
    params = _module_params(gen, 2, 4)
    x = gen.normal(size=(m, n, 2))
    y = msenc_forward(x, params, variant)
    assert y.shape == (math.ceil(m / 2), math.ceil(n / 2), 4)
    assert np.all(y >= 0.0)  # final ReLU


def test_encoder_module_variants_disagree():
    # Same weights, different dilation grid: the outputs must differ, or the
    # variant switch is wired to nothing.
    gen = make_rng(30)
    params = _module_params(gen, 2, 4)
    x = gen.normal(size=(12, 12, 2))
    ms = msenc_forward(x, params, "MS")
    base = msenc_forward(x, params, "Base")
    assert np.abs(ms - base).max() > 1e-6


def test_forward_is_a_probability_distribution():
    gen = make_rng(31)
    cfg = _tiny("MS")
    params = perturb_biases(init_params(cfg, gen), gen)
    img = gen.uniform(0.0, 1.0, size=(24, 20, 3))
    p = aggnet_forward(img, params, cfg)
    assert p.shape == (3,)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_forward_accepts_any_size_above_minimum():
    # One parameter set, two very different input geometries: the network
    # must be fully convolutional.
    gen = make_rng(32)
    cfg = _tiny("MS", class_count=4, stem=3, depths=(2, 2, 2, 2))
    params = perturb_biases(init_params(cfg, gen), gen)
    for shape in [(16, 16), (128, 128), (256, 192), (40, 17)]:
        img = gen.uniform(0.0, 1.0, size=shape + (3,))
        p = aggnet_forward(img, params, cfg)
        assert p.shape == (4,)
        assert abs(p.sum() - 1.0) < 1e-9


def test_forward_rejects_undersized_input():
    gen = make_rng(33)
    cfg = _tiny("MS")
    params = init_params(cfg, gen)
    img = np.zeros((MIN_INPUT_SIZE - 1, MIN_INPUT_SIZE, 3))
    with pytest.raises(ContractError, match="16"):
        aggnet_forward(img, params, cfg)


def test_forward_rejects_wrong_channel_count():
    gen = make_rng(34)
    cfg = _tiny("Base")
    params = init_params(cfg, gen)
    with pytest.raises(ContractError):
        aggnet_forward(np.zeros((16, 16, 1)), params, cfg)


def test_zero_head_weights_give_uniform_scores():
    gen = make_rng(35)
    cfg = _tiny("MS", class_count=5, stem=3, depths=(2, 2, 2, 2))
    params = init_params(cfg, gen)
    params["head.w"][:] = 0.0
    params["head.b"][:] = 0.0
    img = gen.uniform(0.0, 1.0, size=(16, 16, 3))
    p = aggnet_forward(img, params, cfg)
    npt.assert_allclose(p, np.full(5, 0.2), rtol=0, atol=1e-12)


def test_head_map_has_class_channels_and_no_activation():
    # The head feeds pooling directly, so negative values must survive.
    gen = make_rng(36)
    cfg = _tiny("MS", class_count=6, stem=3, depths=(2, 2, 2, 2))
    params = perturb_biases(init_params(cfg, gen), gen)
    img = gen.uniform(0.0, 1.0, size=(32, 32, 3))
    head = aggnet_head_map(img, params, cfg)
    assert head.shape == (2, 2, 6)
    assert head.min() < 0.0


def test_horizontal_flip_invariance_with_symmetric_kernels():
    # Construction: symmetrize every stride-1 kernel about its vertical
    # axis and silence the stride-2 residual convolutions (their uneven
    # padding split is the one flip-asymmetric piece of the module). On an
    # even-sized input every remaining stage commutes with a horizontal
    # flip, and pooling erases the mirrored geometry, so the scores must
    # agree to rounding.
    gen = make_rng(37)
    cfg = _tiny("MS", class_count=3, stem=4, depths=(4, 4, 4, 4))
    params = perturb_biases(init_params(cfg, gen), gen)
    for name in params:
        if name.endswith(".w") and params[name].ndim == 4 and "res" not in name:
            params[name] = 0.5 * (params[name] + params[name][:, ::-1])
        if name.endswith("sep.dw"):
            params[name] = 0.5 * (params[name] + params[name][:, ::-1])
        if "res." in name:
            params[name] = np.zeros_like(params[name])
    img = gen.uniform(0.0, 1.0, size=(32, 32, 3))
    p = aggnet_forward(img, params, cfg)
    p_flip = aggnet_forward(img[:, ::-1].copy(), params, cfg)
    npt.assert_allclose(p, p_flip, rtol=0, atol=1e-10)


def test_tape_loss_is_finite_and_differentiable():
    gen = make_rng(38)
    cfg = _tiny("Base", stem=3, depths=(2, 2, 2, 2))
    params = perturb_biases(init_params(cfg, gen), gen)
    img = gen.uniform(0.0, 1.0, size=(16, 16, 3))
    tape, loss = tape_loss(img, 1, params, cfg)
    assert np.isfinite(loss.value) and loss.value > 0
    grads = tape.backward(loss)
    assert set(grads) == set(params)
    assert any(np.abs(g).max() > 0 for g in grads.values())


def test_predict_class_examples():
    assert predict_class(np.array([0.0, 0.0, 1.0])).index == 3
    assert predict_class(np.array([0.2, 0.5, 0.3])).index == 2
    # exact tie resolves to the lowest index
    assert predict_class(np.full(4, 0.25)).index == 1
    label = predict_class(np.array([0.9, 0.05, 0.05]))
    assert label.name == class_name(1, 3)


def test_predict_class_rejects_non_distributions():
    with pytest.raises(ContractError):
        predict_class(np.array([0.5, 0.6]))
    with pytest.raises(ContractError):
        predict_class(np.array([1.0]))
    with pytest.raises(ContractError):
        predict_class(np.array([np.nan, 1.0]))


def test_class_names_canonical_nine():
    names = [class_name(i, 9) for i in range(1, 10)]
    assert tuple(names) == CANONICAL_NINE
    # other class counts fall back to a numbered scheme
    assert class_name(2, 3) != ""


def test_he_init_statistics():
    gen = make_rng(39)
    w = he_init((1, 1, 2, 200000), gen)
    assert abs(w.std() - 1.0) < 0.01          # var = 2 / fan_in = 1
    dw = he_init((3, 3, 50000), gen)
    assert abs(dw.var() - 2.0 / 9.0) < 0.01
    npt.assert_array_equal(he_init((64,), gen), np.zeros(64))
    a = he_init((3, 3, 4, 4), make_rng(7))
    b = he_init((3, 3, 4, 4), make_rng(7))
    npt.assert_array_equal(a, b)


def test_perturb_biases_touches_only_biases():
    gen = make_rng(40)
    cfg = _tiny("MS", stem=3, depths=(2, 2, 2, 2))
    params = init_params(cfg, gen)
    shaken = perturb_biases(params, gen)
    for name in params:
        if is_bias(name):
            assert np.abs(shaken[name]).max() > 0
            npt.assert_array_equal(params[name], np.zeros_like(params[name]))
        else:
            npt.assert_array_equal(shaken[name], params[name])


def test_receptive_field_totals_and_extents():
    ms = receptive_field(_tiny("MS"))
    base = receptive_field(_tiny("Base"))
    assert ms.total == 168
    assert base.total == 78
    assert ms.branch_extents == ((3, 5, 9),) * 4
    assert base.branch_extents == ((3, 3, 3),) * 4
    # stem is a plain 3x3 at stride 1
    assert ms.stages[0].rf == 3
    table = ms.table()
    assert "stem" in table and "mod3.pool" in table and "168" in table


def test_receptive_field_recursion_against_direct_sum():
    # rf = 1 + sum over stages of (extent - 1) * jump-before-stage,
    # accumulated here independently of the library's loop.
    for variant, widest in [("MS", 9), ("Base", 3)]:
        rf, jump = 1, 1
        stages = [(3, 1)]
        for _ in range(4):
            stages += [(widest, 1), (3, 1), (2, 2)]
        stages += [(1, 1)]
        for extent, stride in stages:
            rf += (extent - 1) * jump
            jump *= stride
        assert receptive_field(_tiny(variant)).total == rf
