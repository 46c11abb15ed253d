import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsflab.guidance import (AttnInputs, AttnPlan, GuidanceSpec, Variant, cfg_combine, joint_weights,
                             nag_combine, nasa_combine, sdpa, vsf_cross_attention, wef_transform)
from vsflab.tensor import Rng, ShapeError

seeds = st.integers(0, 2**32 - 1)


def random_inputs(rng, n_q=3, n_p=4, n_n=2, d=5):
    return AttnInputs(rng.normal((n_q, d)), rng.normal((n_p, d)), rng.normal((n_p, d)),
                      rng.normal((n_n, d)), rng.normal((n_n, d)))


def test_sdpa_hand_softmax():
    out = sdpa([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    w = np.exp([1 / math.sqrt(2), 0.0])
    w /= w.sum()
    np.testing.assert_allclose(out, [w], rtol=0, atol=1e-12)


def test_sdpa_single_key_returns_its_value():
    v = [[0.3, -2.0, 7.0]]
    np.testing.assert_array_equal(sdpa([[1.0, 2.0, 3.0]], [[0.5, 0.5, 0.5]], v), v)


def test_sdpa_plan_selects_one_column():
    rng = Rng(0)
    q, k, v = rng.normal((2, 3)), rng.normal((4, 3)), rng.normal((4, 3))
    allow = np.zeros((2, 4), dtype=bool)
    allow[:, 2] = True
    np.testing.assert_array_equal(sdpa(q, k, v, AttnPlan(allow)), np.repeat(v[2:3], 2, axis=0))


def test_sdpa_shape_errors():
    with pytest.raises(ShapeError):
        sdpa(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 3)))
    with pytest.raises(ShapeError):
        sdpa(np.ones((2, 3)), np.ones((4, 3)), np.ones((4, 3)), AttnPlan(np.ones((2, 3), dtype=bool)))


def test_vsf_zero_negative_values():
    inp = random_inputs(Rng(1))
    inp.v_neg = np.zeros_like(inp.v_neg)
    k = np.vstack([inp.k_pos, inp.k_neg])
    v = np.vstack([inp.v_pos, inp.v_neg])
    np.testing.assert_allclose(vsf_cross_attention(inp, 2.0), sdpa(inp.q, k, v), rtol=0, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(seeds, st.floats(0, 8))
def test_vsf_split_form(seed, alpha):
    rng = Rng(seed)
    dims = rng.integers(1, 9, size=4)
    inp = random_inputs(rng, *dims)
    a_pos, a_neg = joint_weights(inp)
    ref = a_pos @ inp.v_pos - alpha * (a_neg @ inp.v_neg)
    out = vsf_cross_attention(inp, alpha)
    assert np.max(np.abs(out - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_vsf_masked_negative_branch_is_plain_attention():
    inp = random_inputs(Rng(2))
    allow = np.ones((3, 6), dtype=bool)
    allow[:, 4:] = False
    out = vsf_cross_attention(inp, 3.0, AttnPlan(allow))
    np.testing.assert_allclose(out, sdpa(inp.q, inp.k_pos, inp.v_pos), rtol=0, atol=1e-12)


def test_vsf_requires_negative_tokens():
    inp = random_inputs(Rng(3), n_n=0)
    with pytest.raises(ValueError, match="sdpa"):
        vsf_cross_attention(inp, 1.0)


def test_vsf_linear_in_negative_values():
    inp = random_inputs(Rng(4))
    base = vsf_cross_attention(AttnInputs(inp.q, inp.k_pos, inp.v_pos, inp.k_neg, 0 * inp.v_neg), 1.5)
    one = vsf_cross_attention(inp, 1.5) - base
    two = vsf_cross_attention(AttnInputs(inp.q, inp.k_pos, inp.v_pos, inp.k_neg, 2 * inp.v_neg), 1.5) - base
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)


def test_joint_weights_do_not_depend_on_alpha():
    inp = random_inputs(Rng(5))
    a_pos, a_neg = joint_weights(inp)
    # the weights are what the split form uses at every alpha
    for alpha in (0.0, 1.0, 4.0):
        np.testing.assert_allclose(vsf_cross_attention(inp, alpha),
                                   a_pos @ inp.v_pos - alpha * a_neg @ inp.v_neg, atol=1e-12)


def test_vsf_beta_lowers_negative_weight():
    inp = random_inputs(Rng(6))
    near_masked = vsf_cross_attention(inp, 2.0, beta=40.0)
    np.testing.assert_allclose(near_masked, sdpa(inp.q, inp.k_pos, inp.v_pos), atol=1e-12)


def test_nasa_examples():
    z = Rng(0).normal((3, 4))
    assert np.array_equal(nasa_combine(z, Rng(1).normal((3, 4)), 0.0), z)
    np.testing.assert_array_equal(nasa_combine([[1.0, 2.0]], [[0.5, 0.5]], 0.5), [[0.75, 1.75]])
    np.testing.assert_array_equal(nasa_combine(z, z, 1.0), np.zeros_like(z))
    with pytest.raises(ShapeError):
        nasa_combine(np.ones((2, 2)), np.ones((2, 3)), 1.0)


def test_nag_hand_example():
    out = nag_combine([[3.0, 4.0]], [[0.0, 0.0]], phi=1.0, tau=1.2, blend=1.0)
    np.testing.assert_allclose(out, [[3.6, 4.8]], rtol=0, atol=1e-12)


def test_nag_identities():
    rng = Rng(8)
    zp, zn = rng.normal((4, 6)), rng.normal((4, 6))
    for blend in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(nag_combine(zp, zn, 0.0, 2.0, blend), zp, rtol=0, atol=1e-12)
    assert np.array_equal(nag_combine(zp, zn, 5.0, 1.5, 0.0), zp)


def test_nag_zero_norm_row_passes_through():
    out = nag_combine([[0.0, 0.0]], [[1.0, 1.0]], phi=2.0, tau=1.0, blend=1.0)
    np.testing.assert_array_equal(out, [[-2.0, -2.0]])


def test_nag_validates_arguments():
    z = np.ones((1, 2))
    with pytest.raises(ValueError):
        nag_combine(z, z, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        nag_combine(z, z, 1.0, 2.0, 1.5)


@settings(max_examples=200, deadline=None)
@given(seeds, st.floats(0, 16), st.floats(1, 10))
def test_nag_norm_cap(seed, phi, tau):
    rng = Rng(seed)
    zp, zn = rng.normal((5, 4)), rng.normal((5, 4))
    out = nag_combine(zp, zn, phi, tau, 1.0)
    assert np.all(np.linalg.norm(out, axis=1) <= tau * np.linalg.norm(zp, axis=1) + 1e-9)


def test_nag_other_norms():
    out = nag_combine([[3.0, 4.0]], [[0.0, 0.0]], phi=1.0, tau=1.2, blend=1.0, norm_ord=1)
    np.testing.assert_allclose(np.abs(out).sum(), 1.2 * 7.0)


def test_cfg_examples():
    rng = Rng(9)
    un, up = rng.normal((2, 3)), rng.normal((2, 3))
    assert np.array_equal(cfg_combine(un, up, 1.0), up)
    assert np.array_equal(cfg_combine(un, up, 0.0), un)
    np.testing.assert_allclose(cfg_combine([[0.0]], [[1.0]], 2.8), [[2.8]], rtol=0, atol=1e-15)


def test_wef_examples():
    rng = Rng(10)
    pos, neg = rng.normal((2, 4)), rng.normal((3, 4))
    out = wef_transform(pos, neg, 1.7)
    assert out.shape == (5, 4)
    np.testing.assert_array_equal(out[:2], pos)
    np.testing.assert_allclose(out[2:] / -1.7, neg, rtol=0, atol=1e-12)
    zeroed = wef_transform(pos, neg, 0.0)
    assert np.all(zeroed[2:] == 0.0)
    with pytest.raises(ShapeError):
        wef_transform(pos, np.ones((1, 3)), 1.0)


def test_guidance_spec_validation():
    spec = GuidanceSpec("vsf", alpha=2, beta=0.5)
    assert spec.variant is Variant.VSF and spec.alpha == 2.0
    assert spec.as_dict()["lambda"] == 1.0
    for bad in (dict(tau=0.5), dict(blend=1.2), dict(alpha=float("nan")), dict(lambda_=float("inf")),
                dict(alpha=-1.0)):
        with pytest.raises(ValueError):
            GuidanceSpec("nag", **bad)
    with pytest.raises(ValueError):
        GuidanceSpec("bogus")
    assert not Variant.NONE.needs_negative and Variant.WEF.needs_negative
