import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerfuse.encoder import LayerStack
from layerfuse.fusion import (FusionKind, FusionWeights, coarse_grained_fuse, dynamic_combination_fuse,
                              dynamic_routing_fuse, fine_grained_fuse, fuse, fuse_weighted_sum,
                              fusion_param_spec, fusion_weights, param_count, rsd_weights,
                              sample_specific_weights)
from layerfuse.numeric import init_params

WEIGHTED = [k for k in FusionKind if k is not FusionKind.DynamicCombination]


def make_stack(reps):
    reps = np.asarray(reps, dtype=np.float64)
    return LayerStack(reps, np.zeros((reps.shape[0], 1, reps.shape[2])))


def random_case(seed, kind, L=3, n=4, d=8):
    rng = np.random.default_rng(seed)
    stack = make_stack(rng.normal(size=(L + 1, n, d)))
    params = dict(init_params(fusion_param_spec(kind, d, L), seed).items())
    for name in params:  # zero-initialized scores would hide bugs
        params[name] = params[name] + rng.normal(scale=0.5, size=params[name].shape)
    return stack, params


@pytest.mark.parametrize("kind,expected", [
    ("RSD", 769), ("SampleSpecific", 769), ("CoarseGrained", 13), ("FineGrained", 9984),
    ("DynamicRouting", 7_667_712), ("TopLayer", 0),
])
def test_param_counts_at_base_size(kind, expected):
    assert param_count(kind, 768, 12) == expected


def test_dynamic_combination_count_by_construction():
    d, L = 768, 12
    assert param_count("DynamicCombination", d, L) == L * (2 * d * 4 * d + 4 * d + 4 * d * d + d)


@pytest.mark.parametrize("kind", list(FusionKind))
@pytest.mark.parametrize("d,L", [(16, 2), (64, 4), (768, 12)])
def test_param_count_matches_store(kind, d, L):
    spec = fusion_param_spec(kind, d, L)
    assert sum(math.prod(shape) for _, shape, _ in spec) == param_count(kind, d, L)
    if d <= 64:
        store = init_params(spec, 0)
        assert sum(v.size for _, v in store.items()) == param_count(kind, d, L)


def test_rsd_zero_weight_is_uniform():
    stack, _ = random_case(0, "RSD")
    w = rsd_weights(stack, {"fusion.w_alpha": np.zeros(8), "fusion.b_alpha": np.array([3.0])})
    np.testing.assert_allclose(w.weights, 0.25, rtol=0, atol=1e-15)


def test_rsd_closed_form():
    stack = make_stack([[[0.0]], [[math.log(2)]]])
    w = rsd_weights(stack, {"fusion.w_alpha": np.array([1.0]), "fusion.b_alpha": np.array([0.0])})
    np.testing.assert_allclose(w.weights, [[1 / 3, 2 / 3]], rtol=1e-14)


@given(st.integers(0, 10**6))
def test_rsd_rows_identical_iff_stacks_identical(seed):
    rng = np.random.default_rng(seed)
    reps = rng.normal(size=(3, 3, 5))
    reps[:, 1] = reps[:, 0]
    stack = make_stack(reps)
    p = {"fusion.w_alpha": rng.normal(size=5), "fusion.b_alpha": rng.normal(size=1)}
    w = rsd_weights(stack, p).weights
    assert np.array_equal(w[0], w[1])
    assert not np.allclose(w[0], w[2])


@given(st.integers(0, 10**6))
def test_rsd_region_specificity(seed):
    stack, p = random_case(seed, "RSD")
    before = rsd_weights(stack, p).weights
    reps = stack.region_reps.copy()
    reps[:, 2] = np.random.default_rng(seed + 1).normal(size=reps[:, 2].shape)
    after = rsd_weights(make_stack(reps), p).weights
    keep = [0, 1, 3]
    assert np.array_equal(before[keep], after[keep])


def test_weighted_sum_hand_case():
    stack = make_stack([[[1.0, 0.0]], [[0.0, 1.0]]])
    out = fuse_weighted_sum(stack, FusionWeights(None, np.array([[0.25, 0.75]])))
    np.testing.assert_allclose(out.vectors, [[0.25, 0.75]], rtol=0, atol=1e-15)


@given(st.integers(0, 10**6))
def test_weighted_sum_of_equal_layers(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(2, 6))
    stack = make_stack(np.broadcast_to(v, (4, 2, 6)))
    w = rng.dirichlet(np.ones(4), size=2)
    np.testing.assert_allclose(fuse_weighted_sum(stack, FusionWeights(None, w)).vectors, v, rtol=1e-13, atol=1e-14)


def test_onehot_on_top_equals_top_layer():
    stack, _ = random_case(1, "RSD")
    w = np.zeros((4, 4))
    w[:, -1] = 1
    assert np.array_equal(fuse_weighted_sum(stack, FusionWeights(None, w)).vectors, stack.region_reps[-1])
    assert np.array_equal(fuse(stack, "TopLayer", {}).vectors, stack.region_reps[-1])


def test_saturated_rsd_equals_top_layer():
    # scores grow with the layer index by 1000 per layer
    L, n = 3, 4
    rng = np.random.default_rng(0)
    reps = rng.normal(size=(L + 1, n, 5))
    reps[..., 0] = np.arange(L + 1)[:, None] * 1000.0
    stack = make_stack(reps)
    p = {"fusion.w_alpha": np.array([1.0, 0, 0, 0, 0]), "fusion.b_alpha": np.zeros(1)}
    np.testing.assert_allclose(fuse(stack, "RSD", p).vectors, fuse(stack, "TopLayer", {}).vectors,
                               rtol=0, atol=1e-9)


def test_sample_specific_single_region_matches_rsd():
    stack, p = random_case(2, "RSD", n=1)
    assert np.array_equal(sample_specific_weights(stack, p).weights, rsd_weights(stack, p).weights)
    np.testing.assert_allclose(fuse(stack, "SampleSpecific", p).vectors, fuse(stack, "RSD", p).vectors,
                               rtol=0, atol=1e-15)


@given(st.integers(0, 10**6))
def test_sample_specific_rows_equal(seed):
    stack, p = random_case(seed, "SampleSpecific")
    w = sample_specific_weights(stack, p).weights
    assert all(np.array_equal(w[0], row) for row in w)
    batched = fusion_weights(stack, "SampleSpecific", p)
    assert all(np.array_equal(batched[0], row) for row in batched)


def test_sample_specific_opposite_stacks_are_uniform():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(3, 4))
    stack = make_stack(np.stack([h, -h], axis=1))
    p = {"fusion.w_alpha": rng.normal(size=4), "fusion.b_alpha": np.zeros(1)}
    np.testing.assert_allclose(sample_specific_weights(stack, p).weights, 1 / 3, rtol=0, atol=1e-15)


def test_coarse_uniform_and_closed_form():
    stack, _ = random_case(4, "CoarseGrained", L=1)
    out = coarse_grained_fuse(stack, {"fusion.layer_scores": np.zeros(2)})
    np.testing.assert_allclose(out.vectors, stack.region_reps.mean(axis=0), rtol=1e-14, atol=1e-15)
    w = fusion_weights(stack, "CoarseGrained", {"fusion.layer_scores": np.log([1.0, 2.0])})
    np.testing.assert_allclose(w, np.tile([1 / 3, 2 / 3], (4, 1)), rtol=1e-14)


def test_fine_grained_reductions():
    stack, _ = random_case(5, "FineGrained", L=2, d=8)
    zero = fine_grained_fuse(stack, {"fusion.element_scores": np.zeros((3, 8))}).vectors
    coarse = coarse_grained_fuse(stack, {"fusion.layer_scores": np.zeros(3)}).vectors
    np.testing.assert_allclose(zero, coarse, rtol=1e-14, atol=1e-15)
    scores = np.array([0.3, -1.2, 2.0])
    fine = fine_grained_fuse(stack, {"fusion.element_scores": np.tile(scores[:, None], (1, 8))}).vectors
    np.testing.assert_allclose(fine, coarse_grained_fuse(stack, {"fusion.layer_scores": scores}).vectors,
                               rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("kind", ["CoarseGrained", "FineGrained"])
def test_static_weights_ignore_input(kind):
    _, p = random_case(6, kind)
    a, _ = random_case(7, kind)
    b, _ = random_case(8, kind)
    assert np.array_equal(fusion_weights(a, kind, p), fusion_weights(b, kind, p))


def test_routing_agreement_and_first_iteration():
    L, d = 2, 4
    rng = np.random.default_rng(9)
    proj = {"fusion.proj": np.broadcast_to(np.eye(d), (L + 1, d, d)).copy()}
    v = rng.normal(size=(3, d))
    same = make_stack(np.broadcast_to(v, (L + 1, 3, d)))
    for r in (1, 2, 5):
        np.testing.assert_allclose(dynamic_routing_fuse(same, proj, r).vectors, v, rtol=1e-13, atol=1e-14)
    stack, p = random_case(9, "DynamicRouting", L=L, d=d)
    u = np.einsum("lnd,lde->lne", stack.region_reps, p["fusion.proj"])
    np.testing.assert_allclose(dynamic_routing_fuse(stack, p, 1).vectors, u.mean(axis=0), rtol=1e-12, atol=1e-13)


def test_dynamic_combination_zero_ffn_is_residual_chain():
    stack, p = random_case(10, "DynamicCombination", L=2, d=16)
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    out = dynamic_combination_fuse(stack, zero).vectors
    assert out.shape == (4, 16)
    assert np.array_equal(out, stack.region_reps[0])
    with pytest.raises(ValueError):
        fusion_weights(stack, "DynamicCombination", p)


@pytest.mark.parametrize("kind", WEIGHTED)
@given(seed=st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_weight_rows_are_stochastic(kind, seed):
    stack, p = random_case(seed, kind)
    w = fusion_weights(stack, kind, p)
    assert np.all(w >= 0) and np.all(np.abs(w.sum(axis=1) - 1) < 1e-9)


@pytest.mark.parametrize("kind", ["RSD", "SampleSpecific", "CoarseGrained", "FineGrained", "TopLayer"])
@given(seed=st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_fused_within_layer_bounds(kind, seed):
    stack, p = random_case(seed, kind)
    out = fuse(stack, kind, p).vectors
    lo, hi = stack.region_reps.min(axis=0), stack.region_reps.max(axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_wrong_params_rejected():
    stack, p = random_case(0, "RSD")
    with pytest.raises(ValueError):
        fuse(stack, "CoarseGrained", p)
    with pytest.raises(ValueError):
        FusionKind.parse("Nope")
