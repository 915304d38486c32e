import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from ugmae.errors import CannotSampleNegative, EmptyMaskSet, NonFiniteLoss, ShapeMismatch
from ugmae.objectives import (LossConfig, LossWeights, bootstrapping_similarity_loss, combine, consistency_loss,
                              cosine, feature_reconstruction_loss, sample_negatives, scaled_cosine_error,
                              structure_reconstruction_loss)

from oracles import central_difference, gradient_check_ok, relative_errors

T = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


@pytest.mark.parametrize("gamma", [1, 2, 3.5])
def test_sce_identical_vectors(gamma):
    assert scaled_cosine_error(T(1, 2, 3), T(1, 2, 3), gamma).item() == pytest.approx(0.0, abs=1e-15)


def test_sce_orthogonal():
    assert scaled_cosine_error(T(1, 0), T(0, 1), 1).item() == 1.0


def test_sce_hand_value():
    # cos = 24/25, (1/25)^2
    assert scaled_cosine_error(T(3, 4), T(4, 3), 2).item() == pytest.approx(0.0016, abs=1e-15)


def test_sce_zero_vectors_give_one():
    assert scaled_cosine_error(T(0, 0), T(0, 0), 3).item() == 1.0
    assert scaled_cosine_error(T(0, 0), T(1, 2), 2).item() == 1.0


def test_zero_vector_gradient_is_finite():
    x = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    z = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    scaled_cosine_error(x, z, 2).sum().backward()
    assert torch.isfinite(x.grad).all() and torch.isfinite(z.grad).all()


def test_fr_loss_examples():
    x = T(1, 0).reshape(1, 2)
    loss, per_node = feature_reconstruction_loss(x, x.clone(), [0], 2)
    assert loss.item() == 0.0
    loss, _ = feature_reconstruction_loss(x, T(0, 1).reshape(1, 2), [0], 3)
    assert loss.item() == 1.0
    X = torch.stack([T(3, 4), T(1, 0), T(5, 5)])
    Z = torch.stack([T(4, 3), T(0, 1), T(-1, 7)])
    loss, per_node = feature_reconstruction_loss(X, Z, [0, 1], 2)
    assert per_node.tolist() == pytest.approx([0.0016, 1.0], abs=1e-15)
    assert loss.item() == pytest.approx(0.5008, abs=1e-15)


def test_fr_loss_empty_mask():
    with pytest.raises(EmptyMaskSet):
        feature_reconstruction_loss(torch.ones(2, 2), torch.ones(2, 2), [], 2)


def _z_with_sims(pos, neg):
    # z_i = e_0, z_j = pos * e_0, z_j' = neg * e_0 gives <z_i,z_j>=pos, <z_i,z_j'>=neg
    return torch.stack([T(1, 0), T(pos, 0), T(neg, 0)])


@pytest.mark.parametrize("pos,neg,expected", [(5, 2, 0.0), (0.7, 0.7, 1.0), (0.2, 0.5, 1.3)])
def test_sr_edge_terms(pos, neg, expected):
    z = _z_with_sims(pos, neg)
    loss = structure_reconstruction_loss(z, torch.tensor([[0, 1]]), torch.tensor([2]))
    assert loss.item() == pytest.approx(expected, abs=1e-15)


def test_sr_is_summed_over_edges():
    z = _z_with_sims(0.2, 0.5)
    loss = structure_reconstruction_loss(z, torch.tensor([[0, 1], [0, 1]]), torch.tensor([2, 2]))
    assert loss.item() == pytest.approx(2.6, abs=1e-15)


def test_sr_needs_three_nodes():
    with pytest.raises(CannotSampleNegative):
        structure_reconstruction_loss(torch.ones(2, 2), torch.tensor([[0, 1]]), torch.tensor([0]))
    with pytest.raises(CannotSampleNegative):
        sample_negatives(torch.tensor([[0, 1]]), 2, torch.Generator())


def test_sr_kink_subgradient_is_zero():
    z = _z_with_sims(1.0, 0.0).requires_grad_(True)
    structure_reconstruction_loss(z, torch.tensor([[0, 1]]), torch.tensor([2])).backward()
    assert torch.count_nonzero(z.grad) == 0


def test_negatives_exclude_both_endpoints_and_are_uniform():
    g = torch.Generator().manual_seed(0)
    edges = torch.tensor([[1, 3]]).repeat(30_000, 1)
    neg = sample_negatives(edges, 5, g)
    counts = torch.bincount(neg, minlength=5).double() / neg.numel()
    assert counts[1] == 0 and counts[3] == 0
    assert torch.all((counts[[0, 2, 4]] - 1 / 3).abs() < 0.015)


def test_negatives_for_self_loops_exclude_the_node():
    neg = sample_negatives(torch.tensor([[2, 2]]).repeat(2000, 1), 4, torch.Generator().manual_seed(1))
    assert not (neg == 2).any()
    assert set(neg.tolist()) == {0, 1, 3}


def _unit(v):
    return v / v.norm(dim=1, keepdim=True)


def test_bs_perfect_alignment():
    a = _unit(torch.randn(5, 4, dtype=torch.float64))
    b = _unit(torch.randn(5, 4, dtype=torch.float64))
    assert bootstrapping_similarity_loss(a, b, b, a).item() == pytest.approx(-2.0, abs=1e-12)


def test_bs_orthogonal():
    e0 = T(1, 0).expand(3, 2)
    e1 = T(0, 1).expand(3, 2)
    assert bootstrapping_similarity_loss(e0, e1, e0, e1).item() == pytest.approx(0.0, abs=1e-15)


def test_bs_hand_value():
    # cos(h1p, h2*) = 0.5 and cos(h1*, h2p) = -0.25 on one node
    h1p, h2s = T(1, 0).reshape(1, 2), T(0.5, math.sqrt(0.75)).reshape(1, 2)
    h1s, h2p = T(1, 0).reshape(1, 2), T(-0.25, math.sqrt(1 - 0.0625)).reshape(1, 2)
    assert bootstrapping_similarity_loss(h1p, h2p, h1s, h2s).item() == pytest.approx(-0.25, abs=1e-15)


def test_bs_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bootstrapping_similarity_loss(torch.ones(2, 3), torch.ones(2, 3), torch.ones(2, 3), torch.ones(3, 3))


def test_bs_gradient_only_through_projections():
    tensors = [torch.randn(4, 3, dtype=torch.float64, requires_grad=True) for _ in range(4)]
    bootstrapping_similarity_loss(*tensors).backward()
    assert tensors[0].grad is not None and tensors[1].grad is not None
    assert tensors[2].grad is None and tensors[3].grad is None


def test_ca_examples():
    z = torch.randn(4, 3, dtype=torch.float64)
    assert consistency_loss(z, z.clone(), [0, 2], 2).item() == pytest.approx(0.0, abs=1e-15)
    e0 = T(1, 0, 0).expand(4, 3)
    e1 = T(0, 1, 0).expand(4, 3)
    for beta in (1, 2, 5):
        assert consistency_loss(e0, e1, [1, 3], beta).item() == 1.0
    a = torch.stack([T(3, 4), T(1, 1)])
    b = torch.stack([T(4, 3), T(1, 2)])
    assert consistency_loss(a, b, [0], 2).item() == pytest.approx(0.0016, abs=1e-15)


def test_ca_empty_mask_and_detachment():
    with pytest.raises(EmptyMaskSet):
        consistency_loss(torch.ones(2, 2), torch.ones(2, 2), [], 1)
    z = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    zs = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    consistency_loss(z, zs, [0, 1], 2).backward()
    assert zs.grad is None and z.grad is not None


def test_combine_examples():
    losses = dict(fr=0.5, sample=0.0, sr=0.25, bs=-1.0, ca=0.25)
    assert combine(losses, LossConfig()) == 0.0
    zero = LossConfig(weights=LossWeights(0, 0, 0, 0, 0))
    assert combine(dict(fr=3.0, sample=2.0, sr=1.0, bs=-1.0, ca=0.5), zero) == 0.0
    base = dict(fr=0.3, sample=1.2, sr=4.0, bs=-0.7, ca=0.1)
    w = LossWeights(0.5, 0.1, 0.25, 2.0, 1.0)
    w2 = LossWeights(1.0, 0.2, 0.5, 4.0, 2.0)
    assert combine(base, LossConfig(weights=w2)) == pytest.approx(2 * combine(base, LossConfig(weights=w)), rel=1e-15)


def test_combine_rejects_non_finite():
    with pytest.raises(NonFiniteLoss) as info:
        combine(dict(fr=float("nan"), sample=0.0, sr=0.0, bs=0.0, ca=0.0), LossConfig())
    assert "fr" in info.value.diagnostics


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
    with pytest.raises(ValueError):
        LossWeights(fr=-1)
    with pytest.raises(ValueError):
        LossConfig(alpha=0.5)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), scale_x=st.floats(0.01, 100), scale_z=st.floats(0.01, 100),
       gamma=st.sampled_from([1.0, 2.0, 3.0]))
def test_sce_is_invariant_to_positive_rescaling(seed, scale_x, scale_z, gamma):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 6, dtype=torch.float64, generator=g)
    z = torch.randn(4, 6, dtype=torch.float64, generator=g)
    a = scaled_cosine_error(x, z, gamma)
    b = scaled_cosine_error(x * scale_x, z * scale_z, gamma)
    assert torch.allclose(a, b, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.0, math.pi * 0.999), b=st.floats(0.0, math.pi * 0.999))
def test_sce_increases_with_angle(a, b):
    if abs(a - b) < 1e-6:
        return
    lo, hi = sorted((a, b))
    x = T(1.0, 0.0)
    f = lambda t: scaled_cosine_error(x, T(math.cos(t), math.sin(t)), 2.0).item()  # noqa: E731
    assert f(lo) < f(hi)


@settings(max_examples=100, deadline=None)
@given(c=st.floats(0.01, 0.99), g1=st.floats(1.0, 5.0), dg=st.floats(0.1, 3.0))
def test_larger_exponent_shrinks_the_term(c, g1, dg):
    x = T(1.0, 0.0)
    z = T(c, math.sqrt(1 - c * c))
    if (1 - c) ** (g1 + dg) == 0.0:  # both terms underflow below double precision
        return
    assert scaled_cosine_error(x, z, g1 + dg).item() < scaled_cosine_error(x, z, g1).item()


def _check(fn, tensors):
    for t in tensors:
        t.grad = None
    fn().backward()
    return relative_errors([t.grad for t in tensors], central_difference(fn, tensors))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    X = torch.randn(8, 5, dtype=torch.float64, generator=g)
    Z = torch.randn(8, 5, dtype=torch.float64, generator=g, requires_grad=True)
    Zs = torch.randn(8, 5, dtype=torch.float64, generator=g)
    H = [torch.randn(8, 4, dtype=torch.float64, generator=g, requires_grad=True) for _ in range(2)]
    Hs = [torch.randn(8, 4, dtype=torch.float64, generator=g) for _ in range(2)]
    masked = [0, 3, 5, 6]
    edges = torch.tensor([[0, 1], [1, 0], [2, 5], [5, 2], [3, 7], [7, 3], [4, 6]])
    neg = sample_negatives(edges, 8, g)
    assert gradient_check_ok(_check(lambda: feature_reconstruction_loss(X, Z, masked, 2.0)[0], [Z]))
    assert gradient_check_ok(_check(lambda: consistency_loss(Z, Zs, masked, 1.5), [Z]))
    assert gradient_check_ok(_check(lambda: bootstrapping_similarity_loss(H[0], H[1], Hs[0], Hs[1]), H))
    assert gradient_check_ok(_check(lambda: structure_reconstruction_loss(Z, edges, neg), [Z]))


def test_nan_is_not_mistaken_for_a_zero_vector():
    x = T(float("nan"), 1.0).reshape(1, 2)
    assert torch.isnan(scaled_cosine_error(x, T(1, 0).reshape(1, 2), 2)).all()
