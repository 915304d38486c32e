import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.func import functional_call

from ugmae.backbone import Backbone
from ugmae.errors import ShapeMismatch
from ugmae.momentum import EmaShadow, ema_update, init_shadow, momentum_forward


def _backbone(seed=0, d=5):
    torch.manual_seed(seed)
    return Backbone(d, hidden_dim=8).double()


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_init_is_an_exact_copy(small_graph):
    bb = _backbone()
    shadow = init_shadow(bb.encoder)
    assert _same(shadow, bb.encoder)
    assert all(not p.requires_grad for p in shadow.parameters())
    assert all(p.requires_grad for p in bb.encoder.parameters())


def test_source_mutation_does_not_leak():
    bb = _backbone()
    shadow = init_shadow(bb.encoder)
    before = [p.clone() for p in shadow.parameters()]
    with torch.no_grad():
        for p in bb.encoder.parameters():
            p.add_(1.0)
    assert all(torch.equal(a, b) for a, b in zip(before, shadow.parameters()))


def test_tau_one_keeps_the_copy():
    bb = _backbone()
    shadow = init_shadow(bb.encoder, tau=1.0)
    before = [p.clone() for p in shadow.parameters()]
    with torch.no_grad():
        for p in bb.encoder.parameters():
            p.mul_(-3.0)
    ema_update(shadow, bb.encoder)
    assert all(torch.equal(a, b) for a, b in zip(before, shadow.parameters()))


def test_tau_zero_copies_the_source():
    a, b = _backbone(0), _backbone(1)
    shadow = init_shadow(a.encoder)
    ema_update(shadow, b.encoder, tau=0.0)
    assert _same(shadow, b.encoder)


def test_scalar_recurrence():
    src = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        src.weight.fill_(1.0)
    shadow = init_shadow(src, tau=0.9)
    with torch.no_grad():
        src.weight.fill_(0.0)
    ema_update(shadow, src)
    assert shadow.module.weight.item() == pytest.approx(0.9, abs=1e-15)


def test_shape_mismatch():
    shadow = init_shadow(torch.nn.Linear(3, 2))
    with pytest.raises(ShapeMismatch):
        ema_update(shadow, torch.nn.Linear(3, 4))
    with pytest.raises(ShapeMismatch):
        ema_update(shadow, torch.nn.Linear(3, 2, bias=False))


def test_invalid_tau():
    with pytest.raises(ValueError):
        EmaShadow(torch.nn.Linear(1, 1), tau=1.5)
    with pytest.raises(ValueError):
        ema_update(init_shadow(torch.nn.Linear(1, 1)), torch.nn.Linear(1, 1), tau=-0.1)


def test_fresh_shadow_forward_matches_bitwise(small_graph):
    bb = _backbone()
    enc, dec = init_shadow(bb.encoder), init_shadow(bb.decoder)
    x = small_graph.features
    h = momentum_forward(enc, small_graph.edges, x)
    assert torch.equal(h, bb.encoder(small_graph.edges, x))
    assert torch.equal(momentum_forward(dec, small_graph.edges, h), bb.decoder(small_graph.edges, h))


def test_momentum_output_is_detached(small_graph):
    bb = _backbone()
    shadow = init_shadow(bb.encoder)
    for p in shadow.parameters():
        p.requires_grad_(True)  # even if someone flips the flag, no graph is recorded
    x = small_graph.features.clone().requires_grad_(True)
    out = shadow(small_graph.edges, x)
    assert not out.requires_grad and out.grad_fn is None


def test_midpoint_parameters_after_half_update(small_graph):
    a, b = _backbone(0), _backbone(7)
    shadow = init_shadow(a.encoder)
    ema_update(shadow, b.encoder, tau=0.5)
    mid = {k: 0.5 * v.detach() + 0.5 * dict(b.encoder.named_parameters())[k].detach()
           for k, v in a.encoder.named_parameters()}
    expect = functional_call(a.encoder, mid, (small_graph.edges, small_graph.features))
    got = momentum_forward(shadow, small_graph.edges, small_graph.features)
    assert torch.allclose(got, expect, atol=1e-14, rtol=0)


@settings(max_examples=50, deadline=None)
@given(tau=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_gap_shrinks_by_tau(tau, seed):
    g = torch.Generator().manual_seed(seed)
    src = torch.nn.Linear(4, 3).double()
    shadow = init_shadow(src)
    with torch.no_grad():
        for p in src.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
    gap = [(s - p).abs().max().item() for s, p in zip(shadow.parameters(), src.parameters())]
    ema_update(shadow, src, tau=tau)
    new = [(s - p).abs().max().item() for s, p in zip(shadow.parameters(), src.parameters())]
    for g0, g1 in zip(gap, new):
        assert g1 == pytest.approx(tau * g0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(taus=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), seed=st.integers(0, 10_000))
def test_entries_stay_in_convex_hull_of_history(taus, seed):
    g = torch.Generator().manual_seed(seed)
    src = torch.nn.Linear(3, 2).double()
    shadow = init_shadow(src)
    history = [torch.cat([p.detach().flatten() for p in src.parameters()])]
    for tau in taus:
        with torch.no_grad():
            for p in src.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
        history.append(torch.cat([p.detach().flatten() for p in src.parameters()]))
        ema_update(shadow, src, tau=tau)
    hist = torch.stack(history)
    s = torch.cat([p.flatten() for p in shadow.parameters()])
    assert torch.all(s >= hist.min(0).values - 1e-12) and torch.all(s <= hist.max(0).values + 1e-12)


def test_no_optimizer_state_on_shadow(small_graph):
    from ugmae.trainer import TrainConfig, build_state

    state = build_state(TrainConfig(epochs=1, hidden_dim=8, dtype="float64"), 5)
    shadow_ids = {id(p) for s in state.shadows for p in s.parameters()}
    opt_ids = {id(p) for grp in state.optimizer.param_groups for p in grp["params"]}
    assert not shadow_ids & opt_ids
