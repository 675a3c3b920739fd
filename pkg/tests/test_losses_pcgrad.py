import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointerpatch.attack.losses import loss_att_baseline, loss_attention, loss_inward, loss_outward
from pointerpatch.attack.pcgrad import aggregate_source_gradients, pcgrad, project_conflicting
from pointerpatch.attention import DenseAttentionTrace

from conftest import fixed_trace, random_trace


def test_inward_worked_example():
    # H=1, Q=1, D=1, R=2; slot 0 pairs with target 0 and slot 1 with target 1
    tr = fixed_trace([[[[[0.0, 0.0], [1.0, 1.0]]]]])
    targets = [[0.0, 1.0], [1.0, 1.0]]
    assert loss_inward([tr], targets).item() == pytest.approx(0.5)
    assert loss_outward([tr], targets).item() == pytest.approx(-0.5)


def test_inward_sums_layers_and_heads():
    loc = [[[[[0.0, 0.0], [1.0, 1.0]]]]] * 2            # two identical heads
    tr = fixed_trace(loc)
    targets = [[0.0, 1.0], [1.0, 1.0]]
    assert loss_inward([tr, tr], targets).item() == pytest.approx(2.0)


def test_inward_target_count_checked():
    tr = fixed_trace([[[[[0.0, 0.0], [1.0, 1.0]]]]])
    with pytest.raises(ValueError):
        loss_inward([tr], [[0.0, 0.0]])


def test_attention_loss_examples():
    tr = fixed_trace([[[[[0.0, 0.0], [1.0, 1.0]]]]], scores=[1.0, 1.0])
    assert loss_attention([tr]).item() == pytest.approx(-1.0)
    tr = fixed_trace([[[[[0.0, 0.0], [1.0, 1.0]]]]], scores=[0.0, 1.0])
    assert loss_attention([tr]).item() == pytest.approx(-0.5)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=1000, deadline=None)
def test_outward_is_negated_inward(seed):
    rng = np.random.default_rng(seed)
    traces = [random_trace(rng, B=2) for _ in range(rng.integers(1, 3))]
    targets = rng.uniform(0, 1, (2, 2))
    assert loss_outward(traces, targets).item() == -loss_inward(traces, targets).item()


def test_att_baseline_sparse():
    loc = [[[[[0.1, 0.1], [0.9, 0.9]]]]]
    rect_all = [(0.0, 0.0, 1.0, 1.0)]
    assert loss_att_baseline([fixed_trace(loc)], rect_all).item() == pytest.approx(-1.0)
    assert loss_att_baseline([fixed_trace(loc)], [(0.5, 0.5, 0.6, 0.6)]).item() == 0.0
    # equal scores: half the mass lands in the lower-left box
    assert loss_att_baseline([fixed_trace(loc)], [(0.0, 0.0, 0.5, 0.5)]).item() == pytest.approx(-0.5)


def test_att_baseline_dense():
    w = torch.tensor([[[[0.5, 0.25, 0.25], [1.0, 0.0, 0.0]]]], dtype=torch.float64)   # B=1 H=1 Q=2 K=3
    coords = torch.tensor([[0.1, 0.1], [0.2, 0.2], [0.9, 0.9]], dtype=torch.float64)
    tr = DenseAttentionTrace(w, coords)
    # keys 0 and 1 inside: query masses 0.75 and 1.0, mean 0.875
    assert loss_att_baseline([tr], [(0.0, 0.0, 0.5, 0.5)]).item() == pytest.approx(-0.875)
    assert loss_att_baseline([tr], [(0.0, 0.0, 0.15, 0.15)]).item() == pytest.approx(-0.75)
    with pytest.raises(ValueError):
        loss_att_baseline([DenseAttentionTrace(w)], [(0, 0, 1, 1)])


def test_pcgrad_examples():
    g1 = torch.tensor([1.0, 0.0])
    g2 = torch.tensor([-1.0, 1.0])
    p1, p2 = project_conflicting([g1, g2], np.random.default_rng(0))
    assert torch.allclose(p1, torch.tensor([0.5, 0.5]))
    assert torch.allclose(p2, torch.tensor([0.0, 1.0]))
    # no conflict: untouched
    a, b = torch.tensor([1.0, 1.0]), torch.tensor([1.0, 0.0])
    assert torch.equal(pcgrad([a, b]), a + b)


def test_pcgrad_length_mismatch():
    with pytest.raises(ValueError):
        project_conflicting([torch.zeros(2), torch.zeros(3)])


@given(st.integers(0, 2**31 - 1), st.integers(2, 16))
@settings(max_examples=1000, deadline=None)
def test_pcgrad_pair_no_conflict_left(seed, n):
    rng = np.random.default_rng(seed)
    g1 = torch.as_tensor(rng.normal(size=n))
    g2 = torch.as_tensor(rng.normal(size=n))
    p1, p2 = project_conflicting([g1, g2], rng)
    assert float(p1 @ g2) >= -1e-9
    assert float(p2 @ g1) >= -1e-9


def test_aggregate_examples():
    a, b = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])
    mean, idx = aggregate_source_gradients([a, b], "mean")
    assert torch.equal(mean, torch.tensor([0.5, 1.5])) and idx is None
    best, idx = aggregate_source_gradients([a, b], "max_norm")
    assert torch.equal(best, b) and idx == 1
    _, idx = aggregate_source_gradients([b, b.clone()], "max_norm")
    assert idx == 0
    with pytest.raises(ValueError):
        aggregate_source_gradients([a], "median")


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
@settings(max_examples=100, deadline=None)
def test_aggregate_scale_equivariance(seed, scale):
    rng = np.random.default_rng(seed)
    grads = [torch.as_tensor(rng.normal(size=(3, 2, 2))) for _ in range(3)]
    for mode in ("mean", "max_norm"):
        g, i = aggregate_source_gradients(grads, mode)
        gs, js = aggregate_source_gradients([scale * x for x in grads], mode)
        assert i == js
        assert torch.allclose(gs, scale * g)
