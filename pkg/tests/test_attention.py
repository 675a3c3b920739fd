import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointerpatch.attention import (ConfigurationError, DeformableAttention, DenseAttention,
                                    deformable_attention, dense_attention)
from pointerpatch.sampling import bilinear_sample, grid_centers


def _identity_module(channels=1, heads=1, levels=1, points=1):
    m = DeformableAttention(channels, heads, levels, points).double()
    with torch.no_grad():
        m.sampling_offsets.weight.zero_()
        m.sampling_offsets.bias.zero_()
        m.attention_weights.weight.zero_()
        m.attention_weights.bias.zero_()
        m.value_proj.weight.copy_(torch.eye(channels))
        m.value_proj.bias.zero_()
        m.output_proj.weight.copy_(torch.eye(channels))
        m.output_proj.bias.zero_()
    return m


def test_bilinear_center_of_2x2():
    grid = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]])
    out = bilinear_sample(grid, torch.tensor([[[0.5, 0.5]]]))
    assert out.item() == pytest.approx(1.5)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_bilinear_exact_on_grid_nodes(h, w, seed):
    g = torch.randn(1, 2, h, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    centers = grid_centers(h, w, dtype=torch.float64)[None]
    out = bilinear_sample(g, centers)
    assert torch.allclose(out[0], g[0].flatten(1).T, atol=1e-12)


def test_bilinear_zero_outside():
    g = torch.ones(1, 1, 4, 4)
    out = bilinear_sample(g, torch.tensor([[[1.5, 0.5], [-0.6, 0.2], [0.5, 2.0]]]))
    assert torch.equal(out, torch.zeros(1, 3, 1))


def test_single_point_identity_reads_bilinear_value():
    m = _identity_module()
    grid = torch.arange(16, dtype=torch.float64).view(1, 1, 4, 4)
    ref = torch.tensor([[[0.3, 0.6]]], dtype=torch.float64)
    out, trace = deformable_attention(torch.zeros(1, 1, 1, dtype=torch.float64), [grid], ref, m)
    assert out.item() == pytest.approx(bilinear_sample(grid, ref).item())
    assert trace.attention_weights.item() == 1.0


def test_sampling_outside_contributes_nothing():
    m = _identity_module()
    grid = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    out, _ = m(torch.zeros(1, 1, 1, dtype=torch.float64), torch.tensor([[[1.7, 1.7]]], dtype=torch.float64), [grid])
    assert out.item() == 0.0


def test_level_and_channel_mismatch_raise():
    m = DeformableAttention(8, 2, 2, 2)
    q = torch.zeros(1, 3, 8)
    refs = torch.rand(1, 3, 2)
    with pytest.raises(ConfigurationError):
        m(q, refs, [torch.zeros(1, 8, 4, 4)])
    with pytest.raises(ConfigurationError):
        m(q, refs, [torch.zeros(1, 8, 4, 4), torch.zeros(1, 6, 2, 2)])
    with pytest.raises(ConfigurationError):
        DeformableAttention(10, 3, 1, 1)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_post_softmax_sums_to_one(levels, heads, points, seed):
    torch.manual_seed(seed)
    m = DeformableAttention(4 * heads, heads, levels, points)
    torch.nn.init.normal_(m.attention_weights.weight)
    pyr = [torch.randn(2, 4 * heads, 4, 4) for _ in range(levels)]
    _, trace = m(torch.randn(2, 5, 4 * heads), torch.rand(2, 5, 2), pyr)
    sums = trace.attention_weights.sum((-1, -2))
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    assert trace.offsets.shape == (2, heads, 5, levels, points, 2)


def test_value_gradient_matches_finite_differences():
    torch.manual_seed(1)
    m = DeformableAttention(4, 2, 1, 2).double()
    torch.nn.init.normal_(m.sampling_offsets.weight, std=0.3)
    torch.nn.init.normal_(m.attention_weights.weight)
    q = torch.randn(1, 6, 4, dtype=torch.float64)
    refs = torch.rand(1, 6, 2, dtype=torch.float64)
    grid = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)

    def f(g):
        return m(q, refs, [g])[0].pow(2).sum()

    f(grid).backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(5):
        v = torch.as_tensor(rng.normal(size=grid.shape))
        with torch.no_grad():
            fd = (f(grid + eps * v) - f(grid - eps * v)) / (2 * eps)
        an = (grid.grad * v).sum()
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-12) < 1e-3


def test_output_depends_only_on_sampled_values():
    # R covers all 4 cells of a 2x2 grid with forced offsets; no hidden state
    m = _identity_module(channels=1, points=4)
    grid = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=torch.float64)
    centers = grid_centers(2, 2, dtype=torch.float64)
    ref = torch.tensor([[[0.5, 0.5]]], dtype=torch.float64)
    with torch.no_grad():
        m.sampling_offsets.bias.copy_(((centers - 0.5) * 2).reshape(-1))  # raw offsets in cell units
    q = torch.randn(1, 1, 1, dtype=torch.float64)
    out1, _ = m(q, ref, [grid])
    out2, _ = m(q * 0, ref, [grid])
    assert out1.item() == pytest.approx(2.5)
    assert out2.item() == pytest.approx(2.5)


def test_trace_capture_does_not_change_output(tiny_model):
    x = torch.rand(2, 3, 64, 64)
    a, _ = tiny_model(x, capture=True)
    b, tr = tiny_model(x, capture=False)
    assert torch.equal(a.logits, b.logits) and torch.equal(a.boxes, b.boxes)
    assert tr == []


def test_dense_singleton_key_weight_is_one():
    m = DenseAttention(4, 2)
    _, tr = dense_attention(torch.randn(1, 3, 4), torch.randn(1, 1, 4), m)
    assert torch.equal(tr.weights, torch.ones(1, 2, 3, 1))


def test_dense_identical_keys_uniform():
    m = DenseAttention(4, 2)
    keys = torch.randn(1, 1, 4).expand(1, 5, 4)
    _, tr = m(torch.randn(1, 3, 4), keys)
    assert torch.allclose(tr.weights, torch.full((1, 2, 3, 5), 0.2))


def test_dense_weights_match_scalar_formula():
    torch.manual_seed(3)
    m = DenseAttention(4, 2).double()
    z = torch.randn(1, 1, 4, dtype=torch.float64)
    x = torch.randn(1, 3, 4, dtype=torch.float64)
    _, tr = m(z, x)
    U, Up = m.query_proj.weight, m.key_proj.weight
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        logits = [float((z[0, 0] @ U[sl].T @ Up[sl] @ x[0, k]).detach()) / math.sqrt(2) for k in range(3)]
        e = [math.exp(v) for v in logits]
        expected = [v / sum(e) for v in e]
        assert tr.weights[0, h, 0].tolist() == pytest.approx(expected, rel=1e-12)
