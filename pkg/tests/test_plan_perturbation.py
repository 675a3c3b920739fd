import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointerpatch.attack.perturbation import PerturbationState, apply_perturbation, straight_through_clamp
from pointerpatch.attack.plan import PatchPlan, PlanError, build_mask, extend_targets, make_plan

from oracles import brute_mask


def test_mask_examples():
    m = build_mask([(1, 1)], 2, (4, 4))
    assert m.sum() == 4 and m[1:3, 1:3].all()
    m = build_mask([(0, 0), (1, 1)], 2, (3, 3))
    assert m.sum() == 7
    m = build_mask([(3, 3)], 3, (4, 4))
    assert m.sum() == 1 and m[3, 3]


def test_mask_fully_outside_raises():
    with pytest.raises(PlanError):
        build_mask([(4, 0)], 2, (4, 4))
    with pytest.raises(PlanError):
        build_mask([(0, 0)], 0, (4, 4))


corner = st.tuples(st.integers(0, 11), st.integers(0, 11))


@given(st.lists(corner, min_size=0, max_size=4), st.integers(1, 5), st.integers(4, 12), st.integers(4, 12))
@settings(max_examples=200, deadline=None)
def test_mask_matches_predicate(locs, a, h, w):
    locs = [(p % h, q % w) for p, q in locs]
    assert np.array_equal(build_mask(locs, a, (h, w)), brute_mask(locs, a, (h, w)))


@given(st.integers(1, 6), st.integers(1, 8))
def test_extend_targets_round_robin(n, r):
    targets = list(range(n))
    if n > r:
        with pytest.raises(PlanError):
            extend_targets(targets, r)
        return
    ext = extend_targets(targets, r)
    assert len(ext) == r and set(ext) == set(targets)
    assert all(ext[k] == k % n for k in range(r))


def test_extend_targets_example():
    assert extend_targets(["a", "b"], 4) == ["a", "b", "a", "b"]
    assert extend_targets(["a", "b", "c"], 4) == ["a", "b", "c", "a"]


def test_plan_validation():
    frame = (32, 32)
    PatchPlan([(0.0, 0.0)], [(0.5, 0.5)], patch_edge=4).validate("CP", frame, 2)
    with pytest.raises(PlanError, match="overlaps"):
        PatchPlan([(0.0, 0.0)], [(0.05, 0.05)], patch_edge=4).validate("CP", frame, 2)
    with pytest.raises(PlanError, match="needs source"):
        PatchPlan([], [(0.5, 0.5)]).validate("IP", frame, 2)
    with pytest.raises(PlanError, match="exceed"):
        PatchPlan([], [(0.0, 0.0), (0.5, 0.5), (0.0, 0.5)], patch_edge=4).validate("SP", frame, 2)
    with pytest.raises(PlanError, match="leaves"):
        PatchPlan([], [(0.95, 0.5)], patch_edge=4).validate("SP", frame, 2)
    # ATT has no pointer budget
    PatchPlan([], [(0.0, 0.0), (0.5, 0.5), (0.0, 0.5)], patch_edge=4).validate("ATT", frame, 2)


@pytest.mark.parametrize("strategy", ["IP", "OP", "SP", "CP", "ATT"])
def test_make_plan_is_valid(strategy):
    plan = make_plan(strategy, (64, 64), num_sources=2, num_targets=2, patch_edge=6)
    plan.validate(strategy, (64, 64), 2)
    assert bool(plan.source_locations) == (strategy in ("IP", "OP", "CP"))


def test_plan_area():
    plan = PatchPlan([(0.0, 0.0)], [(0.5, 0.5)], patch_edge=4, target_edge=2)
    assert plan.area((32, 32), "CP") == 20
    assert plan.area((32, 32), "SP") == 4
    assert plan.area((32, 32), "IP") == 16


def _state(h=4, w=4):
    e = torch.full((3, h, w), 0.5)
    f = torch.full((3, h, w), -0.25)
    m = torch.zeros(h, w)
    m[0, 0] = 1
    n = torch.zeros(h, w)
    n[3, 3] = 1
    return PerturbationState(e, f, m, n)


def test_apply_perturbation_examples():
    x = torch.full((1, 3, 4, 4), 0.6)
    s = _state()
    ip = apply_perturbation(x, s, "IP")
    assert torch.allclose(ip[0, :, 0, 0], torch.ones(3))            # 1.1 clamped
    assert torch.allclose(ip[0, :, 3, 3], torch.full((3,), 0.6))
    sp = apply_perturbation(x, s, "SP")
    assert torch.allclose(sp[0, :, 3, 3], torch.full((3,), 0.35))
    assert torch.allclose(sp[0, :, 0, 0], torch.full((3,), 0.6))
    cp = apply_perturbation(x, s, "CP")
    assert torch.allclose(cp[0, :, 0, 0], torch.ones(3)) and torch.allclose(cp[0, :, 3, 3], torch.full((3,), 0.35))


def test_outside_masks_bit_exact():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 4, 4, generator=g)
    s = _state()
    s.source_frame = torch.randn(3, 4, 4, generator=g) * 5
    out = apply_perturbation(x, s, "CP")
    region = (s.source_mask + s.target_mask).bool()
    assert torch.equal(out[..., ~region], x[..., ~region])


def test_overlapping_masks_rejected():
    s = _state()
    s.target_mask = s.source_mask.clone()
    with pytest.raises(PlanError):
        apply_perturbation(torch.zeros(1, 3, 4, 4), s, "CP")


def test_non_binary_mask_rejected():
    with pytest.raises(ValueError):
        PerturbationState(None, None, torch.full((2, 2), 0.5), None)


def test_straight_through_gradient_is_identity():
    x = torch.tensor([-1.0, 0.5, 2.0], requires_grad=True)
    y = straight_through_clamp(x)
    y.sum().backward()
    assert torch.equal(y.detach(), torch.tensor([0.0, 0.5, 1.0]))
    assert torch.equal(x.grad, torch.ones(3))
