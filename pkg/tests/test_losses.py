import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyra import autodiff as ad
from dyra import losses as L
from dyra.core import BalanceState, DomainError

STATE = BalanceState()


def brute_pareto(r, sidx, iidx, phi, tau, n_scales):
    """Loop-by-loop reference: per image, sum over scales of the mean per-box ScaleLoss."""
    per_image = []
    for i in range(len(phi)):
        q = min(max(phi[i] / tau, 1e-7), 1 - 1e-7)
        total, any_box = 0.0, False
        for s in range(n_scales):
            vals = [-(r[b] * math.log(q) + (1 - r[b]) * math.log(1 - q))
                    for b in range(len(r)) if iidx[b] == i and sidx[b] == s]
            if vals:
                any_box = True
                total += sum(vals) / len(vals)
        if any_box:
            per_image.append(total)
    return sum(per_image) / len(per_image) if per_image else 0.0


# ---------------------------------------------------------------- ScaleLoss


def test_scale_loss_hand_value():
    # r' = 0.5, phi/tau = 0.5: -log(0.5)
    assert L.scale_loss(0.5, 1.0, 2.0) == pytest.approx(math.log(2.0), rel=1e-15)


def test_scale_loss_minimiser_is_r_tau():
    for r in (0.1, 0.37, 0.8):
        grid = np.linspace(0.001, 2.0, 20001)
        vals = L.scale_loss(np.full_like(grid, r), grid, 2.0)
        assert grid[np.argmin(vals)] == pytest.approx(r * 2.0, abs=2e-4)


def test_scale_loss_domain():
    with pytest.raises(DomainError):
        L.scale_loss(0.5, 0.0, 2.0)
    with pytest.raises(DomainError):
        L.scale_loss(0.5, 2.5, 2.0)
    with pytest.raises(DomainError):
        L.scale_loss(np.array([0.5]), np.array([-1.0]), 2.0)


def test_scale_loss_finite_at_tau():
    # phi = tau is reachable; the clamp keeps the log finite
    assert math.isfinite(L.scale_loss(0.3, 2.0, 2.0))


def test_scale_loss_nodes_match_floats():
    tape = ad.Tape()
    phi = tape.var(1.3)
    assert L.scale_loss(0.4, phi, 2.0).value == L.scale_loss(0.4, 1.3, 2.0)


# ---------------------------------------------------------------- ParetoScaleLoss


def test_pareto_hand_case():
    # one image, two boxes at one scale, one at another
    r = np.array([0.2, 0.6, 0.5])
    phi = np.array([1.0])
    got = L.pareto_scale_loss(r, [1, 1, 3], [0, 0, 0], phi, 2.0, 5)
    want = math.log(2.0) + math.log(2.0)  # q = 0.5 makes every term log 2
    assert got == pytest.approx(want, rel=1e-15)


def test_pareto_images_without_boxes_ignored():
    r = np.array([0.5])
    assert L.pareto_scale_loss(r, [0], [1], np.array([0.3, 1.0, 0.7]), 2.0, 5) == pytest.approx(math.log(2))
    loss, g = L.pareto_scale_loss(r, [0], [1], np.array([0.3, 1.0, 0.7]), 2.0, 5, return_grad=True)
    assert g[0] == 0.0 and g[2] == 0.0


def test_pareto_empty_batch():
    assert L.pareto_scale_loss([], [], [], np.array([1.0]), 2.0, 5) == 0.0


def test_pareto_domain():
    with pytest.raises(DomainError):
        L.pareto_scale_loss([0.5], [7], [0], np.array([1.0]), 2.0, 5)
    with pytest.raises(DomainError):
        L.pareto_scale_loss([0.5], [0], [0], np.array([0.0]), 2.0, 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pareto_matches_brute_force(seed):
    g = np.random.default_rng(seed)
    n_img, n_box = int(g.integers(1, 6)), int(g.integers(0, 21))
    r = g.uniform(0, 1, n_box)
    s = g.integers(0, 5, n_box)
    i = g.integers(0, n_img, n_box)
    phi = g.uniform(0.4, 2.0, n_img)
    got = L.pareto_scale_loss(r, s, i, phi, 2.0, 5)
    assert abs(got - brute_pareto(r, s, i, phi, 2.0, 5)) <= 1e-12


def test_pareto_terms_backends_agree(backend, rng):
    from dyra import _kernels_py
    for _ in range(20):
        n = int(rng.integers(1, 40))
        args = (rng.uniform(0, 1, n), rng.integers(0, 5, n).astype(np.int64),
                rng.integers(0, 6, n).astype(np.int64), rng.uniform(0.4, 2.0, 6), 2.0, 5)
        for a, b in zip(backend.pareto_terms(*args), _kernels_py.pareto_terms(*args)):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


# ---------------------------------------------------------------- normalisation


def test_f_norm_hand_values():
    np.testing.assert_allclose(L.f_norm([0.8, 0.4]), [0.75, 0.25], rtol=1e-12)
    np.testing.assert_allclose(L.f_norm([0.9, 0.1]), [0.9, 0.1], rtol=1e-12)


def test_f_norm_clamps_at_one():
    w = L.f_norm([1.0, 0.0])
    assert all(math.isfinite(v) for v in w)
    assert sum(w) == pytest.approx(1.0)


def test_f_sub_hand():
    assert L.f_sub([0.75, 0.25]) == [2.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6))
def test_normalisation_properties(x):
    w = L.f_norm(x)
    assert abs(sum(w) - 1.0) <= 1e-12
    assert min(L.f_sub(w)) == 1.0
    mm = L.min_max_plus_one(x)
    assert mm.min() >= 1.0 and mm.max() <= 2.0


def test_min_max_plus_one():
    np.testing.assert_array_equal(L.min_max_plus_one([0.2, 0.6, 1.0]), [1.0, 1.5, 2.0])
    np.testing.assert_array_equal(L.min_max_plus_one([0.3, 0.3]), [1.5, 1.5])
    with pytest.raises(DomainError):
        L.min_max_plus_one([])


# ---------------------------------------------------------------- BalanceLoss


def test_balance_target_equal_losses_is_6_8():
    for v in (0.0, 0.3, 0.9):
        assert L.balance_target_after_avg(v, v, STATE) == pytest.approx(6.8, rel=1e-14)


def test_balance_target_dominant_down_group():
    # f_norm -> (0.75, 0.25), f_sub -> (2, 1); (2*64^2 + 256^2) / (2*5120)
    assert L.balance_target_after_avg(0.8, 0.4, STATE) == pytest.approx(7.2, rel=1e-14)
    assert L.balance_target_after_avg(0.4, 0.8, STATE) == pytest.approx(13.2, rel=1e-14)


def test_group_split_threshold():
    split = L.GroupSplit.from_boxes([34815.0, 34816.0, 100.0], [0.1, 0.2, 0.3], STATE)
    np.testing.assert_array_equal(split.is_up, [True, False, True])
    assert split.means() == (0.2, pytest.approx(0.2))


def test_balance_loss_after_avg_value_and_grad():
    split = L.GroupSplit(np.array([True, False]), np.array([0.4, 0.8]))
    loss, target = L.balance_loss_after_avg(split, STATE, gamma=6.0)
    assert target == pytest.approx(7.2)
    assert loss == pytest.approx(1.2)
    tape = ad.Tape()
    g = tape.var(6.0)
    node, _ = L.balance_loss_after_avg(split, STATE, gamma=g)
    assert tape.backward(node)[g.index] == -1.0


def test_balance_loss_empty_group():
    split = L.GroupSplit(np.array([True, True]), np.array([0.4, 0.8]))
    loss, target = L.balance_loss_after_avg(split, STATE, gamma=5.0)
    assert loss == 0.0 and target == 5.0


def test_balance_before_avg_hand():
    # Min-Max+1 -> (1, 1.5, 2); up mean 1, down mean 1.75
    t = L.balance_target_before_avg([0.2, 0.6, 1.0], [True, False, False], STATE)
    assert t == pytest.approx((1.75 * 4096 + 65536) / 10240, rel=1e-14)
    loss, _ = L.balance_loss_before_avg([0.2, 0.6, 1.0], [True, False, False], STATE, gamma=7.0)
    assert loss == pytest.approx(0.1)


def test_balance_before_avg_constant_losses():
    t = L.balance_target_before_avg([0.4] * 4, [True, False, True, False], STATE)
    assert t == pytest.approx(1.5 * (4096 + 65536) / 10240)


def test_balance_variant_dispatch():
    split = L.GroupSplit(np.array([True, False, False]), np.array([0.2, 0.6, 1.0]))
    a, _ = L.balance_loss(split, STATE, "before_avg", 7.0)
    b, _ = L.balance_loss_before_avg(split.loc_losses, split.is_up, STATE, 7.0)
    assert a == b
    with pytest.raises(ValueError):
        L.balance_loss(split, STATE, "sideways")


# ---------------------------------------------------------------- composition


def test_two_stage_compose():
    assert L.two_stage_compose([2.0, 3.0], [0.5, 0.1]) == pytest.approx(1.3)
    assert L.two_stage_compose([2.0, 3.0], [0.5, 0.1], weighted=False) == 5.0
    with pytest.raises(ValueError):
        L.two_stage_compose([1.0], [1.0, 2.0])


def test_total_loss_modes():
    assert L.total_loss(1.0, 2.0, 0.5, 0.25) == pytest.approx(1 + 2 + 2 * 0.75)
    got = L.total_loss(1.0, [0.5, 0.1], 2.0, [2.0, 3.0], "two-stage")
    assert got == pytest.approx(1 + 0.6 + 0.6 * 2.0 + 1.3)
    with pytest.raises(ValueError):
        L.total_loss(1, 1, 1, 1, "three-stage")


def test_evaluate_case_one_stage():
    case = {
        "l_cls": 0.5,
        "images": [
            {"phi": 1.0, "boxes": [{"width": 50, "height": 50, "loc_loss": 0.4},
                                   {"width": 300, "height": 300, "loc_loss": 0.8}]},
            {"phi": 1.5, "boxes": []},
        ],
    }
    rep = L.evaluate_case(case, STATE, 2.0)
    assert rep.l_loc == [pytest.approx(0.6)]
    assert rep.bal_targets[0] == pytest.approx(7.2)
    assert rep.l_bal == pytest.approx(0.4)
    # phi/tau = 0.5: every box contributes log 2, two scales occupied
    assert rep.l_ps == pytest.approx(2 * math.log(2))
    assert rep.l_total == pytest.approx(rep.recompute_total())
    assert rep.to_dict()["stage_mode"] == "one-stage"


def test_evaluate_case_two_stage():
    case = {
        "stage_mode": "two-stage",
        "images": [{"phi": 1.0, "boxes": [{"width": 50, "height": 50, "loc_loss": [0.4, 0.2]},
                                          {"width": 300, "height": 300, "loc_loss": [0.8, 0.2]}]}],
    }
    rep = L.evaluate_case(case, STATE, 2.0)
    assert rep.l_loc == [pytest.approx(0.6), pytest.approx(0.2)]
    assert rep.l_total == pytest.approx(rep.recompute_total())
    assert rep.l_bal == pytest.approx(0.6 * rep.l_bal_per_stage[0] + 0.2 * rep.l_bal_per_stage[1])


def test_evaluate_case_rejects_ragged_stages():
    case = {"stage_mode": "two-stage", "images": [{"phi": 1.0, "boxes": [
        {"width": 5, "height": 5, "loc_loss": [0.1, 0.2]}, {"width": 5, "height": 5, "loc_loss": [0.1]}]}]}
    with pytest.raises(ValueError):
        L.evaluate_case(case, STATE, 2.0)
