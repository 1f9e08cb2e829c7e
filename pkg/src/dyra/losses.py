"""ScaleLoss, ParetoScaleLoss, both BalanceLoss variants and total-loss assembly.

Scalar functions here accept floats or :class:`~dyra.autodiff.Node` values,
so they can be differentiated on a tape. Batched ParetoScaleLoss runs on the
kernel backend selected in :mod:`dyra._accel`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from ._accel import kernels
from .core import (
    BalanceState,
    DomainError,
    ScaleSet,
    assign_scale,
    size_ratio,
)

PHI_EPS = 1e-7
GROUP_LOSS_MAX = 1.0 - 1e-6
N_GROUPS = 2


def scale_loss(r_prime, phi, tau):
    """BCE-shaped loss tying phi/tau to r'; minimised at phi = r' * tau.

    phi/tau is clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    if isinstance(phi, np.ndarray) or isinstance(r_prime, np.ndarray):
        phi_a = np.asarray(phi, dtype=np.float64)
        r = np.asarray(r_prime, dtype=np.float64)
        if np.any(phi_a <= 0) or np.any(phi_a > tau):
            raise DomainError("phi outside (0, tau]")
        q = np.clip(phi_a / tau, PHI_EPS, 1.0 - PHI_EPS)
        return -(r * np.log(q) + (1.0 - r) * np.log(1.0 - q))
    pv = ad.value(phi)
    if not (0.0 < pv <= tau):
        raise DomainError(f"phi={pv} outside (0, {tau}]")
    q = ad.clip(phi / tau, PHI_EPS, 1.0 - PHI_EPS)
    return -(r_prime * ad.log(q) + (1.0 - r_prime) * ad.log(1.0 - q))


def pareto_scale_loss(r_prime, scale_index, image_index, phi, tau, n_scales,
                      return_grad=False):
    """Batch ParetoScaleLoss.

    For each image the loss is ``-log prod_i exp(-mean_{b in B_i} L_scale)``,
    i.e. the sum over occupied scales of the per-scale mean ScaleLoss; the
    batch value is the mean over images that own at least one box.

    With ``return_grad`` also returns d loss / d phi for every image
    (zero for box-less images).
    """
    r_prime = np.ascontiguousarray(r_prime, dtype=np.float64)
    scale_index = np.ascontiguousarray(scale_index, dtype=np.int64)
    image_index = np.ascontiguousarray(image_index, dtype=np.int64)
    phi = np.ascontiguousarray(np.atleast_1d(phi), dtype=np.float64)
    if np.any(phi <= 0) or np.any(phi > tau) or not np.all(np.isfinite(phi)):
        raise DomainError("phi outside (0, tau]")
    if r_prime.size and (scale_index.min() < 0 or scale_index.max() >= n_scales):
        raise DomainError("scale index out of range")
    per_loss, per_grad, per_count = kernels.pareto_terms(
        r_prime, scale_index, image_index, phi, float(tau), int(n_scales)
    )
    active = per_count > 0
    k = int(active.sum())
    if k == 0:
        loss = 0.0
        g = np.zeros_like(phi)
    else:
        # fixed index order for reproducibility
        loss = float(np.sum(per_loss[active])) / k
        g = np.where(active, per_grad / k, 0.0)
    if return_grad:
        return loss, g
    return loss


def f_norm(x: Sequence):
    """Softmax-like weights with 1/(1-x) in place of exp(x); inputs clamped to [0, 1-1e-6]."""
    w = [1.0 / (1.0 - ad.clip(v, 0.0, GROUP_LOSS_MAX)) for v in x]
    total = ad.sum_(w)
    return [wi / total for wi in w]


def f_sub(x: Sequence):
    """Scale by the component count and shift so that the minimum is exactly one."""
    n = len(x)
    scaled = [v * n for v in x]
    lo = min(scaled, key=ad.value)
    return [s - lo + 1.0 for s in scaled]


def min_max_plus_one(losses) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if x.size == 0:
        raise DomainError("min-max normalisation of an empty sequence")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full(x.shape, 1.5)
    return (x - lo) / (hi - lo) + 1.0


@dataclass
class GroupSplit:
    """Boxes split at the range mean: ``up`` below it, ``down`` at or above it."""

    is_up: np.ndarray
    loc_losses: np.ndarray

    @classmethod
    def from_boxes(cls, areas, loc_losses, state: BalanceState):
        areas = np.asarray(areas, dtype=np.float64)
        return cls(areas < state.split_area(), np.asarray(loc_losses, dtype=np.float64))

    @property
    def up_count(self) -> int:
        return int(self.is_up.sum())

    @property
    def down_count(self) -> int:
        return int(self.is_up.size - self.is_up.sum())

    @property
    def up_sum(self) -> float:
        return float(np.sum(self.loc_losses[self.is_up]))

    @property
    def down_sum(self) -> float:
        return float(np.sum(self.loc_losses[~self.is_up]))

    @property
    def both_occupied(self) -> bool:
        return self.up_count > 0 and self.down_count > 0

    def means(self):
        """(mean down-group loss, mean up-group loss)."""
        return self.down_sum / self.down_count, self.up_sum / self.up_count


def _project(weights, state: BalanceState):
    w_d, w_u = weights
    return (w_d * state.m_lower + w_u * state.m_upper) / (N_GROUPS * state.s_ap_mean())


def balance_target_after_avg(mean_down, mean_up, state: BalanceState):
    return _project(f_sub(f_norm([mean_down, mean_up])), state)


def balance_loss_after_avg(split: GroupSplit, state: BalanceState, gamma=None):
    """BalanceLoss normalising after per-group averaging: ``(|gamma - target|, target)``.

    ``gamma`` defaults to ``state.gamma`` and may be a tape node; the group
    losses are constants. An empty group yields zero loss and target gamma.
    """
    g = state.gamma if gamma is None else gamma
    if not split.both_occupied:
        return 0.0 * g, ad.value(g)
    d, u = split.means()
    target = balance_target_after_avg(d, u, state)
    return abs(g - target), target


def balance_target_before_avg(box_losses, is_up, state: BalanceState):
    norm = min_max_plus_one(box_losses)
    is_up = np.asarray(is_up, dtype=bool)
    w_d = float(np.sum(norm[~is_up])) / int((~is_up).sum())
    w_u = float(np.sum(norm[is_up])) / int(is_up.sum())
    return _project((w_d, w_u), state)


def balance_loss_before_avg(box_losses, is_up, state: BalanceState, gamma=None):
    """BalanceLoss with Min-Max (+1) normalisation over all boxes before group averaging."""
    g = state.gamma if gamma is None else gamma
    is_up = np.asarray(is_up, dtype=bool)
    if is_up.all() or not is_up.any():
        return 0.0 * g, ad.value(g)
    target = balance_target_before_avg(box_losses, is_up, state)
    return abs(g - target), target


def balance_loss(split: GroupSplit, state: BalanceState, variant="after_avg", gamma=None):
    if variant == "after_avg":
        return balance_loss_after_avg(split, state, gamma)
    if variant == "before_avg":
        return balance_loss_before_avg(split.loc_losses, split.is_up, state, gamma)
    raise ValueError(f"unknown BalanceLoss variant {variant!r}")


def two_stage_compose(per_stage_bal: Sequence, per_stage_loc: Sequence, weighted=True):
    """-log prod_i exp(-w_i * bal_i) = sum_i w_i * bal_i, with w_i = loc_i (or 1 if unweighted)."""
    if len(per_stage_bal) != len(per_stage_loc):
        raise ValueError("per-stage sequences differ in length")
    if weighted:
        return ad.sum_(l * b for l, b in zip(per_stage_loc, per_stage_bal))
    return ad.sum_(per_stage_bal)


def total_loss(l_cls, l_loc, l_ps, l_bal, stage_mode="one-stage"):
    """Total DyRA objective.

    one-stage: ``cls + loc + loc * (PS + bal)``.
    two-stage: ``cls + sum(loc) + sum(loc) * PS + sum_i loc_i * bal_i`` with
    per-stage ``l_loc`` and ``l_bal`` sequences.
    """
    if stage_mode == "one-stage":
        return l_cls + l_loc + l_loc * (l_ps + l_bal)
    if stage_mode == "two-stage":
        loc_sum = ad.sum_(l_loc)
        return l_cls + loc_sum + loc_sum * l_ps + two_stage_compose(l_bal, l_loc)
    raise ValueError(f"unknown stage mode {stage_mode!r}")


@dataclass
class LossReport:
    l_cls: float
    l_loc: list
    l_scale_per_box: list
    l_ps: float
    l_bal: float
    l_total: float
    stage_mode: str = "one-stage"
    l_bal_per_stage: list = field(default_factory=list)
    bal_targets: list = field(default_factory=list)

    def recompute_total(self) -> float:
        if self.stage_mode == "one-stage":
            return total_loss(self.l_cls, self.l_loc[0], self.l_ps, self.l_bal)
        return total_loss(self.l_cls, self.l_loc, self.l_ps, self.l_bal_per_stage, "two-stage")

    def to_dict(self) -> dict:
        return {
            "stage_mode": self.stage_mode,
            "l_cls": self.l_cls,
            "l_loc": list(self.l_loc),
            "l_scale_per_box": list(self.l_scale_per_box),
            "l_ps": self.l_ps,
            "l_bal": self.l_bal,
            "l_bal_per_stage": list(self.l_bal_per_stage),
            "bal_targets": list(self.bal_targets),
            "l_total": self.l_total,
        }


def evaluate_case(case: dict, state: BalanceState, tau: float, scales: ScaleSet = ScaleSet(),
                  variant="after_avg") -> LossReport:
    """Assemble a LossReport from a hand-written case.

    ``case`` holds ``images``: each with ``phi`` and ``boxes`` of
    ``width``, ``height`` and ``loc_loss`` (a number, or one value per stage),
    plus optional ``l_cls`` and ``stage_mode``.
    """
    stage_mode = case.get("stage_mode", "one-stage")
    images = case["images"]
    phis = np.array([float(im["phi"]) for im in images])
    widths, heights, img_idx, loc = [], [], [], []
    for i, im in enumerate(images):
        for b in im.get("boxes", []):
            widths.append(float(b["width"]))
            heights.append(float(b["height"]))
            img_idx.append(i)
            ll = b["loc_loss"]
            loc.append([float(v) for v in ll] if isinstance(ll, (list, tuple)) else [float(ll)])
    n_stages = len(loc[0]) if loc else 1
    if any(len(v) != n_stages for v in loc):
        raise ValueError("every box needs the same number of per-stage localisation losses")
    if stage_mode == "one-stage" and n_stages != 1:
        raise ValueError("one-stage case with multi-stage localisation losses")
    areas = np.array(widths) * np.array(heights)
    img_idx = np.array(img_idx, dtype=np.int64)
    loc = np.array(loc, dtype=np.float64).reshape(len(areas), n_stages)
    _, r_prime = size_ratio(areas, state.range())
    r_prime = np.atleast_1d(r_prime)
    sidx = np.atleast_1d(assign_scale(areas, scales)) if areas.size else np.zeros(0, np.int64)
    per_box = scale_loss(r_prime, phis[img_idx], tau) if areas.size else np.zeros(0)
    l_ps = pareto_scale_loss(r_prime, sidx, img_idx, phis, tau, len(scales))
    l_loc, bal, targets = [], [], []
    for s in range(n_stages):
        l_loc.append(float(loc[:, s].mean()) if areas.size else 0.0)
        split = GroupSplit.from_boxes(areas, loc[:, s], state)
        lb, t = balance_loss(split, state, variant)
        bal.append(float(lb))
        targets.append(float(t))
    l_cls = float(case.get("l_cls", 0.0))
    if stage_mode == "one-stage":
        l_bal = bal[0]
        total = total_loss(l_cls, l_loc[0], l_ps, l_bal)
    else:
        l_bal = float(two_stage_compose(bal, l_loc))
        total = total_loss(l_cls, l_loc, l_ps, bal, "two-stage")
    return LossReport(l_cls, l_loc, [float(v) for v in per_box], l_ps, l_bal, float(total),
                      stage_mode, bal, targets)
