"""Desk-scale joint-training simulator.

A synthetic dataset of box layouts stands in for real images and a
U-shaped surrogate replaces the detector's localisation loss, so the
scale-factor network and gamma can be trained jointly in seconds.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import predictor as P
from .core import (
    BalanceState,
    DomainError,
    ScalerConfig,
    ScaleSet,
    assign_scale,
    bound_scale,
    bound_scale_grad,
    pearson,
    saturated_sigmoid,
)
from .sched import ConstCosineSchedule

BASE_SHORT_SIDE = 800
GAMMA_FLOOR = 1e-3


class DivergenceError(RuntimeError):
    def __init__(self, step, what):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class AreaDistribution:
    """Log-normal box areas: per-image centre drawn around ``log_mean``, boxes around the centre."""

    # centre ~164 px boxes: just below the default split area of 34816 at 800 short side
    log_mean: float = 10.2
    image_sigma: float = 1.1
    box_sigma: float = 1.5
    aspect_sigma: float = 0.3
    min_boxes: int = 1
    max_boxes: int = 12

    def __post_init__(self):
        if not math.isfinite(self.log_mean):
            raise DomainError("log_mean must be finite")
        if min(self.image_sigma, self.box_sigma, self.aspect_sigma) < 0:
            raise DomainError("sigmas must be non-negative")
        if not 1 <= self.min_boxes <= self.max_boxes:
            raise DomainError("need 1 <= min_boxes <= max_boxes")


@dataclass
class SyntheticImage:
    image_id: int
    width: float
    height: float
    boxes: np.ndarray  # (n, 4) x, y, w, h in pixels

    @property
    def short_side(self) -> float:
        return min(self.width, self.height)

    @property
    def areas(self) -> np.ndarray:
        return self.boxes[:, 2] * self.boxes[:, 3]

    def mean_area(self) -> float:
        return float(self.areas.mean())


def generate_dataset(seed, n_images, dist: AreaDistribution | None = None) -> list[SyntheticImage]:
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    dist = dist or AreaDistribution()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        long_side = float(rng.integers(BASE_SHORT_SIDE, 1334))
        if rng.random() < 0.5:
            W, H = long_side, float(BASE_SHORT_SIDE)
        else:
            W, H = float(BASE_SHORT_SIDE), long_side
        n = int(rng.integers(dist.min_boxes, dist.max_boxes + 1))
        centre = dist.log_mean + dist.image_sigma * rng.standard_normal()
        log_a = centre + dist.box_sigma * rng.standard_normal(n)
        log_r = dist.aspect_sigma * rng.standard_normal(n)
        w = np.minimum(np.exp(0.5 * (log_a + log_r)), W)
        h = np.minimum(np.exp(0.5 * (log_a - log_r)), H)
        x = rng.random(n) * (W - w)
        y = rng.random(n) * (H - h)
        out.append(SyntheticImage(i, W, H, np.stack([x, y, w, h], axis=1)))
    return out


@dataclass
class SurrogateDetector:
    """Localisation loss ``min(1-1e-6, k (ln(phi^2 area) - ln s_opt)^2)``."""

    s_opt: float = 128.0**2
    k: float = 0.05

    def __post_init__(self):
        if not (self.s_opt > 0 and self.k > 0):
            raise DomainError("s_opt and k must be positive")

    def loss(self, area, phi):
        d = np.log(np.asarray(phi) ** 2 * np.asarray(area)) - math.log(self.s_opt)
        return np.minimum(L.GROUP_LOSS_MAX, self.k * d * d)


@dataclass
class RunStats:
    mean_area: np.ndarray
    phi: np.ndarray
    mean: float = 0.0
    std: float = 0.0
    pearson_log_area: float = float("nan")
    pearson_reference: float = float("nan")

    def __post_init__(self):
        self.mean = float(np.mean(self.phi))
        self.std = float(np.std(self.phi))
        if self.phi.size > 1:
            self.pearson_log_area = pearson(np.log(self.mean_area), self.phi)

    def to_dict(self) -> dict:
        return {
            "n_images": int(self.phi.size),
            "mean": self.mean,
            "std": self.std,
            "pearson_log_area": self.pearson_log_area,
            "pearson_reference": self.pearson_reference,
        }


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 3000
    batch_size: int = 16
    base_lr: float = 0.02
    gamma_lr: float = 0.05
    switch_step: int | None = None
    momentum: float = 0.9
    variant: str = "after_avg"
    stage_mode: str = "one-stage"
    aug_short_side: tuple = (640, 800)
    # evenly spaced short sides cycled per image across epochs; 0 draws them uniformly
    aug_strata: int = 10
    holdout_fraction: float = 0.2
    chunk_size: int = 4
    threads: int = 1
    symmetric_groups: bool = False
    surrogates: list = field(default_factory=lambda: [SurrogateDetector()])


@dataclass
class TrainResult:
    params: P.PredictorParams
    gamma_trace: list
    trace: list  # one dict per step
    train_ids: list
    heldout_ids: list
    final_gamma: float = 0.0

    TRACE_COLUMNS = ("step", "l_ps", "l_bal", "l_loc", "l_total", "gamma", "lr")

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.TRACE_COLUMNS)
        for row in self.trace:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in self.TRACE_COLUMNS[1:]])
        return buf.getvalue()


def _inputs(images, factors, cfg: ScalerConfig):
    if cfg.input_mode == "features":
        return np.stack([
            P.box_features(im.boxes[:, 2] * f, im.boxes[:, 3] * f) for im, f in zip(images, factors)
        ])
    return np.stack([
        P.render_thumbnail(im.boxes * f, cfg.thumbnail_side) for im, f in zip(images, factors)
    ])


class _Chunked:
    """Fixed-size chunking with an order-preserving map; reductions never depend on thread count."""

    def __init__(self, chunk_size, threads):
        self.chunk_size = max(1, int(chunk_size))
        self.pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def map(self, fn, *seqs):
        if self.pool is None:
            return [fn(*a) for a in zip(*seqs)]
        return list(self.pool.map(fn, *seqs))

    def slices(self, n):
        return [slice(i, min(n, i + self.chunk_size)) for i in range(0, n, self.chunk_size)]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def predict(params: P.PredictorParams, images, factors=None, tau=None, chunk_size=4, threads=1):
    """phi for each image after rescaling its boxes by ``factors`` (default 1)."""
    cfg = params.cfg if tau is None else replace(params.cfg, tau=tau)
    factors = np.ones(len(images)) if factors is None else np.asarray(factors, dtype=np.float64)
    x = _inputs(images, factors, params.cfg)
    runner = _Chunked(chunk_size, threads)
    try:
        parts = runner.map(lambda s: P.forward_raw(params, x[s])[0], runner.slices(len(images)))
    finally:
        runner.close()
    raw = np.concatenate(parts)
    return np.atleast_1d(bound_scale(raw, cfg))


def split_ids(n, seed, holdout_fraction=0.2):
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_hold = int(round(n * holdout_fraction))
    return sorted(perm[n_hold:].tolist()), sorted(perm[:n_hold].tolist())


def train_joint(dataset, cfg: ScalerConfig, state: BalanceState, tc: TrainConfig,
                params: P.PredictorParams | None = None, scales: ScaleSet = ScaleSet()) -> TrainResult:
    """Jointly descend the predictor (through ParetoScaleLoss) and gamma (through BalanceLoss)."""
    if not dataset:
        raise ValueError("empty dataset")
    params = P.init(tc.seed, cfg) if params is None else params.copy()
    state = replace(state)
    train_ids, held_ids = split_ids(len(dataset), tc.seed, tc.holdout_fraction)
    if not train_ids:
        train_ids = list(range(len(dataset)))
    gamma = float(state.gamma)
    trace, gamma_trace = [], [gamma]
    if tc.steps <= 0:
        return TrainResult(params, gamma_trace, trace, train_ids, held_ids, gamma)

    sched_p = ConstCosineSchedule(tc.base_lr, tc.steps, tc.switch_step)
    sched_g = ConstCosineSchedule(tc.gamma_lr, tc.steps, tc.switch_step)
    rng = np.random.default_rng([tc.seed, 2])
    velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    runner = _Chunked(tc.chunk_size, tc.threads)
    order, pos, epoch = [], 0, -1
    lo, hi = tc.aug_short_side
    offsets = dict(zip(train_ids, rng.integers(0, max(1, tc.aug_strata), len(train_ids)).tolist()))
    n_stages = len(tc.surrogates)
    if tc.stage_mode == "one-stage" and n_stages != 1:
        raise ValueError("one-stage training needs exactly one surrogate")
    try:
        for step in range(tc.steps):
            batch, short = [], []
            while len(batch) < tc.batch_size:
                if pos >= len(order):
                    order = rng.permutation(train_ids).tolist()
                    pos = 0
                    epoch += 1
                i = order[pos]
                batch.append(dataset[i])
                if tc.aug_strata:
                    k = (offsets[i] + epoch) % tc.aug_strata
                    short.append(lo + (hi - lo) * (k + 0.5) / tc.aug_strata)
                else:
                    short.append(rng.uniform(lo, hi))
                pos += 1
            short = np.array(short)
            factors = short / np.array([im.short_side for im in batch])
            x = _inputs(batch, factors, cfg)

            slices = runner.slices(len(batch))
            fwd = runner.map(lambda s: P.forward_raw(params, x[s]), slices)
            raw = np.concatenate([f[0] for f in fwd])
            phi = np.atleast_1d(bound_scale(raw, cfg))

            img_idx = np.concatenate([np.full(len(im.boxes), i) for i, im in enumerate(batch)])
            areas = np.concatenate([im.areas * f * f for im, f in zip(batch, factors)])
            r_prime = 1.0 - np.atleast_1d(saturated_sigmoid(areas, state.range(gamma)))
            sidx = np.atleast_1d(assign_scale(areas, scales))
            l_ps, dps = L.pareto_scale_loss(r_prime, sidx, img_idx, phi, cfg.tau, len(scales),
                                            return_grad=True)

            state_now = replace(state, gamma=gamma)
            tape = ad.Tape()
            g_node = tape.var(gamma)
            ps_node = tape.var(l_ps)
            l_loc, bal_nodes = [], []
            for sur in tc.surrogates:
                box_loss = sur.loss(areas, phi[img_idx])
                l_loc.append(float(box_loss.mean()))
                if tc.symmetric_groups:
                    box_loss = np.full_like(box_loss, box_loss.mean())
                split = L.GroupSplit.from_boxes(areas, box_loss, state_now)
                lb, _ = L.balance_loss(split, state_now, tc.variant, gamma=g_node)
                bal_nodes.append(lb)
            if tc.stage_mode == "one-stage":
                total = L.total_loss(0.0, l_loc[0], ps_node, bal_nodes[0])
                l_bal = bal_nodes[0].value
            else:
                total = L.total_loss(0.0, l_loc, ps_node, bal_nodes, "two-stage")
                l_bal = float(ad.value(L.two_stage_compose([b.value for b in bal_nodes], l_loc)))
            adj = tape.backward(total)
            d_gamma, d_ps = adj[g_node.index], adj[ps_node.index]

            row = {"step": step, "l_ps": l_ps, "l_bal": l_bal, "l_loc": float(sum(l_loc)),
                   "l_total": total.value, "gamma": gamma, "lr": sched_p.lr_at(step)}
            for k in ("l_ps", "l_bal", "l_total"):
                if not math.isfinite(row[k]):
                    raise DivergenceError(step, k)
            trace.append(row)

            draw = d_ps * dps * np.atleast_1d(bound_scale_grad(raw, cfg))
            grads_parts = runner.map(lambda s, f: P.backward(params, f[1], draw[s]), slices, fwd)
            grads = grads_parts[0]
            for gp in grads_parts[1:]:
                grads = {k: grads[k] + gp[k] for k in grads}
            lr = sched_p.lr_at(step)
            for k, a in params.arrays.items():
                velocity[k] = tc.momentum * velocity[k] + grads[k]
                a -= lr * velocity[k]
            if not params.all_finite():
                raise DivergenceError(step, "parameters")
            gamma = max(GAMMA_FLOOR, gamma - sched_g.lr_at(step) * d_gamma)
            gamma_trace.append(gamma)
    finally:
        runner.close()
    return TrainResult(params, gamma_trace, trace, train_ids, held_ids, gamma)


def run_stats(images, phi) -> RunStats:
    return RunStats(np.array([im.mean_area() for im in images]), np.asarray(phi, dtype=np.float64))


def resolution_sweep(params: P.PredictorParams, images, sizes=(400, 640, 800, 1200),
                     tau_per_size: dict | None = None, reference=BASE_SHORT_SIDE,
                     chunk_size=4, threads=1) -> dict:
    """RunStats per initial short-side size; Pearson computed against the reference size."""
    tau_per_size = tau_per_size or {}

    def phis(size):
        factors = [size / im.short_side for im in images]
        return predict(params, images, factors, tau_per_size.get(size), chunk_size, threads)

    ref = phis(reference)
    out = {}
    for size in sizes:
        phi = ref if size == reference else phis(size)
        factors = np.array([size / im.short_side for im in images])
        st = RunStats(np.array([im.mean_area() for im in images]) * factors**2, phi)
        st.pearson_reference = pearson(phi, ref) if size != reference else 1.0
        out[size] = st
    return out


def equal_loss_splits(seed=0, n_boxes=64, loss=0.4) -> Iterator[L.GroupSplit]:
    """Endless GroupSplits with both groups occupied and every box carrying ``loss``."""
    rng = np.random.default_rng(seed)
    while True:
        n_up = int(rng.integers(1, n_boxes))
        is_up = np.arange(n_boxes) < n_up
        yield L.GroupSplit(rng.permutation(is_up), np.full(n_boxes, loss))


def gamma_equilibrium(splits: Iterator[L.GroupSplit], state: BalanceState, steps: int,
                      schedule: ConstCosineSchedule | None = None, variant="after_avg") -> list:
    """Pure gradient descent of gamma on BalanceLoss; returns the trace including the start."""
    schedule = schedule or ConstCosineSchedule(0.01, max(1, steps))
    gamma = float(state.gamma)
    trace = [gamma]
    for step in range(steps):
        split = next(splits)
        tape = ad.Tape()
        g = tape.var(gamma)
        loss, _ = L.balance_loss(split, replace(state, gamma=gamma), variant, gamma=g)
        if isinstance(loss, ad.Node):
            d = tape.backward(loss)[g.index]
        else:
            d = 0.0
        gamma = max(GAMMA_FLOOR, gamma - schedule.lr_at(step) * d)
        trace.append(gamma)
    return trace


def pl_window_means(trace, window=500, key="l_ps"):
    """Means of consecutive, non-overlapping ``window``-step blocks of a trace column."""
    v = np.array([row[key] for row in trace])
    n = len(v) // window
    return [float(v[i * window:(i + 1) * window].mean()) for i in range(n)]
