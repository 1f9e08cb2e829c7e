"""Randomised gradient checks for every differentiable piece of the stack.

Each case draws a configuration away from clamps and kinks, then compares
the analytic gradient (tape or hand-written backward) with central
differences. Used by the ``gradcheck`` subcommand and the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import predictor as P
from .core import BalanceState, ScalerConfig, bound_scale

TINY_CFG = ScalerConfig(hidden_dim=4, ffn_dim=4, tokens=2, conv_layers=1)
KINK_MARGIN = 1e-2


@dataclass
class CaseResult:
    kind: str
    index: int
    report: ad.GradReport

    @property
    def ok(self) -> bool:
        return self.report.ok


def _case_scale_loss(rng, tau=2.0):
    r = rng.uniform(0.05, 0.95)
    phi = rng.uniform(0.1, 0.95) * tau
    return ad.gradcheck(lambda v: L.scale_loss(v[1], v[0], tau), [phi, r], names=["phi", "r'"])


def _case_pareto(rng, tau=2.0, n_scales=5):
    n_img = int(rng.integers(1, 6))
    n_box = int(rng.integers(1, 21))
    r = rng.uniform(0.05, 0.95, n_box)
    sidx = rng.integers(0, n_scales, n_box)
    iidx = rng.integers(0, n_img, n_box)
    phi0 = rng.uniform(0.1, 0.95, n_img) * tau

    def f(phi):
        return L.pareto_scale_loss(r, sidx, iidx, phi, tau, n_scales)

    def g(phi):
        return L.pareto_scale_loss(r, sidx, iidx, phi, tau, n_scales, return_grad=True)[1]

    return ad.gradcheck(f, phi0, grad_fn=g, names=[f"phi{i}" for i in range(n_img)])


def _case_balance_after(rng, state=BalanceState()):
    while True:
        d, u = rng.uniform(0.05, 0.95, 2)
        if abs(d - u) < KINK_MARGIN:
            continue  # f_sub switches its argmin at d == u
        target = L.balance_target_after_avg(d, u, state)
        gamma = rng.uniform(2.0, 12.0)
        if abs(gamma - target) > 0.1:
            break

    def f(v):
        g, dd, uu = v
        return abs(g - L.balance_target_after_avg(dd, uu, state))

    return ad.gradcheck(f, [gamma, d, u], names=["gamma", "L_d", "L_u"])


def _case_balance_before(rng, state=BalanceState()):
    n = int(rng.integers(2, 20))
    is_up = rng.permutation(np.arange(n) < rng.integers(1, n))
    box = rng.uniform(0.05, 0.95, n)
    target = L.balance_target_before_avg(box, is_up, state)
    gamma = target + rng.choice([-1, 1]) * rng.uniform(0.2, 4.0)

    def f(v):
        return L.balance_loss_before_avg(box, is_up, state, gamma=v[0])[0]

    return ad.gradcheck(f, [gamma], names=["gamma"])


def _case_two_stage(rng):
    n = int(rng.integers(2, 4))
    point = np.concatenate([rng.uniform(0.05, 2.0, n), rng.uniform(0.05, 2.0, n)])

    def f(v):
        return L.two_stage_compose(v[n:], v[:n])

    names = [f"loc{i}" for i in range(n)] + [f"bal{i}" for i in range(n)]
    return ad.gradcheck(f, point, names=names)


def _case_total(rng):
    if rng.random() < 0.5:
        point = rng.uniform(0.05, 2.0, 4)
        return ad.gradcheck(lambda v: L.total_loss(*v), point, names=["cls", "loc", "ps", "bal"])
    n = int(rng.integers(2, 4))
    point = rng.uniform(0.05, 2.0, 2 + 2 * n)

    def f(v):
        return L.total_loss(v[0], v[2:2 + n], v[1], v[2 + n:], "two-stage")

    names = ["cls", "ps"] + [f"loc{i}" for i in range(n)] + [f"bal{i}" for i in range(n)]
    return ad.gradcheck(f, point, names=names)


def _case_predictor(rng, cfg=TINY_CFG):
    seed = int(rng.integers(0, 2**31))
    while True:
        params = P.init(seed, cfg)
        x = rng.normal(size=P.N_FEATURES)
        raw, _ = P.forward_raw(params, x)
        # keep sigma(raw) clear of the tau/10 floor where the bound has a kink
        s = 1.0 / (1.0 + np.exp(-raw[0]))
        if s > cfg.tau / 10.0 + 0.05:
            break
        seed += 1

    def f(flat):
        return float(P.forward(x, params.with_flat(flat)))

    def g(flat):
        _, grads = P.value_and_grad(params.with_flat(flat), x, np.ones(1))
        return np.concatenate([grads[k].ravel() for k in params.names()])

    return ad.gradcheck(f, params.flat(), grad_fn=g)


def _case_predictor_tape(rng, cfg=TINY_CFG):
    """Tape twin against finite differences; also pins it to the numpy forward."""
    seed = int(rng.integers(0, 2**31))
    while True:
        params = P.init(seed, cfg)
        x = rng.normal(size=P.N_FEATURES)
        raw, _ = P.forward_raw(params, x)
        if 1.0 / (1.0 + np.exp(-raw[0])) > cfg.tau / 10.0 + 0.05:
            break
        seed += 1

    def f(v):
        return P.forward_tape(P.nest(params, v), x, cfg)

    rep = ad.gradcheck(f, params.flat())
    twin = ad.value(f(list(params.flat())))
    ref = float(bound_scale(raw, cfg)[0])
    if abs(twin - ref) > 1e-12 * max(1.0, abs(ref)):
        rep.rel_error = np.append(rep.rel_error, np.inf)
        rep.names = list(rep.names) + ["twin-vs-numpy"]
    return rep


CASES = {
    "scale_loss": _case_scale_loss,
    "pareto_scale_loss": _case_pareto,
    "balance_after_avg": _case_balance_after,
    "balance_before_avg": _case_balance_before,
    "two_stage": _case_two_stage,
    "total_loss": _case_total,
    "predictor": _case_predictor,
    "predictor_tape": _case_predictor_tape,
}


def run_suite(seed=0, n_configs=100, kinds=None) -> list[CaseResult]:
    """``n_configs`` random cases cycling through ``kinds`` (all by default)."""
    rng = np.random.default_rng(seed)
    kinds = list(kinds or CASES)
    out = []
    for i in range(n_configs):
        kind = kinds[i % len(kinds)]
        out.append(CaseResult(kind, i, CASES[kind](rng)))
    return out


def summary_table(results) -> str:
    lines = [f"{'case':>4} {'kind':<20} {'params':>6} {'max_rel_err':>12} status"]
    for r in results:
        rep = r.report
        lines.append(f"{r.index:>4} {r.kind:<20} {rep.analytic.size:>6} "
                     f"{rep.max_rel_error:12.3e} {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
