"""``dyra`` command-line entry point.

Exit codes: 0 success, 1 runtime failure (structured JSON on stderr),
2 bad configuration or usage (the JSON path of the offending entry is named).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import checks, harness, imaging, ingest
from . import losses as L
from .config import OUTPUT_ENV, ConfigError, RunConfig
from .core import DomainError, ScaleSet

log = logging.getLogger("dyra")


class CheckFailed(RuntimeError):
    pass


def _clean(obj):
    """NaN and inf become null so every report is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def _emit(text, path=None):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{what} {path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc


# ------------------------------------------------------------------ commands


def cmd_losses_eval(args, cfg: RunConfig):
    case = _read_json(args.case, "case file")
    if not isinstance(case, dict) or "images" not in case:
        raise ValueError("case file needs an object with an 'images' array")
    report = L.evaluate_case(case, cfg.balance_state(), cfg["scaler"]["tau"], ScaleSet(),
                             cfg["balance"]["variant"])
    _emit(dumps(report.to_dict()), args.out)


def cmd_gradcheck(args, cfg: RunConfig):
    results = checks.run_suite(args.seed, args.n_configs)
    text = checks.summary_table(results)
    if args.verbose:
        text += "\n" + "\n\n".join(f"[{r.index} {r.kind}]\n{r.report.table()}" for r in results)
    n_bad = sum(not r.ok for r in results)
    worst = max(r.report.max_rel_error for r in results)
    text += f"\n{len(results) - n_bad}/{len(results)} passed, max rel err {worst:.3e}\n"
    _emit(text, args.out)
    if n_bad:
        raise CheckFailed(f"{n_bad} gradient checks exceeded tolerance")


def train_toy(cfg: RunConfig, threads=None):
    h = cfg["harness"]
    dataset = harness.generate_dataset(h["seed"], h["n_images"], cfg.area_distribution())
    res = harness.train_joint(dataset, cfg.scaler_config(), cfg.balance_state(),
                              cfg.train_config(threads))
    threads = cfg.train_config(threads).threads
    held = [dataset[i] for i in res.heldout_ids] or dataset
    phi = harness.predict(res.params, held, threads=threads)
    stats = harness.run_stats(held, phi)
    sweep = harness.resolution_sweep(res.params, held, tuple(h["sweep_sizes"]), threads=threads)
    report = {
        "heldout": stats.to_dict(),
        "final_gamma": res.final_gamma,
        "l_ps_window_means": harness.pl_window_means(res.trace),
        "sweep": {str(k): v.to_dict() for k, v in sweep.items()},
    }
    return res, report


def cmd_train_toy(args, cfg: RunConfig):
    res, report = train_toy(cfg, args.threads)
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    _emit(res.trace_csv(), os.path.join(out, "trace.csv"))
    res.params.save(os.path.join(out, "checkpoint.json"),
                    extra={"final_gamma": res.final_gamma, "seed": cfg["harness"]["seed"]})
    text = dumps(report)
    _emit(text, os.path.join(out, "stats.json"))
    sys.stdout.write(text)


def cmd_gamma_sim(args, cfg: RunConfig):
    steps = args.steps or cfg["harness"]["gamma_steps"]
    init = cfg["balance"]["gamma_init"] if args.init is None else args.init
    if not init > 0:
        raise DomainError("--init must be positive")
    trace = harness.gamma_equilibrium(harness.equal_loss_splits(cfg["harness"]["seed"]),
                                      cfg.balance_state(init), steps, cfg.schedule(steps),
                                      cfg["balance"]["variant"])
    _emit(_csv(("step", "gamma"), enumerate(trace)), args.out)


def cmd_balance_diag(args, cfg: RunConfig):
    if not args.sweep:
        raise ValueError("balance-diag currently only supports --sweep")
    state = cfg.balance_state()
    grid = np.linspace(0.0, 0.9, args.grid)
    balanced = L.balance_target_after_avg(0.5, 0.5, state)
    rows = []
    for d in grid:
        for u in grid:
            t = L.balance_target_after_avg(float(d), float(u), state)
            rows.append((float(d), float(u), float(t), float(t - balanced)))
    _emit(_csv(("l_down", "l_up", "target", "target_minus_balanced"), rows), args.out)


def cmd_schedule_dump(args, cfg: RunConfig):
    _emit(_csv(("step", "lr"), cfg.schedule().rows()), args.out)


def cmd_stats(args, cfg: RunConfig):
    aset = ingest.parse_annotations(args.annotations)
    gamma = cfg["balance"]["gamma_init"] if args.gamma is None else args.gamma
    if not gamma > 0:
        raise DomainError("--gamma must be positive")
    stats = ingest.dataset_stats(aset, cfg.balance_state(gamma), args.bins)
    if args.histogram:
        _emit(ingest.histogram_csv(stats), args.histogram)
    _emit(dumps(stats), args.out)


def cmd_resize(args, cfg: RunConfig):
    img = imaging.read_pnm(args.input)
    out = imaging.rescale(img, args.phi)
    imaging.write_pnm(args.output, out)
    if args.boxes:
        boxes = np.asarray(_read_json(args.boxes, "boxes file"), dtype=np.float64).reshape(-1, 4)
        scaled = imaging.rescale_boxes(boxes, args.phi).tolist()
        _emit(dumps({"width": out.width, "height": out.height, "boxes": scaled}), args.boxes_out)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dyra",
        description="Adaptive-resolution scale-factor losses, checks and toy experiments.",
        epilog=f"Set {OUTPUT_ENV} to override output.directory from the config.",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for batched work (1 = serial reference mode)")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, fn, help_, parent=sub):
        sp = parent.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="RunConfig JSON (defaults used for absent keys)")
        sp.set_defaults(func=fn)
        return sp

    lo = sub.add_parser("losses", help="loss evaluation")
    lo_sub = lo.add_subparsers(dest="action", metavar="ACTION", required=True)
    sp = add("eval", cmd_losses_eval, "evaluate every loss term for a hand-written case", lo_sub)
    sp.add_argument("--case", required=True, help="case JSON with images, phi and boxes")
    sp.add_argument("--out", help="write the report here instead of stdout")

    sp = add("gradcheck", cmd_gradcheck, "central-difference checks of every gradient")
    sp.add_argument("--seed", type=int, default=0, help="seed for the random configurations")
    sp.add_argument("--n-configs", type=int, default=100, help="number of random configurations")
    sp.add_argument("--verbose", action="store_true", help="print per-parameter tables")
    sp.add_argument("--out", help="write the table here instead of stdout")

    add("train-toy", cmd_train_toy, "joint predictor and gamma training on synthetic data")

    sp = add("gamma-sim", cmd_gamma_sim, "gamma descent under equal group losses")
    sp.add_argument("--init", type=float, default=None, help="initial gamma")
    sp.add_argument("--steps", type=int, default=None, help="override harness.gamma_steps")
    sp.add_argument("--out", help="write the CSV here instead of stdout")

    sp = add("balance-diag", cmd_balance_diag, "balance target over a grid of group losses")
    sp.add_argument("--sweep", action="store_true", help="sweep both group losses over a grid")
    sp.add_argument("--grid", type=int, default=10, help="grid points per axis")
    sp.add_argument("--out", help="write the CSV here instead of stdout")

    sc = sub.add_parser("schedule", help="learning-rate schedule")
    sc_sub = sc.add_subparsers(dest="action", metavar="ACTION", required=True)
    sp = add("dump", cmd_schedule_dump, "print (step, lr) for the configured schedule", sc_sub)
    sp.add_argument("--out", help="write the CSV here instead of stdout")

    sp = add("stats", cmd_stats, "box-size statistics of a COCO annotation file")
    sp.add_argument("--annotations", required=True, help="COCO-style JSON")
    sp.add_argument("--gamma", type=float, default=None, help="gamma used for the group split")
    sp.add_argument("--bins", type=int, default=20, help="log-area histogram bins")
    sp.add_argument("--histogram", help="also write the histogram CSV here")
    sp.add_argument("--out", help="write the JSON here instead of stdout")

    sp = add("resize", cmd_resize, "rescale a PGM/PPM image (and boxes) by phi")
    sp.add_argument("--input", required=True, help="binary PGM (P5) or PPM (P6)")
    sp.add_argument("--phi", type=float, required=True, help="scale factor in (0, 10]")
    sp.add_argument("--output", required=True, help="output PGM/PPM path")
    sp.add_argument("--boxes", help="JSON list of [x, y, w, h] boxes to rescale")
    sp.add_argument("--boxes-out", help="write rescaled boxes here instead of stdout")
    return p


def _fail(code, kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        return _fail(2, "usage", "--threads must be >= 1")
    try:
        cfg = RunConfig.load(args.config)
    except ConfigError as exc:
        return _fail(2, "config", str(exc), path=exc.path)
    try:
        args.func(args, cfg)
    except CheckFailed as exc:
        return _fail(1, "check_failed", str(exc))
    except (ValueError, OSError, RuntimeError, KeyError, TypeError) as exc:
        log.debug("command failed", exc_info=True)
        return _fail(1, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
