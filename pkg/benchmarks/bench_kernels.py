"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Reports the best-of-N wall time per kernel and backend, and checks that
both backends agree (byte-identical for the resampler).
"""
import argparse
import json
import time

import numpy as np

from dyra import _accel, _kernels_py


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    img = rng.integers(0, 256, (480, 640, 3), dtype=np.uint8)
    yield "resize 640x480 -> 1.6x", "resize_bilinear", (img, 768, 1024)
    yield "resize 640x480 -> 0.5x", "resize_bilinear", (img, 240, 320)
    n_box, n_img = 200_000, 16
    args = (rng.uniform(0, 1, n_box), rng.integers(0, 5, n_box).astype(np.int64),
            rng.integers(0, n_img, n_box).astype(np.int64), rng.uniform(0.4, 2.0, n_img), 2.0, 5)
    yield "pareto_terms 200k boxes", "pareto_terms", args
    small = (rng.uniform(0, 1, 64), rng.integers(0, 5, 64).astype(np.int64),
             rng.integers(0, 16, 64).astype(np.int64), rng.uniform(0.4, 2.0, 16), 2.0, 5)
    yield "pareto_terms 64 boxes", "pareto_terms", small


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results as JSON")
    args = ap.parse_args(argv)
    backends = [_kernels_py]
    try:
        backends.insert(0, _accel.load_backend("cython"))
    except ImportError:
        print("compiled backend not available; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':<28}" + "".join(f"{b.NAME:>12}" for b in backends) + f"{'speedup':>10}  agree")
    for label, fn_name, fargs in cases(rng):
        timings, outputs = [], []
        for b in backends:
            fn = getattr(b, fn_name)
            outputs.append(fn(*fargs))
            timings.append(best_of(lambda: fn(*fargs), args.repeat))
        if fn_name == "resize_bilinear":
            agree = all(np.array_equal(outputs[0], o) for o in outputs[1:])
        else:
            agree = all(np.allclose(a, b, rtol=1e-12, atol=1e-15)
                        for o in outputs[1:] for a, b in zip(outputs[0], o))
        speed = timings[-1] / timings[0] if len(timings) > 1 else 1.0
        rows.append({"case": label, "seconds": dict(zip((b.NAME for b in backends), timings)),
                     "speedup": speed, "agree": bool(agree)})
        print(f"{label:<28}" + "".join(f"{t * 1e3:10.2f}ms" for t in timings) + f"{speed:9.1f}x  {agree}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
