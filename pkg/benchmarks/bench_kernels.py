"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each case runs the same inputs through every importable backend, checks the
outputs are identical, and reports the best-of-N wall time.
"""

import argparse
import json
import time

import numpy as np

from nexume import kernels
from nexume.kernels import _backend


def _cases(rng):
    a16 = rng.integers(-2000, 2000, size=(16, 16))
    b16 = rng.integers(-2000, 2000, size=(16, 16))
    a64 = rng.normal(size=(64, 64))
    b64 = rng.normal(size=(64, 64))
    x = rng.integers(-100, 100, size=(4, 16, 16))
    w = rng.integers(-100, 100, size=(8, 4, 3, 3))
    xf = rng.normal(size=(8, 24, 24))
    wf = rng.normal(size=(16, 8, 3, 3))
    sig = rng.normal(size=4096)
    k = rng.normal(size=31)
    qa = kernels.quantize(rng.uniform(-1, 1, (32, 32)), 8, 1.0)
    qb = kernels.quantize(rng.uniform(-1, 1, (32, 32)), 8, 1.0)
    return [
        ("gemm int 16x16", lambda be: kernels.gemm(a16, b16, backend=be)),
        ("gemm f64 64x64", lambda be: kernels.gemm(a64, b64, backend=be)),
        ("gemm fixed8 32x32", lambda be: kernels.gemm(qa, qb, backend=be).codes),
        ("conv2d int 4x16x16 * 8x4x3x3", lambda be: kernels.conv2d(x, w, backend=be)),
        ("conv2d f64 8x24x24 * 16x8x3x3", lambda be: kernels.conv2d(xf, wf, backend=be)),
        ("conv1d f64 4096 * 31", lambda be: kernels.conv1d(sig, k, backend=be)),
    ]


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    backends = _backend.available()
    rows = []
    for name, fn in _cases(np.random.default_rng(0)):
        row = {"case": name}
        ref = None
        for bname, impl in backends.items():
            secs, out = _best(lambda: fn(impl), args.repeat)
            row[bname] = secs
            if ref is None:
                ref = out
            elif not np.array_equal(ref, out):
                raise SystemExit(f"{name}: backends disagree")
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    names = list(backends)
    print(f"{'case':34s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}")
    for r in rows:
        cells = "".join(f"{r[n] * 1e3:10.2f}ms" for n in names)
        sp = f"{r['speedup']:9.1f}x" if "speedup" in r else f"{'n/a':>10s}"
        print(f"{r['case']:34s}{cells}{sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
