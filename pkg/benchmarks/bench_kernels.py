"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 16,64,128] [--repeat 50] [--json out.json]

Also reports the largest absolute difference between the two backends' outputs.
"""
import argparse
import json
import statistics
import timeit

import numpy as np

from sora.kernels import available_backends, load_backend


def cases(n, r, batch, rng):
    wd = rng.standard_normal((r, n))
    wu = rng.standard_normal((n, r))
    gate = rng.standard_normal(r)
    x = rng.standard_normal((n, batch))
    gz = rng.standard_normal((n, batch))
    a = rng.standard_normal((n, n))

    def fwd(k):
        return k.gated_forward(wd, wu, gate, x)

    def bwd(k):
        h, hp, _ = k.gated_forward(wd, wu, gate, x)
        return k.gated_backward(wd, wu, gate, x, h, hp, gz)

    return {
        "matmul": lambda k: k.matmul(a, x),
        "gated_forward": fwd,
        "gated_backward": bwd,
        "prox_step": lambda k: k.prox_step(gate, gate, 0.1, 0.1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="16,64,128")
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = {name: load_backend(name) for name in available_backends()}
    rng = np.random.default_rng(0)
    rows = []
    for n in (int(s) for s in args.sizes.split(",")):
        for op, fn in cases(n, min(args.rank, n), args.batch, rng).items():
            row = {"op": op, "n": n}
            outs = {}
            for name, mod in backends.items():
                times = timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)
                row[f"{name}_us"] = statistics.median(times) * 1e6
                res = fn(mod)
                outs[name] = res if isinstance(res, tuple) else (res,)
            if len(outs) == 2:
                row["max_abs_diff"] = max(float(np.max(np.abs(u - v))) for u, v in zip(*outs.values()))
                row["ext_speedup"] = row["python_us"] / row["ext_us"]
            rows.append(row)
    cols = ["op", "n"] + [f"{b}_us" for b in backends] + (["ext_speedup", "max_abs_diff"] if len(backends) == 2 else [])
    print("  ".join(f"{c:>14}" for c in cols))
    for row in rows:
        print("  ".join(f"{row[c]:>14.4g}" if isinstance(row[c], float) else f"{row[c]:>14}" for c in cols))
    if len(backends) < 2:
        print("compiled extension not built; only the fallback was timed")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
