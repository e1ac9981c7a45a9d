"""Compare the compiled rasterizer against the pure-Python fallback.

    python benchmarks/bench_backends.py [--sizes 1000,10000] [--resolution 256] [--runs 5]

Prints the timing table as CSV and a speedup line per size and phase.
"""
import argparse
import sys

from cagsplat.bench import format_bench_csv, run_bench
from cagsplat.render import available_backends


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--sizes", default="1000,10000")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    args = p.parse_args(argv)

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled backend not built; only the python fallback is available", file=sys.stderr)
    sizes = [int(float(s)) for s in args.sizes.split(",")]
    rows = run_bench(sizes, args.resolution, backends, args.warmup, args.runs,
                     log=lambda m: print(m, file=sys.stderr, flush=True))
    sys.stdout.write(format_bench_csv(rows))
    by_key = {(r["backend"], r["n_gaussians"], r["phase"]): r["mean_ms"] for r in rows}
    if len(backends) > 1:
        for n in sizes:
            for phase in ("forward", "forward_backward"):
                fast, slow = by_key[("compiled", n, phase)], by_key[("python", n, phase)]
                print(f"# N={n} {phase}: compiled {fast:.1f} ms, python {slow:.1f} ms, speedup {slow / fast:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
