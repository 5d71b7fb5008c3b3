"""Compare the numba loop kernels against the numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Kernel timings use the compiled path only when numba is importable; the
end-to-end simulation timing runs both paths in subprocesses, toggling
TRACEDET_DISABLE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tracedet import kernels
from tracedet._accel import HAS_NUMBA

SIM_SNIPPET = (
    "import time; from tracedet.sim import SimConfig, PATTERNS, synthesize_dataset; "
    "synthesize_dataset(SimConfig(T=8, n=4, V=8), {'faithful': 1}, seed=0); "
    "t = time.perf_counter(); "
    "synthesize_dataset(SimConfig(T=64, n=32, V=16), {p: 25 for p in PATTERNS}, seed=0); "
    "print(time.perf_counter() - t)"
)


def bench(fn, args, repeat):
    fn(*args)  # warm-up (and compilation)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(16), size=32 * 64)
    h = rng.uniform(0, 1, size=32 * 64)
    scores = np.round(rng.normal(size=20_000), 2)
    labels = rng.integers(0, 2, size=20_000)
    cases = [
        ("entropy_rows", kernels.entropy_rows_loop, kernels.entropy_rows_numpy, (probs,)),
        ("peak_mass_for_entropy", kernels.peak_mass_for_entropy_loop, kernels.peak_mass_for_entropy_numpy, (h, 16)),
        ("mann_whitney_auc", kernels.mann_whitney_auc_loop, kernels.mann_whitney_auc_numpy, (scores, labels)),
    ]
    print(f"numba enabled: {HAS_NUMBA}")
    print(f"{'kernel':<24}{'loop [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, loop, vec, a in cases:
        t_loop = bench(loop, a, args.repeat) * 1e3
        t_vec = bench(vec, a, args.repeat) * 1e3
        print(f"{name:<24}{t_loop:>12.3f}{t_vec:>12.3f}{t_vec / t_loop:>10.1f}x")

    print("\nsimulate 100 traces (T=64, n=32, V=16), after warm-up:")
    for flag in ("0", "1"):
        env = dict(os.environ, TRACEDET_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", SIM_SNIPPET], env=env, capture_output=True, text=True, check=True)
        label = "numpy fallback" if flag == "1" else "numba"
        print(f"  {label:<16}{float(out.stdout.strip()):.2f} s")


if __name__ == "__main__":
    main()
