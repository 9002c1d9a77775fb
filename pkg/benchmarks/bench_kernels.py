"""Compiled vs numpy Neumann chain.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Each case pushes two vectors (the STORM pair) through a chain of ``k``
sampled Hessians of size ``p``; both backends must agree to 1e-12.
"""
import argparse
import timeit

import numpy as np

from fedbilevel.kernels import backends


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    impl = backends()
    if "cython" not in impl:
        print("compiled backend not built; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'p':>4} {'k':>4} " + " ".join(f"{name + ' us':>12}" for name in impl) + f" {'speedup':>8}")
    for p in (5, 20, 50):
        for k in (4, 16, 64):
            A = rng.standard_normal((p, p))
            Q = A @ A.T / p + np.eye(p)
            noise = rng.standard_normal((k, p, p))
            V = rng.standard_normal((2, p))
            step = 1.0 / np.linalg.eigvalsh(Q)[-1]
            ref = None
            times = {}
            for name, mod in impl.items():
                out = mod.neumann_chain(Q, noise, 0.01, step, V, True)
                if ref is None:
                    ref = out
                elif not np.allclose(out, ref, rtol=0, atol=1e-12):
                    raise SystemExit(f"backends disagree at p={p}, k={k}")
                t = timeit.timeit(lambda: mod.neumann_chain(Q, noise, 0.01, step, V, True), number=args.repeat)
                times[name] = 1e6 * t / args.repeat
            sp = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{p:>4} {k:>4} " + " ".join(f"{times[n]:>12.1f}" for n in impl) + f" {sp:>8.2f}")


if __name__ == "__main__":
    main()
