"""Time the numba and pure-numpy implementations of each hot kernel.

Run with ``python3 benchmarks/bench_kernels.py``.  Both variants are called
on identical inputs; results are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np
import scipy.linalg

from ttca import _kernels as K
from ttca.tt import TTTensor


def maxvol_case(n, r, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, r))
    p, _, _ = scipy.linalg.lu(A, p_indices=True)
    rows = np.argsort(p, kind="stable")[:r].astype(np.int64)
    B = np.linalg.solve(A[rows].T, A.T).T
    return B, rows


def bench(fn, setup, repeat, number):
    """Best per-call time of ``fn``; inputs are rebuilt outside the timed region."""
    best = float("inf")
    for _ in range(repeat):
        inputs = [setup() for _ in range(number)]
        t0 = timeit.default_timer()
        for a in inputs:
            fn(*a)
        best = min(best, (timeit.default_timer() - t0) / number)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    rng = np.random.default_rng(1)
    cases = []

    for n, r in [(256, 8), (2048, 16)]:
        B0, rows0 = maxvol_case(n, r)

        def setup(B0=B0, rows0=rows0):
            return B0.copy(), rows0.copy(), 1e-2, 200
        a, b = setup(), setup()
        K.maxvol_swaps_numpy(*a)
        K.maxvol_swaps_numba(*b)
        assert np.array_equal(a[1], b[1])
        cases.append((f"maxvol_swaps n={n} r={r}", K.maxvol_swaps_numpy, K.maxvol_swaps_numba, setup))

    for D, I, r, m in [(4, 32, 5, 10_000), (30, 2, 8, 10_000)]:
        t = TTTensor.random((I,) * D, r, rng)
        idx = np.stack([rng.integers(0, I, m) for _ in range(D)], axis=1)
        cores = list(t.cores)
        assert np.allclose(K.tt_eval_batch_numpy(cores, idx), K.tt_eval_batch_numba(cores, idx))
        cases.append((f"tt_eval_batch D={D} I={I} r={r} m={m}", K.tt_eval_batch_numpy,
                      K.tt_eval_batch_numba, lambda c=cores, i=idx: (c, i)))

    bits = np.array([10, 10, 10], dtype=np.int64)
    idx = rng.integers(0, 1024, size=(100_000, 3)).astype(np.int64)
    vidx = K.qtt_encode_numpy(idx, bits)
    assert np.array_equal(vidx, K.qtt_encode_numba(idx, bits))
    assert np.array_equal(K.qtt_decode_numpy(vidx, bits), K.qtt_decode_numba(vidx, bits))
    cases.append(("qtt_encode 1e5 x 1024^3", K.qtt_encode_numpy, K.qtt_encode_numba, lambda: (idx, bits)))
    cases.append(("qtt_decode 1e5 x 2^30", K.qtt_decode_numpy, K.qtt_decode_numba, lambda: (vidx, bits)))

    print(f"{'kernel':44s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, f_np, f_nb, setup in cases:
        t_np = bench(f_np, setup, args.repeat, args.number)
        t_nb = bench(f_nb, setup, args.repeat, args.number)
        print(f"{name:44s} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.1f}")


if __name__ == "__main__":
    main()
