"""Time the numba and numpy versions of every hot kernel side by side.

    python benchmarks/bench_kernels.py [--repeat 20]

Both versions are called directly, so the TOPONET_DISABLE_NUMBA flag does not
matter here. Each row also reports the max abs difference between outputs.
"""
import argparse
import time

import numpy as np

from toponet import kernels as K


def timed(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases(rng):
    for n in (15, 50, 200):
        w = rng.uniform(size=n * (n - 1) // 2)
        yield f"prim n={n}", K._prim_nb, K._prim_np, (w, n, 0)
    for n in (6, 7):
        w = rng.uniform(size=n * (n - 1) // 2)
        yield f"brute_force n={n}", K._brute_force_nb, K._brute_force_np, (w, n)
    H, T = 32, 29
    for B in (3, 8, 32):
        xw = rng.normal(size=(T, B, 4 * H))
        U = rng.normal(0, 0.1, size=(H, 4 * H))
        p = rng.normal(0, 0.1, size=(3, H))
        yield f"lstm_seq_fwd B={B}", K._lstm_seq_fwd_nb, K._lstm_seq_fwd_np, (xw, U, p, True)
        states = K._lstm_seq_fwd_np(xw, U, p, True)
        dh = rng.normal(size=(T, B, H))
        yield f"lstm_seq_bwd B={B}", K._lstm_seq_bwd_nb, K._lstm_seq_bwd_np, (dh, U) + states + (p, True)
    for N, a in ((32 * 15, 9), (32 * 15, 17)):
        x = rng.normal(size=(N, 1, a, a))
        k = rng.normal(size=(4, 1, 3, 3))
        b = rng.normal(size=4)
        yield f"conv3_fwd N={N} a={a}", K._conv3_fwd_nb, K._conv3_fwd_np, (x, k, b)
        dout = rng.normal(size=(N, 4, a, a))
        yield f"conv3_bwd N={N} a={a}", K._conv3_bwd_nb, K._conv3_bwd_np, (x, k, dout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, nb, npy, fargs in cases(rng):
        t_nb, out_nb = timed(nb, fargs, args.repeat)
        t_np, out_np = timed(npy, fargs, max(1, args.repeat // 4) if "brute" in name else args.repeat)
        print(f"{name:<26} {t_nb * 1e3:>10.3f} {t_np * 1e3:>10.3f} {t_np / t_nb:>7.1f}x {max_diff(out_nb, out_np):>10.2e}")


if __name__ == "__main__":
    main()
