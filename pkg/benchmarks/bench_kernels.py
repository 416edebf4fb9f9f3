"""Time the compiled and numpy convolution kernels on the shapes the networks use.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (kernel, shape) with the best time of each backend and the
speed-up, after checking that both backends return identical bytes.
"""
import argparse
import time

import numpy as np

from gradforge import kernels

# (batch, side, channels, k, stride) as seen in the 16x16, width 0.25 desk networks
# and in the full-width 32x32 classifier
SHAPES = [
    (32, 16, 3, 3, 1),
    (32, 16, 12, 3, 1),
    (32, 16, 12, 3, 2),
    (32, 8, 24, 3, 1),
    (32, 8, 24, 1, 1),
    (64, 32, 48, 3, 1),
    (64, 32, 48, 3, 2),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    compiled = kernels._compiled
    if compiled is None:
        print("compiled extension not available (pure mode or not built); nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':8} {'N,H,C,k,s':>18} {'numpy ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for n, hw, c, k, s in SHAPES:
        x = rng.standard_normal((n, hw, hw, c))
        ho, pad_h = kernels.same_padding(hw, k, s)
        wo, pad_w = kernels.same_padding(hw, k, s)
        cols = kernels.im2col_numpy(x, k, s, pad_h, pad_w, ho, wo)
        assert compiled.im2col(x, k, s, pad_h, pad_w, ho, wo).tobytes() == cols.tobytes()
        back = kernels.col2im_numpy(cols, hw, hw, s, pad_h, pad_w)
        assert compiled.col2im(cols, hw, hw, s, pad_h, pad_w).tobytes() == back.tobytes()
        label = f"{n},{hw},{c},{k},{s}"
        for name, py_fn, c_fn in (
            ("im2col", lambda: kernels.im2col_numpy(x, k, s, pad_h, pad_w, ho, wo),
             lambda: compiled.im2col(x, k, s, pad_h, pad_w, ho, wo)),
            ("col2im", lambda: kernels.col2im_numpy(cols, hw, hw, s, pad_h, pad_w),
             lambda: compiled.col2im(cols, hw, hw, s, pad_h, pad_w)),
        ):
            tp, tc = best_of(py_fn, args.repeat), best_of(c_fn, args.repeat)
            print(f"{name:8} {label:>18} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}x")


if __name__ == "__main__":
    main()
