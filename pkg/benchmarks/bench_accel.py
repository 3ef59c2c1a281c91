"""Timing comparison of the numba kernels against their numpy fallbacks.

Run with numba active (the default):

    python benchmarks/bench_accel.py

Each dual-path kernel is timed on representative shapes; the numba column
reports post-warmup (compiled) times.  Set CLUSTILE_NUMBA=0 to confirm the
package itself runs on the fallback path; this script always times both
implementations directly.
"""

import time

import numpy as np

from clustile import _accel
from clustile import aggregate, nmf, synth


def timeit(fn, *args, repeats=5):
    fn(*args)  # warmup (and jit compile)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def show(name, numpy_time, numba_time):
    speedup = numpy_time / numba_time if numba_time > 0 else float("inf")
    print(f"{name:38s} numpy {numpy_time * 1e3:9.2f} ms   "
          f"numba {numba_time * 1e3:9.2f} ms   x{speedup:5.1f}")


def main():
    if not _accel.USING_NUMBA:
        print("numba is disabled (CLUSTILE_NUMBA=0 or not installed); "
              "timing fallbacks only makes no comparison. Re-run with numba on.")
        return

    rng = np.random.default_rng(0)
    print(f"numba active: {_accel.USING_NUMBA}\n")

    # convolution stage of the toy feature extractor, full-size tile
    img = rng.random((512, 512, 3))
    filt = rng.normal(size=(8, 3, 3, 3))
    show(
        "conv3x3+relu 512x512x3 -> 8ch",
        timeit(synth._conv3_relu_numpy, img, filt),
        timeit(synth._conv3_relu_loops, np.ascontiguousarray(img), filt),
    )

    img2 = rng.random((128, 128, 8))
    filt2 = rng.normal(size=(64, 3, 3, 8))
    show(
        "conv3x3+relu 128x128x8 -> 64ch",
        timeit(synth._conv3_relu_numpy, img2, filt2),
        timeit(synth._conv3_relu_loops, np.ascontiguousarray(img2), filt2),
    )

    # tissue filter sweep over an 8-bit tile
    tile = rng.integers(0, 256, size=(512, 512, 3), dtype=np.uint8)
    show(
        "tissue fraction 512x512 rgb",
        timeit(aggregate._tissue_fraction_numpy, tile, 0.07, 0.95),
        timeit(aggregate._tissue_fraction_loops, tile, 0.07, 0.95),
    )

    # one multiplicative NMF update (BLAS-bound; numba wraps the same dots)
    V = rng.random((20000, 64))
    W = rng.random((20000, 6))
    H = rng.random((6, 64))
    numba_w = nmf._update_w
    numpy_w = getattr(numba_w, "py_func", numba_w)
    show(
        "nmf W-update 20000x64, k=6",
        timeit(numpy_w, V, W, H),
        timeit(numba_w, V, W, H),
    )


if __name__ == "__main__":
    main()