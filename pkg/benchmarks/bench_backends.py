"""Time the numba and numpy kernel backends on the hot paths.

    python3 benchmarks/bench_backends.py [--repeat 5]

Runs each kernel on both backends, checks they agree, and prints the best
wall time of `--repeat` runs plus the speedup of numba over numpy.
"""
import argparse
import time

import numpy as np

from dwnet._backend import get_kernels, numba_available


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for ci, co, hw in ((1, 1, 64), (1, 8, 64), (8, 8, 64), (16, 32, 16), (24, 8, 64)):
        xp = rng.standard_normal((8, hw + 2, hw + 2, ci))
        w = rng.standard_normal((3, 3, ci, co))
        up = rng.standard_normal((8, hw, hw, co))
        yield f"conv fwd    {ci:>2}->{co:<2} {hw}x{hw}", lambda k, xp=xp, w=w: k.conv_forward(xp, w)
        yield (f"conv bwd-in {ci:>2}->{co:<2} {hw}x{hw}",
               lambda k, up=up, w=w: k.conv_backward_input(up, w))
        yield (f"conv bwd-w  {ci:>2}->{co:<2} {hw}x{hw}",
               lambda k, xp=xp, up=up: k.conv_backward_weight(xp, up, 3, 3))
    a = rng.random((8, 64, 64, 1))
    yield "q_gamma     8x64x64 g=3", lambda k: k.q_gamma(a, 15.0, 3)
    yield "q_gamma+d   8x64x64 g=3", lambda k: k.q_gamma_with_grad(a, 15.0, 3)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    if not numba_available():
        print("numba is not installed; nothing to compare")
        return
    k_np, k_nb = get_kernels("numpy"), get_kernels("numba")
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(np.random.default_rng(args.seed)):
        ref, out = fn(k_np), fn(k_nb)
        for r, o in zip(ref if isinstance(ref, tuple) else (ref,), out if isinstance(out, tuple) else (out,)):
            assert np.allclose(r, o, rtol=1e-10, atol=1e-10), name
        t_np, t_nb = _best(lambda: fn(k_np), args.repeat), _best(lambda: fn(k_nb), args.repeat)
        print(f"{name:<28}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
