"""Time each hot kernel on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--rays 2048] [--samples 64] [--repeat 5]

Numba timings exclude the first (compiling) call.
"""

import argparse
import time

import numpy as np

from ddrnerf import kernels

LO, HI = np.array([-1.1, -1.1, -1.0]), np.array([1.1, 1.1, 1.0])


def make_cases(B, N, R, rng):
    F = 3
    params = rng.normal(size=(F, R, R, R, 4))
    frames = rng.integers(0, F, B).astype(np.int64)
    points = rng.uniform(-1.1, 1.1, (B, N, 3))
    raw = rng.normal(size=(B, N, 4)) * 3
    inside = np.ones((B, N), dtype=bool)
    t = np.sort(rng.uniform(0, 1, (B, N)), axis=1)
    delta = np.r_["1", np.diff(t, axis=1), np.full((B, 1), 1.0 / N)]
    bg = np.zeros(3)
    g_raw = rng.normal(size=(B, N, 4))
    ids = np.arange(B, dtype=np.int64)
    kg, kt = kernels.stream_key(0, "gumbel"), kernels.stream_key(0, "triangle")
    w = rng.random((B, N)) / N
    half = np.full(B, 0.5 / N)
    gt = rng.uniform(0.2, 0.8, B)
    up = (rng.normal(size=(B, 3)), rng.normal(size=B), rng.normal(size=(B, N)), rng.normal(size=(B, N)))
    p32 = rng.normal(size=params.size).astype(np.float32)
    g64 = rng.normal(size=params.size)

    def forward(k):
        return k.render_forward(raw, inside, t, delta, bg)

    fw = kernels.get_backend("numpy").render_forward(raw, inside, t, delta, bg)

    return {
        "grid_gather": lambda k: k.grid_gather(params, LO, HI, frames, points, True),
        "grid_scatter": lambda k: k.grid_scatter(np.zeros_like(params), LO, HI, frames, points, g_raw),
        "render_forward": forward,
        "render_backward": lambda k: k.render_backward(raw, inside, t, delta, bg, fw[1], fw[2], fw[3], *up),
        "ddr_weight_loss": lambda k: k.ddr_weight_loss(w, t, half, gt, ids, kg, kt, 30, 2.0, 1e-8),
        "stratified_t": lambda k: k.stratified_t(np.zeros(B), np.ones(B), N, ids, kg, True),
        "adam_update": lambda k: k.adam_update(p32.copy(), g64, np.zeros_like(p32), np.zeros_like(p32),
                                               0.01, 0.9, 0.999, 1e-8, 1),
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=2048)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    cases = make_cases(args.rays, args.samples, args.resolution, np.random.default_rng(0))
    nb, npy = kernels.get_backend("numba"), kernels.get_backend("numpy")
    print(f"{args.rays} rays x {args.samples} samples, grid {args.resolution}^3, best of {args.repeat}")
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in cases.items():
        fn(nb)  # compile
        a = best_of(lambda: fn(nb), args.repeat)
        b = best_of(lambda: fn(npy), args.repeat)
        print(f"{name:<18}{a * 1e3:>10.2f}{b * 1e3:>10.2f}{b / a:>8.1f}x")


if __name__ == "__main__":
    main()
