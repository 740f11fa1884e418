"""Benchmark the numba kernels against their pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]

The same comparison can be forced package-wide by setting SSMSEG_NUMBA=0,
which routes every hot call through the numpy implementations.
"""

import argparse
import time

import numpy as np

from ssmseg import _kernels
from ssmseg.geometry import PointCloud, make_grid, triangulate_reference


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azim = np.pi * (1 + 5**0.5) * i
    return np.stack(
        [np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)], axis=1
    )


def timeit(fn, repeats):
    fn()  # warm-up / JIT
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not _kernels.HAVE_NUMBA:
        print("numba backend unavailable (SSMSEG_NUMBA=0 or import failure); nothing to compare")
        return

    rows = []

    mesh = triangulate_reference(PointCloud(22.0 * fibonacci_sphere(350)))
    grid = make_grid(np.full(3, -25.0), np.full(3, 25.0), 0.7)
    vox_args = (mesh.cloud.points, mesh.faces, grid.origin, grid.spacing, grid.dims)
    rows.append(
        (
            f"voxelize {mesh.n_faces} faces on {grid.dims}",
            timeit(lambda: _kernels.voxelize_parity_numpy(*vox_args), args.repeats),
            timeit(lambda: _kernels.voxelize_parity_numba(*vox_args), args.repeats),
        )
    )

    rng = np.random.default_rng(0)
    moved = rng.normal(size=(1256, 3))
    fixed = rng.normal(size=(1256, 3))
    rows.append(
        (
            "cpd_estep 1256x1256",
            timeit(lambda: _kernels.cpd_estep_numpy(moved, fixed, 0.05, 0.1), args.repeats),
            timeit(lambda: _kernels.cpd_estep_numba(moved, fixed, 0.05, 0.1), args.repeats),
        )
    )

    frames = rng.random((100, 138, 120))
    angles = np.deg2rad(np.arange(100) * 0.9)
    fgrid = make_grid(np.array([0.0, -5.0, 0.0]), np.array([69.0, 48.0, 59.0]), 0.5)
    fan_args = (frames, angles, 5.0, 0.5, 0.5, 0.0, fgrid.origin, fgrid.spacing, fgrid.dims)
    rows.append(
        (
            f"fan_resample 100 frames -> {fgrid.dims}",
            timeit(lambda: _kernels.fan_resample_numpy(*fan_args), args.repeats),
            timeit(lambda: _kernels.fan_resample_numba(*fan_args), args.repeats),
        )
    )

    print(f"{'kernel':<42}{'numpy':>10}{'numba':>10}{'speedup':>9}")
    print("-" * 71)
    for name, t_np, t_nb in rows:
        print(f"{name:<42}{t_np * 1e3:>8.1f}ms{t_nb * 1e3:>8.1f}ms{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
