"""Benchmark the compiled ray-trace kernel against the NumPy fallback.

Runs the same batched trace through both backends over a range of bundle
sizes and reports wall time, throughput, and agreement.

    python3 benchmarks/bench_trace.py [--rays 1000 10000 100000] [--repeats 5]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from conftest import make_singlet  # noqa: E402

from aberforge.raytrace import (  # noqa: E402
    _eta_table,
    _launch_rays,
    _pupil_points,
    _surface_arrays,
    _trace_np,
)


def build_batch(n_rays: int):
    lens = make_singlet()
    pupil = _pupil_points(n_rays, "grid") * lens.entrance_pupil_radius
    origins, dirs = _launch_rays(lens, 4.0, pupil)
    arrs = _surface_arrays(lens)
    eta = np.repeat(_eta_table(lens, np.array([587.56]))[:, :1], len(pupil), axis=1)
    return origins, dirs, arrs, eta, lens.image_plane_z


def time_backend(kernel, batch, repeats: int) -> float:
    origins, dirs, arrs, eta, image_z = batch
    kernel.trace_batch(origins, dirs, *arrs, eta, image_z)  # warm up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        kernel.trace_batch(origins, dirs, *arrs, eta, image_z)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rays", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    try:
        from aberforge.raytrace import _trace_cy
    except ImportError:
        print("compiled backend not built; benchmarking NumPy only")
        _trace_cy = None

    header = f"{'rays':>9}  {'numpy (ms)':>11}  {'cython (ms)':>12}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for n in args.rays:
        batch = build_batch(n)
        t_np = time_backend(_trace_np, batch, args.repeats)
        if _trace_cy is None:
            print(f"{n:>9}  {t_np * 1e3:>11.2f}  {'-':>12}  {'-':>8}")
            continue
        t_cy = time_backend(_trace_cy, batch, args.repeats)

        origins, dirs, arrs, eta, image_z = batch
        p1, s1 = _trace_np.trace_batch(origins, dirs, *arrs, eta, image_z)
        p2, s2 = _trace_cy.trace_batch(origins, dirs, *arrs, eta, image_z)
        if not np.array_equal(s1, s2):
            print(f"{n:>9}  backends disagree on ray status", file=sys.stderr)
            return 1
        alive = s1 == 0
        if np.max(np.abs(p1[alive] - p2[alive]), initial=0.0) > 1e-10:
            print(f"{n:>9}  backends disagree on spot points", file=sys.stderr)
            return 1
        print(f"{n:>9}  {t_np * 1e3:>11.2f}  {t_cy * 1e3:>12.2f}  {t_np / t_cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
