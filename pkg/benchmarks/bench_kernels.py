"""Compiled vs numpy triangulation kernels.

Times each kernel on a 30-frame track and a full ``triangulate_object`` call
under both backends, then prints a table (or JSON with ``--json``).

    python benchmarks/bench_kernels.py [--repeat 20] [--json]
"""

import argparse
import json
import time

import numpy as np

from egopoint import _kernels_py, kernels
from egopoint import triangulation as tri
from egopoint.geometry import CameraIntrinsics
from egopoint.simulator import EpisodeConfig, simulate_episode

try:
    from egopoint import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_inputs(seed=0):
    k = CameraIntrinsics.default()
    ep = simulate_episode(seed, k, EpisodeConfig())
    track = ep.tracks[0]
    rot, trans = tri._extrinsics(track, None)
    cands = np.random.default_rng(seed).normal(ep.true_object_state()[0], 0.01, (256, 3))
    return k, ep, track, rot, trans, cands


def bench(repeat=20, seed=0):
    k, ep, track, rot, trans, cands = kernel_inputs(seed)
    intr = (k.fx, k.fy, k.cx, k.cy)
    uv = np.ascontiguousarray(track.pixels)
    q = cands[0]
    cases = {
        "pairwise_sampson": lambda m: m.pairwise_sampson(rot, trans, uv, intr, 1e-3),
        "score_candidates": lambda m: m.score_candidates(cands, rot, trans, uv, intr, 4.0),
        "reprojection_errors": lambda m: m.reprojection_errors(cands, rot, trans, uv, intr),
        "huber_system": lambda m: m.huber_system(q, rot, trans, uv, intr, 2.0),
    }
    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    rows = []
    for name, fn in cases.items():
        row = {"case": name}
        for b, mod in backends.items():
            row[b] = _best(lambda: fn(mod), repeat)
        rows.append(row)

    # end to end: swap the module the triangulation code calls into
    def run_object():
        tri.triangulate_object(ep.tracks, k, tri.TriangulationConfig(), seed, reference=ep.t0)

    row = {"case": "triangulate_object"}
    saved = {n: getattr(kernels, n) for n in cases}
    try:
        for b, mod in backends.items():
            for n in cases:
                setattr(kernels, n, getattr(mod, n))
            row[b] = _best(run_object, max(3, repeat // 4))
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)
    rows.append(row)

    # end to end including simulation, which the kernels do not touch
    def run_demo():
        e = simulate_episode(seed, k, EpisodeConfig())
        tri.triangulate_object(e.tracks, k, tri.TriangulationConfig(), seed, reference=e.t0)

    row = {"case": "simulate+triangulate"}
    try:
        for b, mod in backends.items():
            for n in cases:
                setattr(kernels, n, getattr(mod, n))
            row[b] = _best(run_demo, 3)
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)
    rows.append(row)
    for r in rows:
        if "cython" in r:
            r["speedup"] = r["python"] / r["cython"]
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    rows = bench(args.repeat, args.seed)
    if args.json:
        print(json.dumps({"active_backend": kernels.BACKEND, "rows": rows}, indent=2))
        return
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'case':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for r in rows:
        c = r.get("cython")
        print(f"{r['case']:<24}{1e3 * r['python']:>12.3f}"
              + (f"{1e3 * c:>12.3f}{r['speedup']:>9.1f}x" if c is not None else f"{'n/a':>12}{'':>10}"))


if __name__ == "__main__":
    main()
