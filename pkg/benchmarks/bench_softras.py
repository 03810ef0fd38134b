"""Time the soft rasterizer forward and backward pass per backend.

    python3 benchmarks/bench_softras.py --size 64 --repeats 5
"""
import argparse
import time

import numpy as np

from mpk import softras
from mpk.synth import generate_scene


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64, help="crop side in pixels")
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    sc = generate_scene(args.seed, {"H": args.size, "W": args.size, "margin": max(3, args.size // 10)})
    v = sc.gt_vertices_px[:, :2]
    w = np.full(sc.topology.vertex_count, 0.9)
    gh, gw, origin = softras.padded_grid(args.size, args.size)
    G = np.random.default_rng(args.seed).normal(size=(gh, gw))

    rows = []
    for be in softras.available_backends():
        fwd = _best_of(lambda: softras.render_soft_silhouette(v, w, sc.topology, (gh, gw), args.sigma,
                                                              origin, backend=be), args.repeats)
        bwd = _best_of(lambda: softras.render_soft_silhouette_vjp(v, w, sc.topology, (gh, gw), G, args.sigma,
                                                                  origin, backend=be), args.repeats)
        rows.append((be, fwd, bwd))

    print(f"grid {gh}x{gw}, {sc.topology.face_count} faces, sigma {args.sigma}, best of {args.repeats}")
    print(f"{'backend':<8} {'forward ms':>11} {'vjp ms':>9}")
    for be, fwd, bwd in rows:
        print(f"{be:<8} {1e3 * fwd:11.2f} {1e3 * bwd:9.2f}")
    if len(rows) > 1:
        ref = dict((r[0], r) for r in rows)["python"]
        for be, fwd, bwd in rows:
            if be != "python":
                print(f"{be} speedup: forward {ref[1] / fwd:.1f}x, vjp {ref[2] / bwd:.1f}x")


if __name__ == "__main__":
    main()
