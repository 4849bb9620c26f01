"""Compare the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--nodes 2000] [--graphs 50] [--cols 8] [--reps 50]

Both implementations are imported side by side, so the environment flag
does not matter here.  Outputs are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from suptlab import _kernels


def workload(nodes: int, graphs: int, cols: int, seed: int = 0):
    gen = np.random.default_rng(seed)
    sizes = np.full(graphs, nodes // graphs)
    ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    src, dst = [], []
    for g in range(graphs):
        lo, n = ptr[g], sizes[g]
        # a path plus ~n random chords per graph
        src += list(lo + np.arange(n - 1)) + list(lo + gen.integers(0, n, n))
        dst += list(lo + np.arange(1, n)) + list(lo + gen.integers(0, n, n))
    src, dst = np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    total = int(ptr[-1])
    return {
        "x": gen.standard_normal((total, cols)),
        "src": src,
        "dst": dst,
        "w_edge": gen.uniform(0.1, 1.0, src.size),
        "w_self": gen.uniform(0.1, 1.0, total),
        "ptr": ptr,
        "scores": gen.standard_normal(total),
    }


def cases(w):
    return {
        "propagate": lambda impl: impl.propagate(w["x"], w["src"], w["dst"], w["w_edge"], w["w_self"]),
        "segment_sum": lambda impl: impl.segment_sum(w["x"], w["ptr"]),
        "segment_topk_mask": lambda impl: impl.segment_topk_mask(w["x"], w["ptr"], 0.4),
        "tied_ranks": lambda impl: impl.tied_ranks(np.round(w["scores"], 1)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--graphs", type=int, default=50)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args(argv)
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")

    w = workload(args.nodes, args.graphs, args.cols)
    impls = [_kernels.numpy_impl, _kernels.numba_impl]
    print(f"nodes={args.nodes} graphs={args.graphs} cols={args.cols} edges={w['src'].size} reps={args.reps}")
    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, fn in cases(w).items():
        ref, fast = fn(impls[0]), fn(impls[1])
        if not np.allclose(ref, fast, rtol=0, atol=1e-12):
            raise SystemExit(f"{name}: implementations disagree")
        times = []
        for impl in impls:
            fn(impl)  # warm-up, includes jit compilation for numba
            best = min(timeit.repeat(lambda: fn(impl), number=args.reps, repeat=3)) / args.reps
            times.append(best * 1e6)
        print(f"{name:<20}{times[0]:>12.1f}{times[1]:>12.1f}{times[0] / times[1]:>9.1f}x")


if __name__ == "__main__":
    main()
