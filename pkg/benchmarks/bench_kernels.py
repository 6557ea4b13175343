"""Time each kernel under the compiled and numpy backends.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from upgan import kernels


def workloads(rng):
    n_rows, n_seg = 200_000, 4096
    seg = np.sort(rng.integers(n_seg, size=n_rows))
    vals = rng.normal(size=(n_rows, 8))
    scores = rng.normal(size=n_rows)

    n_nodes = 50_000
    deg = rng.integers(1, 6, size=n_nodes)
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    indices = rng.integers(n_nodes, size=indptr[-1]).astype(np.int64)
    sources = np.arange(100, dtype=np.int64)

    table = rng.normal(size=(512, 5000))
    gold = rng.integers(5000, size=512).astype(np.int64)
    fptr = np.arange(0, 513 * 20, 20, dtype=np.int64)
    fidx = rng.integers(5000, size=512 * 20).astype(np.int64)

    probs = rng.random((4096, 1024))
    probs /= probs.sum(axis=1, keepdims=True)
    unif = rng.random((4096, 20))

    return {
        "segment_sum": (vals, seg, n_seg),
        "segment_softmax": (scores, seg, n_seg),
        "bfs_depths": (n_nodes, indptr, indices, sources),
        "filtered_rank": (table, gold, fptr, fidx, False),
        "categorical_sample": (probs, unif),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    cases = workloads(np.random.default_rng(0))
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy backend only")
    names = list(backends)
    print("\t".join(["kernel"] + [f"{b}_ms" for b in names] + (["speedup"] if len(names) > 1 else [])))
    for kernel, call_args in cases.items():
        times = []
        for b in names:
            fn = getattr(backends[b], kernel)
            fn(*call_args)
            best = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
            times.append(best * 1e3)
        row = [kernel] + [f"{t:.2f}" for t in times]
        if len(times) > 1:
            row.append(f"{times[0] / times[1]:.1f}x")
        print("\t".join(row))


if __name__ == "__main__":
    main()
