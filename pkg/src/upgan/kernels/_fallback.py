"""Pure numpy implementations of the hot kernels.

These are the reference versions; the Cython module must agree with them.
"""
from collections import deque

import numpy as np


def segment_sum(values, segment_ids, n_segments):
    values = np.asarray(values)
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, np.asarray(segment_ids, dtype=np.int64), values)
    return out


def segment_softmax(scores, segment_ids, n_segments):
    scores = np.asarray(scores, dtype=np.float64)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if scores.size == 0:
        return scores.copy()
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, seg, scores)
    ex = np.exp(scores - peak[seg])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg, ex)
    return ex / denom[seg]


def bfs_depths(n_nodes, indptr, indices, sources):
    depth = np.full(n_nodes, -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        if depth[s] < 0:
            depth[s] = 0
            queue.append(int(s))
    while queue:
        n = queue.popleft()
        for k in indices[indptr[n]:indptr[n + 1]]:
            if depth[k] < 0:
                depth[k] = depth[n] + 1
                queue.append(int(k))
    return depth


def filtered_rank(scores, gold, filter_ptr, filter_idx, pessimistic=False):
    """Rank of gold per row; entities listed in the row's filter segment are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    n_rows, n_cols = scores.shape
    ranks = np.empty(n_rows, dtype=np.int64)
    for b in range(n_rows):
        row = scores[b]
        g = gold[b]
        target = row[g]
        beats = row >= target if pessimistic else row > target
        beats[g] = False
        skip = filter_idx[filter_ptr[b]:filter_ptr[b + 1]]
        beats[skip] = False
        ranks[b] = 1 + int(np.count_nonzero(beats))
    return ranks


def categorical_sample(probs, uniforms):
    """Inverse-CDF draws: row b of the result indexes into probs[b]."""
    probs = np.asarray(probs, dtype=np.float64)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    cdf = np.cumsum(probs, axis=1)
    out = np.empty(uniforms.shape, dtype=np.int64)
    last = probs.shape[1] - 1
    for b in range(probs.shape[0]):
        u = uniforms[b] * cdf[b, -1]
        idx = np.searchsorted(cdf[b], u, side="right")
        out[b] = np.minimum(idx, last)
    return out
