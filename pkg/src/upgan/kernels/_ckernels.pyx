# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback``; same signatures, same results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def _segment_sum_2d(real[:, ::1] values, const long long[::1] seg, Py_ssize_t n_segments, real[:, ::1] out):
    cdef Py_ssize_t e, k, s
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t width = values.shape[1]
    for e in range(n_rows):
        s = seg[e]
        for k in range(width):
            out[s, k] += values[e, k]


def segment_sum(values, segment_ids, Py_ssize_t n_segments):
    values = np.asarray(values)
    if values.dtype not in (np.float32, np.float64):
        values = values.astype(np.float64)
    seg = np.ascontiguousarray(segment_ids, dtype=np.int64)
    shape = values.shape
    flat = np.ascontiguousarray(values.reshape(shape[0], -1))
    out = np.zeros((n_segments, flat.shape[1]), dtype=flat.dtype)
    if shape[0]:
        _segment_sum_2d(flat, seg, n_segments, out)
    return out.reshape((n_segments,) + shape[1:])


def segment_softmax(scores, segment_ids, Py_ssize_t n_segments):
    cdef double[::1] x = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const long long[::1] seg = np.ascontiguousarray(segment_ids, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    peak_arr = np.full(n_segments, -INFINITY)
    denom_arr = np.zeros(n_segments)
    cdef double[::1] peak = peak_arr
    cdef double[::1] denom = denom_arr
    cdef Py_ssize_t e, s
    for e in range(n):
        s = seg[e]
        if x[e] > peak[s]:
            peak[s] = x[e]
    for e in range(n):
        s = seg[e]
        out[e] = exp(x[e] - peak[s])
        denom[s] += out[e]
    for e in range(n):
        out[e] /= denom[seg[e]]
    return out_arr


def bfs_depths(Py_ssize_t n_nodes, indptr, indices, sources):
    cdef const long long[::1] ptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const long long[::1] nbr = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const long long[::1] src = np.ascontiguousarray(sources, dtype=np.int64)
    depth_arr = np.full(n_nodes, -1, dtype=np.int64)
    queue_arr = np.empty(max(n_nodes, 1), dtype=np.int64)
    cdef long long[::1] depth = depth_arr
    cdef long long[::1] queue = queue_arr
    cdef Py_ssize_t head = 0, tail = 0, i, n, k
    for i in range(src.shape[0]):
        n = src[i]
        if depth[n] < 0:
            depth[n] = 0
            queue[tail] = n
            tail += 1
    while head < tail:
        n = queue[head]
        head += 1
        for i in range(ptr[n], ptr[n + 1]):
            k = nbr[i]
            if depth[k] < 0:
                depth[k] = depth[n] + 1
                queue[tail] = k
                tail += 1
    return depth_arr


def filtered_rank(scores, gold, filter_ptr, filter_idx, bint pessimistic=False):
    cdef double[:, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const long long[::1] g = np.ascontiguousarray(gold, dtype=np.int64)
    cdef const long long[::1] fptr = np.ascontiguousarray(filter_ptr, dtype=np.int64)
    cdef const long long[::1] fidx = np.ascontiguousarray(filter_idx, dtype=np.int64)
    cdef Py_ssize_t n_rows = s.shape[0], n_cols = s.shape[1]
    ranks_arr = np.empty(n_rows, dtype=np.int64)
    cdef long long[::1] ranks = ranks_arr
    skip_arr = np.zeros(n_cols, dtype=np.uint8)
    cdef unsigned char[::1] skip = skip_arr
    cdef Py_ssize_t b, c, i
    cdef double target
    cdef long long count
    for b in range(n_rows):
        for i in range(fptr[b], fptr[b + 1]):
            skip[fidx[i]] = 1
        skip[g[b]] = 1
        target = s[b, g[b]]
        count = 0
        for c in range(n_cols):
            if skip[c]:
                continue
            if pessimistic:
                if s[b, c] >= target:
                    count += 1
            elif s[b, c] > target:
                count += 1
        ranks[b] = 1 + count
        for i in range(fptr[b], fptr[b + 1]):
            skip[fidx[i]] = 0
        skip[g[b]] = 0
    return ranks_arr


def categorical_sample(probs, uniforms):
    cdef double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[:, ::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n_rows = p.shape[0], n_cols = p.shape[1], n_draws = u.shape[1]
    out_arr = np.empty((n_rows, n_draws), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef double[::1] cdf = np.empty(n_cols, dtype=np.float64)
    cdef Py_ssize_t b, c, j, lo, hi, mid
    cdef double acc, x
    for b in range(n_rows):
        acc = 0.0
        for c in range(n_cols):
            acc += p[b, c]
            cdf[c] = acc
        for j in range(n_draws):
            x = u[b, j] * cdf[n_cols - 1]
            # first index with cdf > x
            lo = 0
            hi = n_cols
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf[mid] > x:
                    hi = mid
                else:
                    lo = mid + 1
            if lo > n_cols - 1:
                lo = n_cols - 1
            out[b, j] = lo
    return out_arr
