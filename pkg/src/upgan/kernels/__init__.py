"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled module ``_ckernels`` is used when it has been built and
``UPGAN_PURE_PYTHON`` is not set; otherwise the numpy versions in
``_fallback`` are used. ``BACKEND`` names the active choice.

Kernels
-------
segment_sum(values, segment_ids, n_segments)
    Row-wise scatter-add of ``values`` into ``n_segments`` buckets.
segment_softmax(scores, segment_ids, n_segments)
    Softmax of a flat score vector restricted to each segment.
bfs_depths(n_nodes, indptr, indices, sources)
    Hop distance from the nearest source over a CSR adjacency (-1 if unreachable).
filtered_rank(scores, gold, filter_ptr, filter_idx, pessimistic)
    Filtered rank of the gold column per row.
categorical_sample(probs, uniforms)
    Inverse-CDF sampling, one row of draws per probability row.
"""
import os

from . import _fallback

_NAMES = ("segment_sum", "segment_softmax", "bfs_depths", "filtered_rank", "categorical_sample")


def _load_compiled():
    if os.environ.get("UPGAN_PURE_PYTHON"):
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback

segment_sum = _impl.segment_sum
segment_softmax = _impl.segment_softmax
bfs_depths = _impl.bfs_depths
filtered_rank = _impl.filtered_rank
categorical_sample = _impl.categorical_sample


def backends():
    """Map of backend name to kernel module, for cross-checking and benchmarks."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


__all__ = list(_NAMES) + ["BACKEND", "backends"]
