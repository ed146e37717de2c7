"""Sequential union-find kernels behind graph-based superpixel segmentation.

Every kernel here is jitted by numba when available. The undecorated Python
function stays reachable as ``kernel.py_func`` so tests can compare both paths.
"""

import numpy as np

from ._accel import njit


@njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(cache=True)
def _union(parent, rank, size, a, b):
    # a, b are roots; returns the new root
    if rank[a] > rank[b]:
        parent[b] = a
        size[a] += size[b]
        return a
    parent[a] = b
    size[b] += size[a]
    if rank[a] == rank[b]:
        rank[b] += 1
    return b


@njit(cache=True)
def segment_graph(n_vertices, edge_a, edge_b, edge_w, scale, min_size):
    """Merge a sorted edge list into components; returns the parent forest.

    Edges must already be sorted by (weight, a, b). Two components merge when
    the connecting weight is no larger than either component's internal
    difference plus ``scale / size``. A second sweep over the same order joins
    any component still smaller than ``min_size`` to its neighbour.
    """
    parent = np.arange(n_vertices)
    rank = np.zeros(n_vertices, dtype=np.int64)
    size = np.ones(n_vertices, dtype=np.int64)
    thresh = np.full(n_vertices, scale, dtype=np.float64)

    for i in range(edge_a.shape[0]):
        a = _find(parent, edge_a[i])
        b = _find(parent, edge_b[i])
        if a == b:
            continue
        w = edge_w[i]
        if w <= thresh[a] and w <= thresh[b]:
            r = _union(parent, rank, size, a, b)
            thresh[r] = w + scale / size[r]

    if min_size > 1:
        for i in range(edge_a.shape[0]):
            a = _find(parent, edge_a[i])
            b = _find(parent, edge_b[i])
            if a != b and (size[a] < min_size or size[b] < min_size):
                _union(parent, rank, size, a, b)

    for v in range(n_vertices):
        _find(parent, v)
    return parent


@njit(cache=True)
def raster_relabel(parent):
    """Map forest roots to contiguous ids in order of first appearance."""
    n = parent.shape[0]
    lookup = np.full(n, -1, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    nxt = 0
    for v in range(n):
        r = parent[v]
        if lookup[r] < 0:
            lookup[r] = nxt
            nxt += 1
        labels[v] = lookup[r]
    return labels
