"""Timing harness: hash-table neighborhood lookups vs a KD-tree baseline.

The hash route answers one neighbor probe in O(1) independent of the
cloud size; the KD-tree baseline pays a build plus per-query costs that
grow with the cloud.  ``run_benchmark`` reports both, alongside wall
times for voxelization, kernel-map construction, and a convolution
forward pass.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.spatial import cKDTree

from .layers import ConvLayer, submanifold_conv
from .sparse import SparseTensor, build_kernel_map, voxelize


def _best_of(fn, repeats: int = 3) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(
    point_counts,
    num_queries: int = 10_000,
    knn_k: int = 16,
    channels: int = 4,
    seed: int = 0,
) -> list[dict]:
    """One row per cloud size; density is held constant as N grows."""
    rows = []
    for n in point_counts:
        rng = np.random.default_rng(seed)
        half_extent = 4.0 * (n / 1e4) ** (1.0 / 3.0)
        points = rng.uniform(-half_extent, half_extent, size=(int(n), 3))
        feats = rng.normal(size=(int(n), channels))

        t0 = time.perf_counter()
        vox = voxelize(points, feats, np.zeros(int(n), dtype=np.int64), 0.05)
        voxelize_s = time.perf_counter() - t0
        cmap = vox.tensor.coords

        t0 = time.perf_counter()
        kmap = build_kernel_map(cmap, cmap, 3)
        kmap_s = time.perf_counter() - t0

        layer = ConvLayer(channels, channels, 3, rng=rng)
        tensor = SparseTensor(cmap, vox.tensor.features.data)
        t0 = time.perf_counter()
        submanifold_conv(tensor, layer, kmap)
        conv_s = time.perf_counter() - t0

        # per-query hash probe: random active voxels displaced by one step
        idx = rng.integers(0, len(cmap), size=num_queries)
        queries = cmap.coords[idx].copy()
        queries[:, 1:] += rng.integers(-1, 2, size=(num_queries, 3))
        hash_s = _best_of(lambda: cmap.lookup_rows(queries))

        tree_pts = points
        def knn():
            tree = cKDTree(tree_pts)
            tree.query(tree_pts, k=knn_k, workers=1)
        kdtree_s = _best_of(knn, repeats=1)

        rows.append({
            "points": int(n),
            "voxels": len(cmap),
            "voxelize_s": voxelize_s,
            "kernel_map_s": kmap_s,
            "conv_forward_s": conv_s,
            "hash_query_us": hash_s / num_queries * 1e6,
            "kdtree_total_s": kdtree_s,
        })
    return rows
