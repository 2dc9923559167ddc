"""Hash-based voxel coordinate machinery.

Coordinates are 4-vectors (batch, x, y, z) of int64; x, y, z are voxel
indices on the grid of the tensor's own level, so downsampling divides
them.  A CoordinateMap is the bijection between coordinates and dense
feature rows; lookups go through a 64-bit FNV-style hash table whose
collisions are resolved by explicit coordinate comparison, so correctness
never depends on hash quality.

Canonical row order is the lexicographic (batch, x, y, z) sort, fixed at
map construction, which makes every downstream result independent of
point insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigurationError,
    EmptyInputError,
    InternalConsistencyError,
    RejectedInputError,
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a_rows(coords: np.ndarray) -> np.ndarray:
    """Vectorized FNV-style mix of each (batch, x, y, z) row into a uint64."""
    h = np.full(len(coords), _FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(_FNV_PRIME)
    for col in range(4):
        lane = np.ascontiguousarray(coords[:, col], dtype=np.int64).view(np.uint64)
        h = (h ^ lane) * prime
    return h


def _fnv1a_single(b: int, x: int, y: int, z: int) -> int:
    h = _FNV_OFFSET
    for lane in (b, x, y, z):
        h = ((h ^ (lane & _MASK64)) * _FNV_PRIME) & _MASK64
    return h


class CoordinateMap:
    """Bijection between unique voxel coordinates and rows [0, N).

    Immutable after construction; rows follow the canonical lexicographic
    coordinate order regardless of insertion order.
    """

    __slots__ = ("coords", "_table", "_collisions")

    def __init__(self, coords, table, collisions):
        self.coords = coords
        self._table = table
        self._collisions = collisions

    @classmethod
    def build(cls, coords: np.ndarray) -> tuple["CoordinateMap", np.ndarray]:
        """Hash-insert possibly duplicated (M, 4) coordinates.

        Returns the finalized map plus the length-M inverse index mapping
        every input row to its canonical row.
        """
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise RejectedInputError(f"expected (M, 4) coordinates, got {coords.shape}")
        if len(coords) == 0:
            raise EmptyInputError("cannot build a CoordinateMap from zero coordinates")
        if coords[:, 0].min() < 0:
            raise RejectedInputError("batch indices must be non-negative")

        hashes = _fnv1a_rows(coords).tolist()
        cb, cx, cy, cz = (coords[:, j].tolist() for j in range(4))
        table: dict[int, int] = {}
        buckets: dict[int, list[int]] = {}
        first_rows: list[int] = []
        inverse = np.empty(len(coords), dtype=np.int64)

        for i, h in enumerate(hashes):
            hit = table.get(h, -1)
            if hit < 0:
                table[h] = d = len(first_rows)
                first_rows.append(i)
                inverse[i] = d
                continue
            r = first_rows[hit]
            if cb[i] == cb[r] and cx[i] == cx[r] and cy[i] == cy[r] and cz[i] == cz[r]:
                inverse[i] = hit
                continue
            bucket = buckets.setdefault(h, [hit])
            for d in bucket[1:]:
                r = first_rows[d]
                if cb[i] == cb[r] and cx[i] == cx[r] and cy[i] == cy[r] and cz[i] == cz[r]:
                    inverse[i] = d
                    break
            else:
                d = len(first_rows)
                first_rows.append(i)
                bucket.append(d)
                inverse[i] = d

        unique = coords[np.asarray(first_rows, dtype=np.int64)]
        order = np.lexsort((unique[:, 3], unique[:, 2], unique[:, 1], unique[:, 0]))
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order), dtype=np.int64)
        canonical = np.ascontiguousarray(unique[order])

        final_table = {h: int(rank[d]) for h, d in table.items()}
        final_collisions = {
            h: [int(rank[d]) for d in ds] for h, ds in buckets.items()
        }
        return cls(canonical, final_table, final_collisions), rank[inverse]

    def __len__(self) -> int:
        return len(self.coords)

    def lookup_rows(self, query: np.ndarray) -> np.ndarray:
        """Rows of the queried (M, 4) coordinates; -1 where absent."""
        query = np.ascontiguousarray(query, dtype=np.int64)
        hashes = _fnv1a_rows(query).tolist()
        table = self._table
        rows = np.fromiter(
            (table.get(h, -1) for h in hashes), dtype=np.int64, count=len(hashes)
        )
        hit = np.nonzero(rows >= 0)[0]
        if hit.size:
            ok = (self.coords[rows[hit]] == query[hit]).all(axis=1)
            bad = hit[~ok]
            rows[bad] = -1
            if self._collisions:
                # a mismatched first entry may still hide a colliding match
                for i in bad.tolist():
                    for r in self._collisions.get(hashes[i], ()):
                        if (self.coords[r] == query[i]).all():
                            rows[i] = r
                            break
        return rows

    def find_row(self, coord) -> int:
        """Row of one coordinate tuple, or -1."""
        b, x, y, z = (int(v) for v in coord)
        h = _fnv1a_single(b, x, y, z)
        r = self._table.get(h, -1)
        if r < 0:
            return -1
        if tuple(self.coords[r]) == (b, x, y, z):
            return r
        for cand in self._collisions.get(h, ()):
            if tuple(self.coords[cand]) == (b, x, y, z):
                return cand
        return -1

    def __contains__(self, coord) -> bool:
        return self.find_row(coord) >= 0

    def same_as(self, other: "CoordinateMap") -> bool:
        return self is other or np.array_equal(self.coords, other.coords)

    @property
    def batch_ids(self) -> np.ndarray:
        return self.coords[:, 0]

    def batch_segments(self) -> tuple[np.ndarray, int]:
        """Per-row segment index over the distinct batch ids present."""
        ids, segment = np.unique(self.coords[:, 0], return_inverse=True)
        return segment.astype(np.int64), len(ids)


class SparseTensor:
    """Active voxel coordinates plus a dense feature matrix over them."""

    __slots__ = ("coords", "features", "stride")

    def __init__(self, coords: CoordinateMap, features, stride: int = 1):
        if not isinstance(features, ad.Value):
            features = ad.Value(features)
        if features.data.ndim != 2 or len(features.data) != len(coords):
            raise RejectedInputError(
                f"features {features.data.shape} do not match {len(coords)} voxels"
            )
        if stride < 1 or (stride & (stride - 1)) != 0:
            raise ConfigurationError(f"stride must be a power of two, got {stride}")
        if not np.isfinite(features.data).all():
            raise RejectedInputError("sparse tensor features must be finite")
        self.coords = coords
        self.features = features
        self.stride = stride

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.features.data.shape[1]

    def with_features(self, features) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.stride)


@dataclass
class VoxelizationResult:
    tensor: SparseTensor
    point_to_voxel: np.ndarray
    voxel_labels: np.ndarray
    voxel_counts: np.ndarray


def quantize(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """floor(point / voxel_size) per component; boundary points go up."""
    if not voxel_size > 0:
        raise ConfigurationError(f"voxel_size must be positive, got {voxel_size}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise RejectedInputError(f"expected (P, 3) points, got {points.shape}")
    if not np.isfinite(points).all():
        raise RejectedInputError("points contain non-finite values")
    return np.floor(points / voxel_size).astype(np.int64)


def voxelize(
    positions: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    voxel_size: float,
    batch_index=0,
) -> VoxelizationResult:
    """Quantize points onto the voxel grid via hash insertion.

    Voxel features are the arithmetic mean of member point features; the
    voxel label is the majority class, ties broken by the smallest id.
    ``batch_index`` may be a scalar or a per-point array.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise EmptyInputError("cannot voxelize an empty point cloud")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) != len(positions) or len(labels) != len(positions):
        raise RejectedInputError("positions, features and labels must align")

    quantized = quantize(positions, voxel_size)
    batch = np.broadcast_to(
        np.asarray(batch_index, dtype=np.int64), (len(positions),)
    )
    coords = np.column_stack([batch, quantized])
    cmap, point_to_voxel = CoordinateMap.build(coords)

    n = len(cmap)
    counts = np.bincount(point_to_voxel, minlength=n)
    sums = np.zeros((n, features.shape[1]))
    np.add.at(sums, point_to_voxel, features)
    mean_features = sums / counts[:, None]

    pairs = np.stack([point_to_voxel, labels], axis=1)
    uniq, pair_counts = np.unique(pairs, axis=0, return_counts=True)
    order = np.lexsort((uniq[:, 1], -pair_counts, uniq[:, 0]))
    _, first = np.unique(uniq[order, 0], return_index=True)
    winners = order[first]
    voxel_labels = np.empty(n, dtype=np.int64)
    voxel_labels[uniq[winners, 0]] = uniq[winners, 1]

    tensor = SparseTensor(cmap, mean_features, stride=1)
    return VoxelizationResult(tensor, point_to_voxel, voxel_labels, counts)


def devoxelize(voxel_values: np.ndarray, point_to_voxel: np.ndarray) -> np.ndarray:
    """Gather per-voxel rows back to points via the stored index."""
    voxel_values = np.asarray(voxel_values)
    point_to_voxel = np.asarray(point_to_voxel, dtype=np.int64)
    if point_to_voxel.size and (
        point_to_voxel.min() < 0 or point_to_voxel.max() >= len(voxel_values)
    ):
        raise InternalConsistencyError("point_to_voxel index out of range")
    return voxel_values[point_to_voxel]


def downsample_coords(cmap: CoordinateMap, factor: int) -> CoordinateMap:
    """Unique floor-division of (x, y, z) by ``factor``; batch preserved."""
    if factor < 2:
        raise ConfigurationError(f"downsample factor must be >= 2, got {factor}")
    coarse = cmap.coords.copy()
    coarse[:, 1:] //= factor
    out, _ = CoordinateMap.build(coarse)
    return out


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """All (dx, dy, dz) offsets of a cubic kernel, lexicographic order."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd positive, got {kernel_size}")
    r = kernel_size // 2
    axis = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


class KernelMap:
    """Per-kernel-offset (in_row, out_row) pair lists for gather-scatter.

    Within each offset list both row sets are duplicate-free and pairs are
    sorted by out_row, which keeps scatter accumulation deterministic.
    """

    __slots__ = (
        "kernel_size", "in_stride", "out_stride", "n_in", "n_out",
        "offsets", "pairs",
    )

    def __init__(self, kernel_size, in_stride, out_stride, n_in, n_out, offsets, pairs):
        self.kernel_size = kernel_size
        self.in_stride = in_stride
        self.out_stride = out_stride
        self.n_in = n_in
        self.n_out = n_out
        self.offsets = offsets
        self.pairs = pairs

    @property
    def volume(self) -> int:
        return len(self.offsets)

    def num_pairs(self) -> int:
        return sum(len(i) for i, _ in self.pairs)

    def transposed(self) -> "KernelMap":
        """Swap the gather/scatter roles, keeping the offset association."""
        swapped = []
        for in_rows, out_rows in self.pairs:
            order = np.argsort(in_rows, kind="stable")
            swapped.append((out_rows[order], in_rows[order]))
        return KernelMap(
            self.kernel_size, self.out_stride, self.in_stride,
            self.n_out, self.n_in, self.offsets, swapped,
        )


def build_kernel_map(
    in_map: CoordinateMap,
    out_map: CoordinateMap,
    kernel_size: int,
    stride: int = 1,
    in_stride: int = 1,
) -> KernelMap:
    """Hash-lookup neighborhood construction between two coordinate maps.

    For each output coordinate c and offset k the input grid is probed at
    c * stride + k; present neighbors contribute one (in_row, out_row)
    pair to that offset's list.
    """
    offsets = kernel_offsets(kernel_size)
    out_coords = out_map.coords
    n_out = len(out_map)
    arange_out = np.arange(n_out, dtype=np.int64)
    pairs = []
    for offset in offsets:
        query = out_coords.copy()
        query[:, 1:] = query[:, 1:] * stride + offset
        rows = in_map.lookup_rows(query)
        mask = rows >= 0
        pairs.append((rows[mask], arange_out[mask]))
    return KernelMap(
        kernel_size, in_stride, in_stride * stride,
        len(in_map), n_out, offsets, pairs,
    )
