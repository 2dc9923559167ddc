"""Coordinate hashing, voxelization, and kernel-map construction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mssnet.sparse as sp
from mssnet.errors import (
    ConfigurationError,
    EmptyInputError,
    InternalConsistencyError,
    RejectedInputError,
)
from mssnet.sparse import (
    CoordinateMap,
    build_kernel_map,
    devoxelize,
    downsample_coords,
    quantize,
    voxelize,
)

from oracles import (
    brute_force_kernel_map,
    kernel_map_as_sets,
    majority_label,
    sort_group_voxelize,
)


class TestQuantize:
    def test_origin(self):
        assert quantize(np.zeros((1, 3)), 0.05).tolist() == [[0, 0, 0]]

    def test_hand_floor_division(self):
        # floor(0.12/0.05)=2, floor(-0.01/0.05)=-1, floor(0.26/0.05)=5
        out = quantize(np.array([[0.12, -0.01, 0.26]]), 0.05)
        assert out.tolist() == [[2, -1, 5]]

    def test_boundary_point_lands_in_upper_cell(self):
        out = quantize(np.array([[0.05, 0.05, 0.05]]), 0.05)
        assert out.tolist() == [[1, 1, 1]]

    def test_rejects_non_finite(self):
        with pytest.raises(RejectedInputError):
            quantize(np.array([[np.nan, 0.0, 0.0]]), 0.05)

    def test_rejects_bad_voxel_size(self):
        with pytest.raises(ConfigurationError):
            quantize(np.zeros((1, 3)), 0.0)


class TestCoordinateMap:
    def test_bijection_and_canonical_order(self):
        rng = np.random.default_rng(0)
        coords = rng.integers(-10, 10, size=(200, 4))
        coords[:, 0] = rng.integers(0, 3, size=200)
        cmap, inverse = CoordinateMap.build(coords)
        assert np.array_equal(cmap.coords[inverse], coords)
        # strictly increasing lexicographic order, hence no duplicates
        as_tuples = [tuple(c) for c in cmap.coords]
        assert as_tuples == sorted(as_tuples)
        assert len(set(as_tuples)) == len(as_tuples)
        for row, c in enumerate(as_tuples):
            assert cmap.find_row(c) == row

    def test_lookup_missing(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0], [0, 1, 0, 0]]))
        rows = cmap.lookup_rows(np.array([[0, 0, 0, 0], [0, 9, 9, 9]]))
        assert rows[0] >= 0 and rows[1] == -1
        assert (0, 9, 9, 9) not in cmap

    def test_insertion_order_irrelevant(self):
        rng = np.random.default_rng(1)
        coords = rng.integers(-4, 4, size=(100, 4))
        coords[:, 0] = 0
        a, _ = CoordinateMap.build(coords)
        b, _ = CoordinateMap.build(coords[::-1])
        assert np.array_equal(a.coords, b.coords)

    def test_correct_under_degenerate_hash(self, monkeypatch):
        # collisions resolved by the table: a 4-bucket hash must still work
        monkeypatch.setattr(
            sp, "_fnv1a_rows",
            lambda coords: (coords.sum(axis=1) % 4).astype(np.uint64),
        )
        monkeypatch.setattr(
            sp, "_fnv1a_single", lambda b, x, y, z: int((b + x + y + z) % 4)
        )
        rng = np.random.default_rng(2)
        coords = rng.integers(0, 6, size=(300, 4))
        coords[:, 0] = 0
        cmap, inverse = CoordinateMap.build(coords)
        assert np.array_equal(cmap.coords[inverse], coords)
        rows = cmap.lookup_rows(cmap.coords)
        assert np.array_equal(rows, np.arange(len(cmap)))
        assert cmap.lookup_rows(np.array([[0, -99, 0, 0]]))[0] == -1
        assert cmap.find_row((0, -99, 0, 0)) == -1

    def test_rejects_negative_batch(self):
        with pytest.raises(RejectedInputError):
            CoordinateMap.build(np.array([[-1, 0, 0, 0]]))


class TestVoxelize:
    def test_mean_feature(self):
        pos = np.array([[0.01, 0.01, 0.01], [0.02, 0.0, 0.0], [0.0, 0.03, 0.0]])
        res = voxelize(pos, np.array([[1.0], [2.0], [3.0]]), np.zeros(3, int), 0.05)
        assert len(res.tensor) == 1
        assert res.tensor.features.data.tolist() == [[2.0]]

    def test_majority_label(self):
        pos = np.zeros((3, 3))
        res = voxelize(pos, np.ones((3, 1)), np.array([1, 1, 2]), 0.05)
        assert res.voxel_labels.tolist() == [1]

    def test_tie_breaks_to_smallest_id(self):
        pos = np.zeros((4, 3))
        res = voxelize(pos, np.ones((4, 1)), np.array([3, 1, 3, 1]), 0.05)
        assert res.voxel_labels.tolist() == [1]

    def test_matches_sort_group_oracle(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(size=(10_000, 3))
        feats = rng.normal(size=(10_000, 3))
        labels = rng.integers(0, 5, size=10_000)
        res = voxelize(pos, feats, labels, 0.4)
        coords, mean_feats, vlabels, counts, p2v = sort_group_voxelize(
            pos, feats, labels, 0.4
        )
        assert np.array_equal(res.tensor.coords.coords, coords)
        np.testing.assert_allclose(res.tensor.features.data, mean_feats, atol=1e-12)
        assert np.array_equal(res.voxel_labels, vlabels)
        assert np.array_equal(res.voxel_counts, counts)
        assert np.array_equal(res.point_to_voxel, p2v)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        pos = rng.normal(size=(n, 3))
        feats = rng.normal(size=(n, 2))
        labels = rng.integers(0, 3, size=n)
        perm = rng.permutation(n)
        a = voxelize(pos, feats, labels, 0.3)
        b = voxelize(pos[perm], feats[perm], labels[perm], 0.3)
        assert np.array_equal(a.tensor.coords.coords, b.tensor.coords.coords)
        np.testing.assert_allclose(a.tensor.features.data, b.tensor.features.data, atol=1e-12)
        assert np.array_equal(a.voxel_labels, b.voxel_labels)
        # b's point i is a's point perm[i]
        assert np.array_equal(a.point_to_voxel[perm], b.point_to_voxel)

    def test_majority_count_dominates(self):
        rng = np.random.default_rng(4)
        pos = rng.normal(size=(500, 3)) * 0.2
        labels = rng.integers(0, 4, size=500)
        res = voxelize(pos, np.ones((500, 1)), labels, 0.25)
        for v in range(len(res.tensor)):
            member = labels[res.point_to_voxel == v]
            chosen = res.voxel_labels[v]
            chosen_count = int((member == chosen).sum())
            for other in np.unique(member):
                assert chosen_count >= int((member == other).sum())
            assert chosen == majority_label(member)

    def test_counts_partition_points(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(size=(777, 3))
        res = voxelize(pos, np.ones((777, 1)), np.zeros(777, int), 0.5)
        assert res.voxel_counts.sum() == 777
        assert res.voxel_counts.min() >= 1

    def test_empty_cloud(self):
        with pytest.raises(EmptyInputError):
            voxelize(np.zeros((0, 3)), np.zeros((0, 1)), np.zeros(0, int), 0.05)


class TestDevoxelize:
    def test_identity(self):
        v = np.arange(12.0).reshape(4, 3)
        assert np.array_equal(devoxelize(v, np.arange(4)), v)

    def test_hand_gather(self):
        out = devoxelize(np.array([[1, 0], [0, 1]]), np.array([1, 0, 1]))
        assert out.tolist() == [[0, 1], [1, 0], [0, 1]]

    def test_round_trip_constant_per_voxel(self):
        rng = np.random.default_rng(6)
        pos = rng.normal(size=(300, 3))
        res = voxelize(pos, np.ones((300, 1)), np.zeros(300, int), 0.4)
        per_voxel = rng.normal(size=(len(res.tensor), 2))
        per_point = devoxelize(per_voxel, res.point_to_voxel)
        back = voxelize(pos, per_point, np.zeros(300, int), 0.4)
        np.testing.assert_allclose(back.tensor.features.data, per_voxel, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(InternalConsistencyError):
            devoxelize(np.ones((2, 1)), np.array([0, 5]))


class TestDownsample:
    def test_two_coords_merge(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0], [0, 1, 1, 1]]))
        out = downsample_coords(cmap, 2)
        assert out.coords.tolist() == [[0, 0, 0, 0]]

    def test_single_coordinate(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 5, -3, 7]]))
        out = downsample_coords(cmap, 2)
        assert out.coords.tolist() == [[0, 2, -2, 3]]

    def test_matches_set_comprehension(self):
        rng = np.random.default_rng(7)
        coords = rng.integers(-20, 20, size=(150, 4))
        coords[:, 0] = rng.integers(0, 2, size=150)
        cmap, _ = CoordinateMap.build(coords)
        out = downsample_coords(cmap, 3)
        expected = sorted({
            (int(b), int(x) // 3, int(y) // 3, int(z) // 3)
            for b, x, y, z in cmap.coords
        })
        assert [tuple(c) for c in out.coords] == expected

    @given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(2, 4))
    @settings(max_examples=25, deadline=None)
    def test_composition(self, seed, a, b):
        rng = np.random.default_rng(seed)
        coords = rng.integers(-30, 30, size=(40, 4))
        coords[:, 0] = 0
        cmap, _ = CoordinateMap.build(coords)
        two_step = downsample_coords(downsample_coords(cmap, a), b)
        one_step = downsample_coords(cmap, a * b)
        assert np.array_equal(two_step.coords, one_step.coords)

    def test_rejects_factor_one(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0]]))
        with pytest.raises(ConfigurationError):
            downsample_coords(cmap, 1)


class TestKernelMap:
    def test_k1_is_identity_pairing(self):
        rng = np.random.default_rng(8)
        coords = rng.integers(-5, 5, size=(60, 4))
        coords[:, 0] = 0
        cmap, _ = CoordinateMap.build(coords)
        km = build_kernel_map(cmap, cmap, 1)
        assert km.volume == 1
        in_rows, out_rows = km.pairs[0]
        assert np.array_equal(in_rows, np.arange(len(cmap)))
        assert np.array_equal(out_rows, np.arange(len(cmap)))

    def test_two_adjacent_voxels(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0], [0, 1, 0, 0]]))
        km = build_kernel_map(cmap, cmap, 3)
        sets = kernel_map_as_sets(km)
        assert sets[(0, 0, 0)] == {(0, 0), (1, 1)}
        assert sets[(1, 0, 0)] == {(1, 0)}
        assert sets[(-1, 0, 0)] == {(0, 1)}
        assert sum(len(v) for v in sets.values()) == 4

    def test_matches_brute_force_submanifold(self):
        rng = np.random.default_rng(9)
        for trial in range(5):
            coords = rng.integers(-6, 6, size=(80, 4))
            coords[:, 0] = rng.integers(0, 2, size=80)
            cmap, _ = CoordinateMap.build(coords)
            km = build_kernel_map(cmap, cmap, 3)
            expected = brute_force_kernel_map(cmap.coords, cmap.coords, 3)
            assert kernel_map_as_sets(km) == expected

    def test_matches_brute_force_strided(self):
        rng = np.random.default_rng(10)
        coords = rng.integers(-8, 8, size=(100, 4))
        coords[:, 0] = 0
        cmap, _ = CoordinateMap.build(coords)
        out_map = downsample_coords(cmap, 2)
        km = build_kernel_map(cmap, out_map, 3, stride=2)
        expected = brute_force_kernel_map(cmap.coords, out_map.coords, 3, stride=2)
        assert kernel_map_as_sets(km) == expected

    def test_rows_unique_within_offset(self):
        rng = np.random.default_rng(11)
        coords = rng.integers(-5, 5, size=(120, 4))
        coords[:, 0] = 0
        cmap, _ = CoordinateMap.build(coords)
        for km in (
            build_kernel_map(cmap, cmap, 5),
            build_kernel_map(cmap, downsample_coords(cmap, 2), 3, stride=2),
        ):
            for in_rows, out_rows in km.pairs:
                assert len(np.unique(out_rows)) == len(out_rows)
                assert len(np.unique(in_rows)) == len(in_rows)

    def test_transposed_swaps_roles(self):
        rng = np.random.default_rng(12)
        coords = rng.integers(-5, 5, size=(60, 4))
        coords[:, 0] = 0
        cmap, _ = CoordinateMap.build(coords)
        out_map = downsample_coords(cmap, 2)
        km = build_kernel_map(cmap, out_map, 3, stride=2)
        tk = km.transposed()
        assert tk.n_in == km.n_out and tk.n_out == km.n_in
        fwd = kernel_map_as_sets(km)
        swapped = kernel_map_as_sets(tk)
        assert swapped == {
            off: {(j, i) for i, j in pairs} for off, pairs in fwd.items()
        }

    def test_even_kernel_rejected(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0]]))
        with pytest.raises(ConfigurationError):
            build_kernel_map(cmap, cmap, 2)
