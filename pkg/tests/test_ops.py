"""Sparse layers against dense oracles, adjoint identities, and gradients."""

import itertools

import numpy as np
import pytest

from mssnet import autodiff as ad
from mssnet.autodiff import Parameter, Tape, Value, finite_difference_check
from mssnet.errors import (
    AlignmentError,
    ConfigurationError,
    DegenerateBatchError,
    PipelineOrderError,
)
from mssnet.layers import (
    BatchNormLayer,
    ConvLayer,
    LinearLayer,
    add_sparse,
    batch_norm,
    broadcast_to_voxels,
    concat_channels,
    global_avg_pool,
    pointwise_linear,
    relu,
    strided_conv,
    submanifold_conv,
    transposed_conv,
)
from mssnet.sparse import (
    CoordinateMap,
    SparseTensor,
    build_kernel_map,
    downsample_coords,
)

from oracles import batch_norm_oracle, dense_conv_oracle


def full_block(side, channels, seed=0, batch=0):
    """Fully occupied side^3 block with random features."""
    rng = np.random.default_rng(seed)
    xyz = np.array(list(itertools.product(range(side), repeat=3)), dtype=np.int64)
    coords = np.column_stack([np.full(len(xyz), batch), xyz])
    cmap, _ = CoordinateMap.build(coords)
    feats = rng.normal(size=(len(cmap), channels))
    return SparseTensor(cmap, feats)


def random_sparse(n, channels, seed=0, span=6):
    rng = np.random.default_rng(seed)
    coords = rng.integers(-span, span, size=(n, 4))
    coords[:, 0] = 0
    cmap, _ = CoordinateMap.build(coords)
    feats = rng.normal(size=(len(cmap), channels))
    return SparseTensor(cmap, feats)


class TestSubmanifoldConv:
    def test_k1_identity_kernel_is_identity(self):
        x = random_sparse(40, 3, seed=1)
        layer = ConvLayer(3, 3, 1)
        layer.kernel.data[0] = np.eye(3)
        kmap = build_kernel_map(x.coords, x.coords, 1)
        out = submanifold_conv(x, layer, kmap)
        assert np.array_equal(out.features.data, x.features.data)

    @pytest.mark.parametrize("side,k", [(4, 3), (3, 5), (5, 3)])
    def test_matches_dense_oracle(self, side, k):
        x = full_block(side, 2, seed=2)
        layer = ConvLayer(2, 4, k, rng=np.random.default_rng(3))
        kmap = build_kernel_map(x.coords, x.coords, k)
        out = submanifold_conv(x, layer, kmap)
        oracle_coords, oracle_feats = dense_conv_oracle(
            x.coords.coords, x.features.data, layer.kernel.data, k
        )
        assert np.array_equal(out.coords.coords, oracle_coords)
        np.testing.assert_allclose(out.features.data, oracle_feats, atol=1e-10)

    def test_isolated_voxel_gets_center_tap_only(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 100, -50, 3]]))
        feats = np.array([[1.0, -2.0]])
        x = SparseTensor(cmap, feats)
        layer = ConvLayer(2, 3, 3, bias=True, rng=np.random.default_rng(4))
        layer.bias.data[:] = [0.1, 0.2, 0.3]
        kmap = build_kernel_map(cmap, cmap, 3)
        out = submanifold_conv(x, layer, kmap)
        center = 13  # offset (0,0,0) in the 27-offset lexicographic order
        expected = feats @ layer.kernel.data[center] + layer.bias.data
        np.testing.assert_allclose(out.features.data, expected, atol=1e-12)

    def test_support_preserved(self):
        x = random_sparse(80, 4, seed=5)
        layer = ConvLayer(4, 4, 5, rng=np.random.default_rng(6))
        kmap = build_kernel_map(x.coords, x.coords, 5)
        out = submanifold_conv(x, layer, kmap)
        assert out.coords is x.coords and out.stride == x.stride

    def test_translation_equivariance(self):
        x = random_sparse(60, 3, seed=7)
        layer = ConvLayer(3, 3, 3, rng=np.random.default_rng(8))
        out_a = submanifold_conv(x, layer, build_kernel_map(x.coords, x.coords, 3))
        shifted = x.coords.coords.copy()
        shifted[:, 1:] += np.array([11, -7, 23])
        smap, _ = CoordinateMap.build(shifted)
        xs = SparseTensor(smap, x.features.data)
        out_b = submanifold_conv(xs, layer, build_kernel_map(smap, smap, 3))
        assert np.array_equal(out_b.coords.coords[:, 1:] - np.array([11, -7, 23]),
                              out_a.coords.coords[:, 1:])
        assert np.array_equal(out_a.features.data, out_b.features.data)

    def test_kernel_map_mismatch_rejected(self):
        x = random_sparse(10, 2, seed=9)
        layer = ConvLayer(2, 2, 3)
        with pytest.raises(ConfigurationError):
            submanifold_conv(x, layer, build_kernel_map(x.coords, x.coords, 5))


class TestStridedConv:
    def test_corner_block_collapses_to_one_voxel(self):
        x = full_block(2, 2, seed=10)
        layer = ConvLayer(2, 3, 3, stride=2, rng=np.random.default_rng(11))
        out = strided_conv(x, layer)
        assert len(out) == 1 and out.stride == 2
        assert out.coords.coords.tolist() == [[0, 0, 0, 0]]

    def test_even_kernel_rejected_at_construction(self):
        with pytest.raises(ConfigurationError):
            ConvLayer(2, 3, 2, stride=2)

    def test_matches_dense_strided_oracle(self):
        x = full_block(4, 3, seed=12)
        layer = ConvLayer(3, 2, 3, stride=2, rng=np.random.default_rng(13))
        out = strided_conv(x, layer)
        oracle_coords, oracle_feats = dense_conv_oracle(
            x.coords.coords, x.features.data, layer.kernel.data, 3, stride=2
        )
        assert np.array_equal(out.coords.coords, oracle_coords)
        np.testing.assert_allclose(out.features.data, oracle_feats, atol=1e-10)

    def test_stride_one_layer_rejected(self):
        x = full_block(2, 2)
        with pytest.raises(ConfigurationError):
            strided_conv(x, ConvLayer(2, 2, 3, stride=1))


class TestTransposedConv:
    def test_one_hot_kernels_give_nearest_voxel_upsampling(self):
        x = random_sparse(50, 3, seed=14)
        coarse_map = downsample_coords(x.coords, 2)
        rng = np.random.default_rng(15)
        coarse = SparseTensor(coarse_map, rng.normal(size=(len(coarse_map), 3)), stride=2)
        layer = ConvLayer(3, 3, 3, stride=2, transposed=True)
        layer.kernel.data[:] = 0.0
        # identity taps only at offsets with components in {0, 1}: each fine
        # voxel then reads exactly its floor-division parent
        from mssnet.sparse import kernel_offsets
        for ki, off in enumerate(kernel_offsets(3)):
            if np.all((off == 0) | (off == 1)):
                layer.kernel.data[ki] = np.eye(3)
        out = transposed_conv(coarse, layer, x.coords)
        parents = coarse_map.lookup_rows(
            np.column_stack([x.coords.coords[:, 0], x.coords.coords[:, 1:] // 2])
        )
        assert (parents >= 0).all()
        np.testing.assert_allclose(
            out.features.data, coarse.features.data[parents], atol=1e-12
        )

    def test_adjoint_identity(self):
        x = random_sparse(70, 3, seed=16)
        layer = ConvLayer(3, 4, 3, stride=2, rng=np.random.default_rng(17))
        down = strided_conv(x, layer)
        rng = np.random.default_rng(18)
        y = SparseTensor(down.coords, rng.normal(size=down.features.data.shape), stride=2)

        tlayer = ConvLayer(4, 3, 3, stride=2, transposed=True)
        tlayer.kernel.data[:] = np.transpose(layer.kernel.data, (0, 2, 1))
        back = transposed_conv(y, tlayer, x.coords)

        lhs = float((down.features.data * y.features.data).sum())
        rhs = float((x.features.data * back.features.data).sum())
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_disjoint_support_gives_zero_rows(self):
        # coarse features far from some fine voxels: rows with no parent stay 0
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0], [0, 50, 50, 50]]))
        coarse_map, _ = CoordinateMap.build(np.array([[0, 0, 0, 0]]))
        coarse = SparseTensor(coarse_map, np.array([[1.0, 2.0]]), stride=2)
        layer = ConvLayer(2, 2, 3, stride=2, transposed=True)
        out = transposed_conv(coarse, layer, cmap)
        far = out.coords.find_row((0, 50, 50, 50))
        assert np.all(out.features.data[far] == 0.0)

    def test_missing_target_coords(self):
        x = full_block(2, 2)
        layer = ConvLayer(2, 2, 3, stride=2, transposed=True)
        with pytest.raises(PipelineOrderError):
            transposed_conv(x, layer, None)


class TestBatchNorm:
    def test_normalizes_in_train_mode(self):
        rng = np.random.default_rng(19)
        x = random_sparse(64, 4, seed=19)
        layer = BatchNormLayer(4)
        out = batch_norm(x, layer).features.data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)

    def test_constant_channel_maps_to_beta(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0], [0, 1, 0, 0], [0, 2, 0, 0]]))
        x = SparseTensor(cmap, np.full((3, 2), 7.0))
        layer = BatchNormLayer(2)
        layer.beta.data[:] = [0.5, -0.5]
        out = batch_norm(x, layer).features.data
        np.testing.assert_allclose(out, np.tile([0.5, -0.5], (3, 1)), atol=1e-8)

    def test_matches_textbook_oracle(self):
        rng = np.random.default_rng(20)
        x = random_sparse(16, 4, seed=20)
        layer = BatchNormLayer(4)
        layer.gamma.data[:] = rng.normal(size=4)
        layer.beta.data[:] = rng.normal(size=4)
        out = batch_norm(x, layer).features.data
        expected = batch_norm_oracle(
            x.features.data, layer.gamma.data, layer.beta.data, layer.eps
        )
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_eval_mode_deterministic_affine(self):
        x = random_sparse(30, 3, seed=21)
        layer = BatchNormLayer(3)
        batch_norm(x, layer)  # one train pass to move running stats
        layer.eval()
        a = batch_norm(x, layer).features.data
        b = batch_norm(x, layer).features.data
        assert np.array_equal(a, b)

    def test_running_stats_update_with_momentum(self):
        x = random_sparse(50, 2, seed=22)
        layer = BatchNormLayer(2, momentum=0.1)
        batch_norm(x, layer)
        data = x.features.data
        np.testing.assert_allclose(layer.running_mean, 0.1 * data.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(
            layer.running_var, 0.9 * 1.0 + 0.1 * data.var(axis=0), atol=1e-12
        )

    def test_single_row_train_rejected(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0]]))
        x = SparseTensor(cmap, np.ones((1, 2)))
        with pytest.raises(DegenerateBatchError):
            batch_norm(x, BatchNormLayer(2))


class TestActivations:
    def test_relu_values(self):
        assert ad.relu(Value(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]

    def test_softmax_uniform_logits(self):
        out = ad.softmax_rows(Value(np.full((3, 4), 2.5))).data
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(23)
        out = ad.softmax_rows(Value(rng.normal(size=(50, 7)) * 10)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_sigmoid_extremes_stable(self):
        out = ad.sigmoid(Value(np.array([-800.0, 0.0, 800.0]))).data
        assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0


class TestPointwiseLinear:
    def test_equals_k1_conv_bitwise(self):
        x = random_sparse(40, 3, seed=24)
        rng = np.random.default_rng(25)
        w = Parameter(rng.normal(size=(3, 5)), "w")
        b = Parameter(rng.normal(size=5), "b")
        layer = ConvLayer(3, 5, 1, bias=True)
        layer.kernel.data[0] = w.data
        layer.bias.data[:] = b.data
        kmap = build_kernel_map(x.coords, x.coords, 1)
        conv_out = submanifold_conv(x, layer, kmap).features.data
        lin_out = pointwise_linear(x, w, b).features.data
        assert np.array_equal(conv_out, lin_out)

    def test_identity(self):
        x = random_sparse(12, 3, seed=26)
        out = pointwise_linear(x, Value(np.eye(3)))
        assert np.array_equal(out.features.data, x.features.data)

    def test_matches_matmul_oracle(self):
        x = random_sparse(20, 4, seed=27)
        rng = np.random.default_rng(28)
        w = Value(rng.normal(size=(4, 2)))
        out = pointwise_linear(x, w).features.data
        np.testing.assert_allclose(out, x.features.data @ w.data, atol=1e-15)


class TestPooling:
    def test_single_voxel(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 1, 2, 3]]))
        x = SparseTensor(cmap, np.array([[4.0, 5.0]]))
        np.testing.assert_allclose(global_avg_pool(x).data, [[4.0, 5.0]])

    def test_hand_mean(self):
        cmap, _ = CoordinateMap.build(np.array([[0, 0, 0, 0], [0, 1, 0, 0]]))
        x = SparseTensor(cmap, np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_allclose(global_avg_pool(x).data, [[2.0, 3.0]])

    def test_pools_per_batch_element(self):
        coords = np.array([[0, 0, 0, 0], [0, 1, 0, 0], [1, 0, 0, 0]])
        cmap, _ = CoordinateMap.build(coords)
        x = SparseTensor(cmap, np.array([[1.0], [3.0], [10.0]]))
        np.testing.assert_allclose(global_avg_pool(x).data, [[2.0], [10.0]])
        per_voxel = broadcast_to_voxels(Value(np.array([[5.0], [7.0]])), x)
        assert per_voxel.data.tolist() == [[5.0], [5.0], [7.0]]

    def test_permutation_invariant(self):
        rng = np.random.default_rng(29)
        feats = rng.normal(size=(30, 3))
        cmap, _ = CoordinateMap.build(
            np.column_stack([np.zeros(30, int), rng.integers(-90, 90, (30, 3))])
        )
        x = SparseTensor(cmap, feats)
        perm = rng.permutation(30)
        y = SparseTensor(cmap, feats[perm])
        # pooling ignores which row carries which coordinate
        np.testing.assert_allclose(
            global_avg_pool(x).data, global_avg_pool(y).data, atol=1e-12
        )


class TestAddConcat:
    def test_add_zeros(self):
        x = random_sparse(15, 3, seed=30)
        z = x.with_features(np.zeros_like(x.features.data))
        out = add_sparse(x, z)
        assert np.array_equal(out.features.data, x.features.data)

    def test_concat_then_slice_recovers(self):
        x = random_sparse(15, 2, seed=31)
        y = x.with_features(np.random.default_rng(32).normal(size=(len(x), 3)))
        cat = concat_channels(x, y)
        assert np.array_equal(cat.features.data[:, :2], x.features.data)
        assert np.array_equal(cat.features.data[:, 2:], y.features.data)

    def test_coordinate_mismatch_rejected(self):
        x = random_sparse(10, 2, seed=33)
        other = random_sparse(11, 2, seed=34)
        with pytest.raises(AlignmentError):
            add_sparse(x, other)
        with pytest.raises(AlignmentError):
            concat_channels(x, other)

    def test_add_gradient_splits_to_both_inputs(self):
        rng = np.random.default_rng(35)
        a = Parameter(rng.normal(size=(6, 2)), "a")
        b = Parameter(rng.normal(size=(6, 2)), "b")
        coeff = rng.normal(size=(6, 2))
        err = finite_difference_check(
            lambda: ad.sum_all(ad.mul(ad.add(a, b), coeff)), [a, b]
        )
        assert err < 1e-8

class TestLayerGradients:
    """Finite-difference checks for every layer, spec tolerance 1e-4."""

    def _loss_of(self, tensor, coeff):
        return ad.sum_all(ad.mul(tensor.features, coeff))

    def test_submanifold_conv(self):
        x = random_sparse(48, 3, seed=36)
        layer = ConvLayer(3, 4, 3, bias=True, rng=np.random.default_rng(37))
        kmap = build_kernel_map(x.coords, x.coords, 3)
        coeff = np.random.default_rng(38).normal(size=(len(x), 4))
        err = finite_difference_check(
            lambda: self._loss_of(submanifold_conv(x, layer, kmap), coeff),
            layer.parameters(), samples_per_param=8,
        )
        assert err < 1e-4

    def test_strided_conv(self):
        x = random_sparse(48, 3, seed=39)
        layer = ConvLayer(3, 4, 3, stride=2, rng=np.random.default_rng(40))
        out_len = len(strided_conv(x, layer))
        coeff = np.random.default_rng(41).normal(size=(out_len, 4))
        err = finite_difference_check(
            lambda: self._loss_of(strided_conv(x, layer), coeff),
            layer.parameters(), samples_per_param=8,
        )
        assert err < 1e-4

    def test_transposed_conv(self):
        x = random_sparse(48, 3, seed=42)
        coarse_map = downsample_coords(x.coords, 2)
        coarse = SparseTensor(
            coarse_map, np.random.default_rng(43).normal(size=(len(coarse_map), 3)),
            stride=2,
        )
        layer = ConvLayer(3, 2, 3, stride=2, transposed=True, rng=np.random.default_rng(44))
        coeff = np.random.default_rng(45).normal(size=(len(x), 2))
        err = finite_difference_check(
            lambda: self._loss_of(transposed_conv(coarse, layer, x.coords), coeff),
            layer.parameters(), samples_per_param=8,
        )
        assert err < 1e-4

    def test_batch_norm_train(self):
        x = random_sparse(32, 3, seed=46)
        layer = BatchNormLayer(3)
        coeff = np.random.default_rng(47).normal(size=(len(x), 3))
        err = finite_difference_check(
            lambda: self._loss_of(batch_norm(x, layer), coeff),
            layer.parameters(), samples_per_param=3,
        )
        assert err < 1e-4

    def test_input_gradient_through_conv(self):
        x_param = Parameter(np.random.default_rng(48).normal(size=(20, 3)), "x")
        coords = np.random.default_rng(49).integers(-3, 3, size=(40, 4))
        coords[:, 0] = 0
        cmap, _ = CoordinateMap.build(coords)
        x_param.data = np.random.default_rng(50).normal(size=(len(cmap), 3))
        x_param.grad = np.zeros_like(x_param.data)
        layer = ConvLayer(3, 3, 3, rng=np.random.default_rng(51))
        kmap = build_kernel_map(cmap, cmap, 3)
        coeff = np.random.default_rng(52).normal(size=(len(cmap), 3))

        def build():
            t = SparseTensor(cmap, x_param)
            return self._loss_of(submanifold_conv(t, layer, kmap), coeff)

        err = finite_difference_check(build, [x_param], samples_per_param=10)
        assert err < 1e-4

    def test_linear_layer(self):
        layer = LinearLayer(4, 3, rng=np.random.default_rng(53))
        x = np.random.default_rng(54).normal(size=(6, 4))
        coeff = np.random.default_rng(55).normal(size=(6, 3))
        err = finite_difference_check(
            lambda: ad.sum_all(ad.mul(layer(Value(x)), coeff)),
            layer.parameters(), samples_per_param=6,
        )
        assert err < 1e-4
