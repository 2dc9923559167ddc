"""Differentiable layers over SparseTensor: convolutions, batch norm,
activations, pooling and channel plumbing.

Convolutions run as gather-scatter per kernel offset: one small matrix
multiply per offset, accumulated in a fixed offset order so results are
deterministic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Value
from .errors import (
    AlignmentError,
    ConfigurationError,
    DegenerateBatchError,
    EmptyInputError,
    PipelineOrderError,
)
from .sparse import (
    CoordinateMap,
    KernelMap,
    SparseTensor,
    build_kernel_map,
    downsample_coords,
)


class Module:
    """Minimal container with parameter/buffer discovery and train/eval mode.

    Child modules, parameters, and lists of either are found by walking
    instance attributes in insertion order, so traversal is deterministic.
    """

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def _children(self):
        for attr, obj in self.__dict__.items():
            if attr == "training":
                continue
            yield attr, obj

    def named_parameters(self, prefix: str = ""):
        for attr, obj in self._children():
            path = f"{prefix}{attr}"
            if isinstance(obj, Parameter):
                yield path, obj
            elif isinstance(obj, Module):
                yield from obj.named_parameters(f"{path}.")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Parameter):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in type(self)._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for attr, obj in self._children():
            path = f"{prefix}{attr}"
            if isinstance(obj, Module):
                yield from obj.named_buffers(f"{path}.")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for _, obj in self._children():
            if isinstance(obj, Module):
                obj.train(mode)
            elif isinstance(obj, (list, tuple)):
                for item in obj:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _conv_apply(features: Value, kernel: Value, kmap: KernelMap) -> Value:
    """Gather-scatter convolution as one tape node.

    kernel has shape (K^3, C_in, C_out), offset-major in the kernel map's
    offset order.  Row sets are duplicate-free within each offset, so
    fancy-index accumulation is safe.
    """
    x = features.data
    w = kernel.data
    out = np.zeros((kmap.n_out, w.shape[2]))
    for ki, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows):
            out[out_rows] += x[in_rows] @ w[ki]
    result = Value(out)

    def rule(g):
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for ki, (in_rows, out_rows) in enumerate(kmap.pairs):
            if len(in_rows):
                sub = g[out_rows]
                dw[ki] = x[in_rows].T @ sub
                dx[in_rows] += sub @ w[ki].T
        return dx, dw

    tape = ad.active_tape()
    if tape is not None:
        tape.record("sparse_conv", (features, kernel), result, rule)
    return result


class ConvLayer(Module):
    """Cubic sparse convolution kernel of shape (K^3, C_in, C_out)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        transposed: bool = False,
        bias: bool = False,
        rng=None,
    ):
        super().__init__()
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigurationError(f"kernel size must be odd, got {kernel_size}")
        if stride not in (1, 2):
            raise ConfigurationError(f"conv stride must be 1 or 2, got {stride}")
        if transposed and stride != 2:
            raise ConfigurationError("transposed convolution requires stride 2")
        rng = np.random.default_rng(0) if rng is None else rng
        volume = kernel_size ** 3
        std = np.sqrt(2.0 / (volume * in_channels))
        self.kernel = Parameter(
            rng.normal(0.0, std, size=(volume, in_channels, out_channels)),
            name="kernel",
        )
        self.bias = Parameter(np.zeros(out_channels), name="bias") if bias else None
        self.kernel_size = kernel_size
        self.stride = stride
        self.transposed = transposed

    @property
    def in_channels(self) -> int:
        return self.kernel.data.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.data.shape[2]


def submanifold_conv(x: SparseTensor, layer: ConvLayer, kmap: KernelMap) -> SparseTensor:
    """Stride-1 convolution whose output support equals the input support."""
    if layer.stride != 1 or layer.transposed:
        raise ConfigurationError("submanifold convolution requires a stride-1 layer")
    if x.num_channels != layer.in_channels:
        raise ConfigurationError(
            f"layer expects {layer.in_channels} channels, tensor has {x.num_channels}"
        )
    if (
        kmap.kernel_size != layer.kernel_size
        or kmap.n_in != len(x)
        or kmap.n_out != len(x)
        or kmap.in_stride != kmap.out_stride
    ):
        raise ConfigurationError("kernel map does not match layer/tensor")
    out = _conv_apply(x.features, layer.kernel, kmap)
    if layer.bias is not None:
        out = ad.add(out, layer.bias)
    return SparseTensor(x.coords, out, x.stride)


def strided_conv(
    x: SparseTensor,
    layer: ConvLayer,
    out_map: CoordinateMap | None = None,
    kmap: KernelMap | None = None,
) -> SparseTensor:
    """Stride-2 downsampling convolution onto the floor-divided support."""
    if layer.stride != 2 or layer.transposed:
        raise ConfigurationError("strided convolution requires a stride-2 layer")
    if x.num_channels != layer.in_channels:
        raise ConfigurationError(
            f"layer expects {layer.in_channels} channels, tensor has {x.num_channels}"
        )
    if out_map is None:
        out_map = downsample_coords(x.coords, 2)
    if kmap is None:
        kmap = build_kernel_map(
            x.coords, out_map, layer.kernel_size, stride=2, in_stride=x.stride
        )
    out = _conv_apply(x.features, layer.kernel, kmap)
    if layer.bias is not None:
        out = ad.add(out, layer.bias)
    return SparseTensor(out_map, out, x.stride * 2)


def transposed_conv(
    x: SparseTensor,
    layer: ConvLayer,
    target_coords: CoordinateMap | None,
    kmap: KernelMap | None = None,
) -> SparseTensor:
    """Upsample onto recorded coordinates via the adjoint gather pattern."""
    if not layer.transposed:
        raise ConfigurationError("layer is not transposed")
    if target_coords is None:
        raise PipelineOrderError(
            "transposed convolution needs the coordinates recorded at the "
            "matching encoder level"
        )
    if x.num_channels != layer.in_channels:
        raise ConfigurationError(
            f"layer expects {layer.in_channels} channels, tensor has {x.num_channels}"
        )
    if kmap is None:
        forward_map = build_kernel_map(
            target_coords, x.coords, layer.kernel_size,
            stride=2, in_stride=x.stride // 2,
        )
        kmap = forward_map.transposed()
    out = _conv_apply(x.features, layer.kernel, kmap)
    if layer.bias is not None:
        out = ad.add(out, layer.bias)
    return SparseTensor(target_coords, out, x.stride // 2)


def _batch_norm_train(x: Value, gamma: Value, beta: Value, eps: float):
    """Fused batch-norm forward/backward over the row dimension."""
    data = x.data
    mean = data.mean(axis=0)
    var = data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean) * inv
    out = Value(xhat * gamma.data + beta.data)

    def rule(g):
        n = len(data)
        dbeta = g.sum(axis=0)
        dgamma = (g * xhat).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.sum(axis=0) / n
            - xhat * (dxhat * xhat).sum(axis=0) / n
        )
        return dx, dgamma, dbeta

    tape = ad.active_tape()
    if tape is not None:
        tape.record("batch_norm", (x, gamma, beta), out, rule)
    return out, mean, var


class BatchNormLayer(Module):
    """Per-channel batch normalization over active voxels."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(f"momentum must be in (0, 1), got {momentum}")
        self.gamma = Parameter(np.ones(channels), name="gamma")
        self.beta = Parameter(np.zeros(channels), name="beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Value) -> Value:
        if self.training:
            if len(x.data) < 2:
                raise DegenerateBatchError(
                    "batch norm in train mode needs at least 2 rows"
                )
            out, mean, var = _batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var
            return out
        scale = ad.mul(self.gamma, 1.0 / np.sqrt(self.running_var + self.eps))
        shift = ad.add(self.beta, ad.mul(scale, -self.running_mean))
        return ad.add(ad.mul(x, scale), shift)


def batch_norm(x: SparseTensor, layer: BatchNormLayer) -> SparseTensor:
    return x.with_features(layer(x.features))


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_features(ad.relu(x.features))


class LinearLayer(Module):
    """Per-row affine map; identical to a kernel-size-1 convolution."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        std = np.sqrt(2.0 / in_channels)
        self.weight = Parameter(
            rng.normal(0.0, std, size=(in_channels, out_channels)), name="weight"
        )
        self.bias = Parameter(np.zeros(out_channels), name="bias") if bias else None

    def __call__(self, x: Value) -> Value:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


def pointwise_linear(x: SparseTensor, weight: Value, bias: Value | None = None) -> SparseTensor:
    """Per-voxel affine transform of the feature matrix."""
    if x.num_channels != weight.data.shape[0]:
        raise ConfigurationError(
            f"weight expects {weight.data.shape[0]} channels, tensor has {x.num_channels}"
        )
    out = ad.matmul(x.features, weight)
    if bias is not None:
        out = ad.add(out, bias)
    return x.with_features(out)


def global_avg_pool(x: SparseTensor) -> Value:
    """Mean feature over the active voxels of each batch element: (B, C)."""
    if len(x) == 0:
        raise EmptyInputError("cannot pool an empty sparse tensor")
    segment, num = x.coords.batch_segments()
    return ad.segment_mean(x.features, segment, num)


def broadcast_to_voxels(per_batch: Value, x: SparseTensor) -> Value:
    """Expand a (B, C) per-batch-element row onto every voxel of x."""
    segment, _ = x.coords.batch_segments()
    return ad.gather_rows(per_batch, segment)


def _check_aligned(x: SparseTensor, y: SparseTensor):
    if x.stride != y.stride or not x.coords.same_as(y.coords):
        raise AlignmentError("sparse tensors live on different coordinate maps")


def add_sparse(x: SparseTensor, y: SparseTensor) -> SparseTensor:
    _check_aligned(x, y)
    return x.with_features(ad.add(x.features, y.features))


def concat_channels(x: SparseTensor, y: SparseTensor) -> SparseTensor:
    _check_aligned(x, y)
    return x.with_features(ad.concat_cols(x.features, y.features))
