"""Multi-scale fusion and channel attention blocks.

The multi-scale block runs parallel submanifold convolutions at several
kernel sizes plus a kernel-size-1 point branch, scores each scale per
voxel, softmax-normalizes the scores, and fuses the branches as a
score-weighted sum added to the point branch.

The channel filter block squeezes the fused map to a per-batch-element
channel statistic, excites it through a bottleneck of two linear maps,
and rescales every channel by the resulting sigmoid gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Value
from .errors import AlignmentError, ConfigurationError
from .layers import (
    BatchNormLayer,
    ConvLayer,
    LinearLayer,
    Module,
    batch_norm,
    broadcast_to_voxels,
    global_avg_pool,
    relu,
    submanifold_conv,
)
from .sparse import KernelMap, SparseTensor


class ScoreMlp(Module):
    """Per-voxel scale scorer: linear, batch norm, relu, linear projection."""

    def __init__(self, channels: int, out_channels: int, rng=None):
        super().__init__()
        self.lift = LinearLayer(channels, channels, bias=False, rng=rng)
        self.norm = BatchNormLayer(channels)
        self.project = LinearLayer(channels, out_channels, bias=True, rng=rng)

    def __call__(self, x: Value) -> Value:
        return self.project(ad.relu(self.norm(self.lift(x))))


class ResidualUnit(Module):
    """conv-norm-relu-conv-norm with an identity skip and a final relu.

    The second convolution starts at zero so the unit begins as relu of
    the identity and learns its refinement from there.
    """

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.conv1 = ConvLayer(channels, channels, 3, rng=rng)
        self.norm1 = BatchNormLayer(channels)
        self.conv2 = ConvLayer(channels, channels, 3, rng=rng)
        self.conv2.kernel.data[:] = 0.0
        self.norm2 = BatchNormLayer(channels)


def residual_forward(x: SparseTensor, unit: ResidualUnit, kmap: KernelMap) -> SparseTensor:
    if x.num_channels != unit.conv1.in_channels:
        raise ConfigurationError(
            f"residual unit expects {unit.conv1.in_channels} channels, "
            f"got {x.num_channels}"
        )
    h = relu(batch_norm(submanifold_conv(x, unit.conv1, kmap), unit.norm1))
    h = batch_norm(submanifold_conv(h, unit.conv2, kmap), unit.norm2)
    return x.with_features(ad.relu(ad.add(x.features, h.features)))


@dataclass
class MffmResult:
    output: SparseTensor
    branches: tuple[SparseTensor, SparseTensor, SparseTensor]
    scores: np.ndarray  # (N, num_scales) softmax-normalized, for inspection


class MffmBlock(Module):
    """Multi-scale feature fusion over three kernel sizes plus a point branch.

    ``per_channel_scores`` switches the scale scores from one scalar per
    voxel to one per channel; off by default.
    """

    def __init__(
        self,
        channels: int,
        kernel_sizes: tuple[int, int, int] = (3, 5, 7),
        per_channel_scores: bool = False,
        rng=None,
    ):
        super().__init__()
        if len(kernel_sizes) != 3:
            raise ConfigurationError("expected exactly three branch kernel sizes")
        score_width = channels if per_channel_scores else 1
        self.branch_convs = [
            ConvLayer(channels, channels, k, rng=rng) for k in kernel_sizes
        ]
        self.point_conv = ConvLayer(channels, channels, 1, rng=rng)
        self.score_mlps = [ScoreMlp(channels, score_width, rng=rng) for _ in range(3)]
        self.out_conv = ConvLayer(channels, channels, 3, rng=rng)
        self.out_norm = BatchNormLayer(channels)
        self.kernel_sizes = tuple(kernel_sizes)
        self.channels = channels
        self.per_channel_scores = per_channel_scores


def mffm_forward(
    x: SparseTensor,
    block: MffmBlock,
    kmaps: dict[int, KernelMap],
) -> MffmResult:
    """Fuse multi-scale branches with softmax scale scores.

    ``kmaps`` maps kernel size -> submanifold kernel map on x's support;
    sizes 1, 3 and every branch size must be present.
    """
    if x.num_channels != block.channels:
        raise ConfigurationError(
            f"block expects {block.channels} channels, tensor has {x.num_channels}"
        )
    branches = tuple(
        submanifold_conv(x, conv, kmaps[conv.kernel_size])
        for conv in block.branch_convs
    )
    x0 = submanifold_conv(x, block.point_conv, kmaps[1])

    summed = ad.add(ad.add(branches[0].features, branches[1].features), branches[2].features)
    raw_scores = [mlp(summed) for mlp in block.score_mlps]
    scores = ad.scale_softmax(raw_scores)

    fused = x0.features
    for branch, s in zip(branches, scores):
        fused = ad.add(fused, ad.mul(branch.features, s))

    out = x.with_features(fused)
    out = batch_norm(submanifold_conv(out, block.out_conv, kmaps[3]), block.out_norm)
    score_matrix = np.hstack([s.data for s in scores])
    return MffmResult(out, branches, score_matrix)


@dataclass
class AcffmResult:
    output: SparseTensor
    gates: np.ndarray  # (B, C) sigmoid channel weights, for inspection


class AcffmBlock(Module):
    """Channel attention over the fused multi-scale features.

    The excitation bottleneck keeps the squeeze-weight orientation
    (reduced x full) so the reduction factor reads directly off w1.
    """

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigurationError(
                f"channels ({channels}) must be divisible by reduction ({reduction})"
            )
        rng = np.random.default_rng(0) if rng is None else rng
        reduced = channels // reduction
        self.residual_units = [ResidualUnit(channels, rng=rng) for _ in range(3)]
        self.w1 = Parameter(
            rng.normal(0.0, np.sqrt(2.0 / channels), size=(reduced, channels)),
            name="w1",
        )
        # zero start: every gate opens at sigmoid(0) = 0.5 and moves from there
        self.w2 = Parameter(np.zeros((channels, reduced)), name="w2")
        self.channels = channels
        self.reduction = reduction


def acffm_forward(
    x1: SparseTensor,
    x2: SparseTensor,
    x3: SparseTensor,
    block: AcffmBlock,
    kmap: KernelMap,
) -> AcffmResult:
    """Residual-refine the three inputs, fuse, then gate per channel."""
    for other in (x2, x3):
        if other.num_channels != x1.num_channels or not x1.coords.same_as(other.coords):
            raise AlignmentError("channel filter inputs must share support and width")
    if x1.num_channels != block.channels:
        raise ConfigurationError(
            f"block expects {block.channels} channels, got {x1.num_channels}"
        )

    refined = [
        residual_forward(x, unit, kmap)
        for x, unit in zip((x1, x2, x3), block.residual_units)
    ]
    fused_feats = ad.relu(
        ad.add(ad.add(refined[0].features, refined[1].features), refined[2].features)
    )
    fused = x1.with_features(fused_feats)

    pooled = global_avg_pool(fused)  # (B, C)
    hidden = ad.relu(ad.matmul(pooled, ad.transpose(block.w1)))
    gates = ad.sigmoid(ad.matmul(hidden, ad.transpose(block.w2)))
    per_voxel = broadcast_to_voxels(gates, fused)
    out = fused.with_features(ad.mul(fused.features, per_voxel))
    return AcffmResult(out, gates.data)
