"""Hierarchical encoder-decoder assembly over the sparse layer zoo.

Each encoder level runs its feature block (multi-scale fusion or a plain
conv block) and optional channel attention, records its coordinate map
and skip features, then downsamples by 2.  The decoder upsamples with
transposed convolutions onto the recorded maps, concatenates skips, and
refines with residual units.  The head is a per-voxel linear classifier.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (
    AcffmBlock,
    MffmBlock,
    ResidualUnit,
    acffm_forward,
    mffm_forward,
    residual_forward,
)
from .errors import CheckpointError, ConfigurationError, EmptyInputError
from .layers import (
    BatchNormLayer,
    ConvLayer,
    LinearLayer,
    Module,
    add_sparse,
    batch_norm,
    concat_channels,
    relu,
    strided_conv,
    submanifold_conv,
    transposed_conv,
)
from .sparse import (
    CoordinateMap,
    SparseTensor,
    build_kernel_map,
    downsample_coords,
)


@dataclass
class MssNetConfig:
    in_channels: int
    num_classes: int
    encoder_channels: tuple = (32, 64, 128, 256)
    decoder_channels: tuple = (128, 96, 96)
    mffm_kernels: tuple = (3, 5, 7)
    reduction: int = 4
    use_mffm: bool = True
    use_acffm: bool = True
    per_channel_scores: bool = False

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        self.mffm_kernels = tuple(self.mffm_kernels)
        if not self.encoder_channels:
            raise ConfigurationError("encoder_channels must be non-empty")
        if len(self.decoder_channels) != len(self.encoder_channels) - 1:
            raise ConfigurationError(
                "decoder_channels must have one entry per downsampling step "
                f"({len(self.encoder_channels) - 1}), got {len(self.decoder_channels)}"
            )
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.use_acffm:
            for c in self.encoder_channels:
                if c % self.reduction != 0:
                    raise ConfigurationError(
                        f"encoder width {c} not divisible by reduction {self.reduction}"
                    )

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "encoder_channels": list(self.encoder_channels),
            "decoder_channels": list(self.decoder_channels),
            "mffm_kernels": list(self.mffm_kernels),
            "reduction": self.reduction,
            "use_mffm": self.use_mffm,
            "use_acffm": self.use_acffm,
            "per_channel_scores": self.per_channel_scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MssNetConfig":
        return cls(**d)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()


@dataclass
class ForwardContext:
    """Per-forward state: recorded maps, skips, and a kernel-map cache.

    The cache dict may be shared across forward passes when the caller
    keeps feeding the same coordinate maps (keys are map identities), as
    in repeated optimizer steps over one fixed scene.
    """

    level_maps: list = field(default_factory=list)
    skips: list = field(default_factory=list)
    _kmaps: dict = field(default_factory=dict)

    def submanifold_kmap(self, cmap: CoordinateMap, kernel_size: int):
        key = (id(cmap), id(cmap), kernel_size, 1)
        if key not in self._kmaps:
            self._kmaps[key] = build_kernel_map(cmap, cmap, kernel_size)
        return self._kmaps[key]

    def downsampled(self, cmap: CoordinateMap, factor: int) -> CoordinateMap:
        key = (id(cmap), "down", factor)
        if key not in self._kmaps:
            self._kmaps[key] = downsample_coords(cmap, factor)
        return self._kmaps[key]

    def strided_kmap(self, in_map, out_map, kernel_size, in_stride):
        key = (id(in_map), id(out_map), kernel_size, 2)
        if key not in self._kmaps:
            self._kmaps[key] = build_kernel_map(
                in_map, out_map, kernel_size, stride=2, in_stride=in_stride
            )
        return self._kmaps[key]

    def transposed_kmap(self, target_map, coarse_map, kernel_size, out_stride):
        key = (id(target_map), id(coarse_map), kernel_size, "t")
        if key not in self._kmaps:
            forward_map = build_kernel_map(
                target_map, coarse_map, kernel_size,
                stride=2, in_stride=out_stride,
            )
            self._kmaps[key] = forward_map.transposed()
        return self._kmaps[key]


class EncoderLevel(Module):
    """One resolution level: feature block plus optional channel attention."""

    def __init__(self, channels: int, config: MssNetConfig, rng):
        super().__init__()
        if config.use_mffm:
            self.mffm = MffmBlock(
                channels,
                kernel_sizes=config.mffm_kernels,
                per_channel_scores=config.per_channel_scores,
                rng=rng,
            )
        else:
            self.plain_conv = ConvLayer(channels, channels, 3, rng=rng)
            self.plain_norm = BatchNormLayer(channels)
        if config.use_acffm:
            self.acffm = AcffmBlock(channels, config.reduction, rng=rng)
        self.use_mffm = config.use_mffm
        self.use_acffm = config.use_acffm
        self.mffm_kernels = config.mffm_kernels

    def forward(self, x: SparseTensor, ctx: ForwardContext) -> SparseTensor:
        kmap3 = ctx.submanifold_kmap(x.coords, 3)
        if self.use_mffm:
            kmaps = {1: ctx.submanifold_kmap(x.coords, 1), 3: kmap3}
            for k in self.mffm_kernels:
                kmaps[k] = ctx.submanifold_kmap(x.coords, k)
            res = mffm_forward(x, self.mffm, kmaps)
            out, branches = res.output, res.branches
        else:
            out = relu(batch_norm(submanifold_conv(x, self.plain_conv, kmap3), self.plain_norm))
            branches = (out, out, out)
        if self.use_acffm:
            gated = acffm_forward(*branches, self.acffm, kmap3).output
            out = add_sparse(out, gated) if self.use_mffm else gated
        return out


class MssNet(Module):
    """Sparse encoder-decoder segmentation network."""

    def __init__(self, config: MssNetConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        enc = config.encoder_channels
        dec = config.decoder_channels

        self.stem_conv = ConvLayer(config.in_channels, enc[0], 3, rng=rng)
        self.stem_norm = BatchNormLayer(enc[0])
        self.levels = [EncoderLevel(c, config, rng) for c in enc]
        self.down_convs = [
            ConvLayer(enc[i], enc[i + 1], 3, stride=2, rng=rng)
            for i in range(len(enc) - 1)
        ]
        self.down_norms = [BatchNormLayer(enc[i + 1]) for i in range(len(enc) - 1)]

        self.up_convs = []
        self.dec_residuals = []
        cur = enc[-1]
        for j, width in enumerate(dec):
            self.up_convs.append(
                ConvLayer(cur, width, 3, stride=2, transposed=True, rng=rng)
            )
            cur = width + enc[len(enc) - 2 - j]
            self.dec_residuals.append(ResidualUnit(cur, rng=rng))
        self.head = LinearLayer(cur, config.num_classes, bias=True, rng=rng)
        self.config = config

    def forward(self, x: SparseTensor, cache: dict | None = None) -> SparseTensor:
        """Per-voxel logits on x's support.

        ``cache`` persists kernel maps across forward passes over the same
        coordinate maps; callers looping on one fixed scene pass a dict
        they keep alive together with the input tensor.
        """
        if len(x) == 0:
            raise EmptyInputError("network input has no voxels")
        if x.stride != 1:
            raise ConfigurationError("network input must be at stride 1")
        if x.num_channels != self.config.in_channels:
            raise ConfigurationError(
                f"network expects {self.config.in_channels} input channels, "
                f"got {x.num_channels}"
            )
        ctx = ForwardContext(_kmaps=cache if cache is not None else {})
        h = relu(batch_norm(
            submanifold_conv(x, self.stem_conv, ctx.submanifold_kmap(x.coords, 3)),
            self.stem_norm,
        ))
        for i, level in enumerate(self.levels):
            h = level.forward(h, ctx)
            if i < len(self.down_convs):
                ctx.level_maps.append(h.coords)
                ctx.skips.append(h)
                out_map = ctx.downsampled(h.coords, 2)
                kmap = ctx.strided_kmap(h.coords, out_map, 3, h.stride)
                h = relu(batch_norm(
                    strided_conv(h, self.down_convs[i], out_map, kmap),
                    self.down_norms[i],
                ))
        for j, up in enumerate(self.up_convs):
            skip = ctx.skips[len(ctx.skips) - 1 - j]
            kmap = ctx.transposed_kmap(skip.coords, h.coords, 3, h.stride // 2)
            h = transposed_conv(h, up, skip.coords, kmap)
            h = concat_channels(h, skip)
            h = residual_forward(
                h, self.dec_residuals[j], ctx.submanifold_kmap(h.coords, 3)
            )
        logits = ad.matmul(h.features, self.head.weight)
        logits = ad.add(logits, self.head.bias)
        return h.with_features(logits)

    def __call__(self, x: SparseTensor, cache: dict | None = None) -> SparseTensor:
        return self.forward(x, cache)


def build_network(config: MssNetConfig, seed: int = 0) -> MssNet:
    return MssNet(config, seed=seed)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"MSSNETCK"
_VERSION = 1


def save_checkpoint(path, net: MssNet, meta: dict | None = None):
    """Write a versioned binary container of named tensors plus config.

    The byte stream is fully determined by the network state, so identical
    runs produce identical files.
    """
    params = list(net.named_parameters())
    buffers = list(net.named_buffers())
    header = {
        "config": net.config.to_dict(),
        "config_hash": net.config.hash(),
        "params": [[name, list(p.data.shape)] for name, p in params],
        "buffers": [[name, list(b.shape)] for name, b in buffers],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        for _, b in buffers:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path, expected_config: MssNetConfig | None = None):
    """Rebuild the network from a checkpoint; returns (net, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        config = MssNetConfig.from_dict(header["config"])
        if config.hash() != header["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch, file corrupt")
        if expected_config is not None and expected_config.hash() != header["config_hash"]:
            raise CheckpointError(
                f"{path}: checkpoint config differs from the requested config"
            )
        net = MssNet(config)
        named = dict(net.named_parameters())
        if [n for n, _ in header["params"]] != list(named):
            raise CheckpointError(f"{path}: parameter names do not match the network")
        for name, shape in header["params"]:
            p = named[name]
            if list(p.data.shape) != shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: {shape} vs {list(p.data.shape)}"
                )
            raw = fh.read(p.data.size * 8)
            p.data = np.frombuffer(raw, dtype="<f8").reshape(p.data.shape).copy()
            p.grad = np.zeros_like(p.data)
        for (name, shape), (slot_name, owner, attr) in zip(
            header["buffers"], _buffer_slots(net)
        ):
            if name != slot_name:
                raise CheckpointError(f"{path}: buffer names do not match the network")
            raw = fh.read(int(np.prod(shape)) * 8)
            setattr(owner, attr, np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    return net, header.get("meta", {})


def _buffer_slots(module: Module, prefix: str = ""):
    for name in type(module)._buffer_names:
        yield f"{prefix}{name}", module, name
    for attr, obj in module._children():
        path = f"{prefix}{attr}"
        if isinstance(obj, Module):
            yield from _buffer_slots(obj, f"{path}.")
        elif isinstance(obj, (list, tuple)):
            for i, item in enumerate(obj):
                if isinstance(item, Module):
                    yield from _buffer_slots(item, f"{path}.{i}.")
