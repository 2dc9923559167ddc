"""Dataset readers, augmentation, synthetic scenes, and splits.

SemanticKITTI scans are consecutive little-endian float32 quadruples
(x, y, z, intensity); label files are little-endian uint32 words whose
lower 16 bits carry the semantic id.  S3DIS rooms are directories of
per-object ASCII files with one "x y z r g b" line per point.  Readers
are byte-exact: a parsed KITTI scan re-serializes to the original bytes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyInputError,
    MalformedFileError,
    PairingError,
)
from .losses import IGNORE_LABEL

log = logging.getLogger(__name__)


@dataclass
class LabeledPointCloud:
    positions: np.ndarray          # (P, 3) meters
    attributes: np.ndarray         # (P, A) rgb in [0,1] or intensity
    labels: np.ndarray             # (P,) class ids after remapping
    source_id: str = ""
    raw_labels: np.ndarray | None = None  # original KITTI label words

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        if self.attributes.ndim == 1:
            self.attributes = self.attributes[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.positions) == 0:
            raise EmptyInputError("point cloud has no points")
        if not np.isfinite(self.positions).all():
            raise MalformedFileError(f"{self.source_id}: non-finite positions")

    def __len__(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# SemanticKITTI
# ---------------------------------------------------------------------------

KITTI_CLASS_NAMES = [
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
    "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
    "other-ground", "building", "fence", "vegetation", "trunk", "terrain",
    "pole", "traffic-sign",
]

# raw semantic id -> train id (0..18); everything else is ignored
_KITTI_RAW_TO_TRAIN = {
    10: 0, 11: 1, 15: 2, 18: 3, 20: 4, 30: 5, 31: 6, 32: 7, 40: 8, 44: 9,
    48: 10, 49: 11, 50: 12, 51: 13, 70: 14, 71: 15, 72: 16, 80: 17, 81: 18,
    13: 4, 16: 4, 60: 8, 99: IGNORE_LABEL, 52: IGNORE_LABEL,
    0: IGNORE_LABEL, 1: IGNORE_LABEL,
    252: 0, 253: 6, 254: 5, 255: 7, 256: 4, 257: 4, 258: 3, 259: 4,
}

# train id -> representative raw id, for submission-format export
KITTI_TRAIN_TO_RAW = {
    0: 10, 1: 11, 2: 15, 3: 18, 4: 20, 5: 30, 6: 31, 7: 32, 8: 40, 9: 44,
    10: 48, 11: 49, 12: 50, 13: 51, 14: 70, 15: 71, 16: 72, 17: 80, 18: 81,
    IGNORE_LABEL: 0,
}

KITTI_TRAIN_SEQUENCES = ["00", "01", "02", "03", "04", "05", "06", "07", "09", "10"]
KITTI_VAL_SEQUENCES = ["08"]

_KITTI_LUT = np.full(1 << 16, IGNORE_LABEL, dtype=np.int64)
for _raw, _train in _KITTI_RAW_TO_TRAIN.items():
    _KITTI_LUT[_raw] = _train
_KITTI_KNOWN = np.zeros(1 << 16, dtype=bool)
for _raw in _KITTI_RAW_TO_TRAIN:
    _KITTI_KNOWN[_raw] = True


def remap_kitti_labels(raw_words: np.ndarray) -> np.ndarray:
    """Lower 16 bits -> train ids; unknown ids map to ignore with a warning."""
    semantic = (np.asarray(raw_words, dtype=np.uint32) & 0xFFFF).astype(np.int64)
    unknown = ~_KITTI_KNOWN[semantic]
    if unknown.any():
        ids = np.unique(semantic[unknown])
        log.warning("unknown KITTI label ids %s mapped to ignore", ids.tolist())
    return _KITTI_LUT[semantic]


def load_kitti_scan(bin_path, label_path=None) -> LabeledPointCloud:
    bin_path = Path(bin_path)
    raw = bin_path.read_bytes()
    if len(raw) % 16 != 0:
        raise MalformedFileError(
            f"{bin_path}: byte length {len(raw)} is not a multiple of 16"
        )
    scan = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    positions = scan[:, :3].astype(np.float64)
    intensity = scan[:, 3].astype(np.float64)

    raw_labels = None
    labels = np.full(len(scan), IGNORE_LABEL, dtype=np.int64)
    if label_path is not None:
        label_path = Path(label_path)
        blob = label_path.read_bytes()
        if len(blob) % 4 != 0:
            raise MalformedFileError(
                f"{label_path}: byte length {len(blob)} is not a multiple of 4"
            )
        raw_labels = np.frombuffer(blob, dtype="<u4").copy()
        if len(raw_labels) != len(scan):
            raise PairingError(
                f"{bin_path} has {len(scan)} points but {label_path} has "
                f"{len(raw_labels)} labels"
            )
        labels = remap_kitti_labels(raw_labels)

    return LabeledPointCloud(
        positions, intensity, labels,
        source_id=str(bin_path), raw_labels=raw_labels,
    )


def save_kitti_scan(cloud: LabeledPointCloud, bin_path, label_path=None):
    """Inverse of load_kitti_scan; reproduces the original bytes."""
    scan = np.empty((len(cloud), 4), dtype="<f4")
    scan[:, :3] = cloud.positions
    scan[:, 3] = cloud.attributes[:, 0]
    Path(bin_path).write_bytes(scan.tobytes())
    if label_path is not None:
        if cloud.raw_labels is None:
            raise ConfigurationError("cloud carries no raw label words to serialize")
        Path(label_path).write_bytes(
            np.asarray(cloud.raw_labels, dtype="<u4").tobytes()
        )


def save_predictions_kitti(train_ids: np.ndarray, path):
    """One little-endian uint32 raw label per point, submission layout."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    out = np.zeros(len(train_ids), dtype="<u4")
    for train, raw in KITTI_TRAIN_TO_RAW.items():
        out[train_ids == train] = raw
    Path(path).write_bytes(out.tobytes())


def list_kitti_scans(root, sequences) -> list[tuple[Path, Path | None]]:
    root = Path(root)
    pairs = []
    for seq in sequences:
        vel = root / "sequences" / seq / "velodyne"
        lab = root / "sequences" / seq / "labels"
        for bin_path in sorted(vel.glob("*.bin")):
            label_path = lab / (bin_path.stem + ".label")
            pairs.append((bin_path, label_path if label_path.exists() else None))
    return pairs


def kitti_features(cloud: LabeledPointCloud, channels: int = 4) -> np.ndarray:
    """[intensity, 1, z] plus horizontal range when channels == 4."""
    if channels not in (3, 4):
        raise ConfigurationError(f"kitti feature width must be 3 or 4, got {channels}")
    cols = [
        cloud.attributes[:, 0],
        np.ones(len(cloud)),
        cloud.positions[:, 2],
    ]
    if channels == 4:
        cols.append(np.hypot(cloud.positions[:, 0], cloud.positions[:, 1]))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# S3DIS
# ---------------------------------------------------------------------------

S3DIS_CLASS_NAMES = [
    "ceiling", "floor", "wall", "beam", "column", "window", "door",
    "table", "chair", "sofa", "bookcase", "board", "clutter",
]
_S3DIS_NAME_TO_ID = {name: i for i, name in enumerate(S3DIS_CLASS_NAMES)}
S3DIS_TRAIN_AREAS = [1, 2, 3, 4, 6]
S3DIS_VAL_AREAS = [5]


def _parse_s3dis_object(path: Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
        if data.size and data.shape[1] == 6:
            return data
    except ValueError:
        pass
    # slow path: locate the offending line for the diagnostic
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise MalformedFileError(
                    f"{path}:{lineno}: expected 6 fields 'x y z r g b', "
                    f"got {len(fields)}"
                )
            try:
                [float(v) for v in fields]
            except ValueError:
                raise MalformedFileError(
                    f"{path}:{lineno}: non-numeric field in {line.strip()!r}"
                ) from None
    raise MalformedFileError(f"{path}: could not parse object file")


def load_s3dis_room(room_dir) -> LabeledPointCloud:
    """Concatenate a room's per-object files; the room is kept whole."""
    room_dir = Path(room_dir)
    ann = room_dir / "Annotations"
    obj_dir = ann if ann.is_dir() else room_dir
    files = sorted(obj_dir.glob("*.txt"))
    if not files:
        raise EmptyInputError(f"{room_dir}: no object files found")

    chunks, label_chunks = [], []
    for path in files:
        category = path.stem.split("_")[0].lower()
        label = _S3DIS_NAME_TO_ID.get(category)
        if label is None:
            log.warning("%s: unknown category %r mapped to clutter", path, category)
            label = _S3DIS_NAME_TO_ID["clutter"]
        data = _parse_s3dis_object(path)
        chunks.append(data)
        label_chunks.append(np.full(len(data), label, dtype=np.int64))

    data = np.vstack(chunks)
    labels = np.concatenate(label_chunks)
    return LabeledPointCloud(
        data[:, :3], data[:, 3:6] / 255.0, labels, source_id=str(room_dir)
    )


def list_s3dis_rooms(root, areas) -> list[Path]:
    root = Path(root)
    rooms = []
    for area in areas:
        area_dir = root / f"Area_{area}"
        if area_dir.is_dir():
            rooms.extend(sorted(p for p in area_dir.iterdir() if p.is_dir()))
    return rooms


def s3dis_features(cloud: LabeledPointCloud) -> np.ndarray:
    """rgb plus position normalized to [0, 1] within the room: 6 channels."""
    pos = cloud.positions
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    extent = np.where(hi > lo, hi - lo, 1.0)
    return np.column_stack([cloud.attributes[:, :3], (pos - lo) / extent])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentationConfig:
    scale_range: tuple = (0.95, 1.05)
    translation_range: float = 0.2   # meters per axis
    jitter_sigma: float = 0.01       # meters, clipped at 3 sigma
    enable_scale: bool = True
    enable_rotation: bool = True     # uniform angle about Z
    enable_translation: bool = True
    enable_jitter: bool = True

    def __post_init__(self):
        if self.scale_range[0] <= 0:
            raise ConfigurationError("scale range must be positive")
        if self.jitter_sigma < 0:
            raise ConfigurationError("jitter sigma must be non-negative")


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points about the vertical axis by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def augment(cloud: LabeledPointCloud, config: AugmentationConfig, seed: int) -> LabeledPointCloud:
    """scale -> rotate-Z -> translate -> jitter; labels/attributes unchanged."""
    rng = np.random.default_rng(seed)
    pos = cloud.positions.copy()
    if config.enable_scale:
        pos *= rng.uniform(*config.scale_range)
    if config.enable_rotation:
        pos = rotate_z(pos, rng.uniform(0.0, 2.0 * np.pi))
    if config.enable_translation:
        pos += rng.uniform(-config.translation_range, config.translation_range, size=3)
    if config.enable_jitter and config.jitter_sigma > 0:
        jitter = rng.normal(0.0, config.jitter_sigma, size=pos.shape)
        bound = 3.0 * config.jitter_sigma
        pos += np.clip(jitter, -bound, bound)
    return LabeledPointCloud(
        pos, cloud.attributes.copy(), cloud.labels.copy(),
        source_id=cloud.source_id, raw_labels=cloud.raw_labels,
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class ShapeSpec:
    kind: str        # plane | box | pole
    label: int
    count: int
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (1.0, 1.0, 1.0)


@dataclass
class SceneSpec:
    shapes: list = field(default_factory=list)
    noise: float = 0.0


def synth_scene(spec: SceneSpec, seed: int) -> LabeledPointCloud:
    """Deterministic labeled scene sampled from primitive shapes."""
    if not spec.shapes:
        raise EmptyInputError("scene spec lists no shapes")
    rng = np.random.default_rng(seed)
    pos_chunks, label_chunks = [], []
    for shape in spec.shapes:
        c = np.asarray(shape.center, dtype=np.float64)
        s = np.asarray(shape.size, dtype=np.float64)
        n = shape.count
        if shape.kind == "plane":
            pts = np.column_stack([
                rng.uniform(-s[0] / 2, s[0] / 2, n),
                rng.uniform(-s[1] / 2, s[1] / 2, n),
                np.zeros(n),
            ])
        elif shape.kind == "box":
            pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * s
        elif shape.kind == "pole":
            radius = s[0] / 2 * np.sqrt(rng.uniform(0.0, 1.0, n))
            angle = rng.uniform(0.0, 2.0 * np.pi, n)
            pts = np.column_stack([
                radius * np.cos(angle),
                radius * np.sin(angle),
                rng.uniform(-s[2] / 2, s[2] / 2, n),
            ])
        else:
            raise ConfigurationError(f"unknown shape kind {shape.kind!r}")
        pts += c
        if spec.noise > 0:
            pts += rng.normal(0.0, spec.noise, size=pts.shape)
        pos_chunks.append(pts)
        label_chunks.append(np.full(n, shape.label, dtype=np.int64))
    positions = np.vstack(pos_chunks)
    labels = np.concatenate(label_chunks)
    return LabeledPointCloud(
        positions, np.ones((len(positions), 1)), labels,
        source_id=f"synth-{seed}",
    )


def synthetic_features(cloud: LabeledPointCloud, kind: str = "const_z") -> np.ndarray:
    """Input features for synthetic scenes.

    const: [1]; const_z: [1, z]; full: [1, z, horizontal range].
    """
    ones = np.ones(len(cloud))
    if kind == "const":
        return ones[:, None]
    if kind == "const_z":
        return np.column_stack([ones, cloud.positions[:, 2]])
    if kind == "full":
        return np.column_stack([
            ones, cloud.positions[:, 2],
            np.hypot(cloud.positions[:, 0], cloud.positions[:, 1]),
        ])
    raise ConfigurationError(f"unknown synthetic feature kind {kind!r}")


def random_scene_spec(seed: int, points: int = 4000) -> SceneSpec:
    """Three-class street-like scene: ground plane, boxes, thin poles.

    Shape placement varies with the seed, so consecutive seeds form a
    family of related but distinct scenes.
    """
    rng = np.random.default_rng(seed)
    shapes = [ShapeSpec("plane", 0, points // 2, size=(6.0, 6.0, 0.0))]
    for _ in range(int(rng.integers(2, 4))):
        cx, cy = rng.uniform(-2.2, 2.2, size=2)
        sx, sy, sz = rng.uniform(0.6, 1.3, size=3)
        shapes.append(ShapeSpec(
            "box", 1, points // 6, center=(cx, cy, sz / 2), size=(sx, sy, sz),
        ))
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(-2.5, 2.5, size=2)
        height = rng.uniform(1.5, 2.2)
        shapes.append(ShapeSpec(
            "pole", 2, points // 12, center=(cx, cy, height / 2),
            size=(0.12, 0.12, height),
        ))
    return SceneSpec(shapes, noise=0.01)


def synthetic_family(num_scenes: int, points: int, base_seed: int) -> list[LabeledPointCloud]:
    return [
        synth_scene(random_scene_spec(base_seed + i, points), seed=base_seed + i)
        for i in range(num_scenes)
    ]


def load_split_file(path) -> dict[str, list[str]]:
    """Plain-text split lists: one `name = item item ...` line per split."""
    splits: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedFileError(f"{path}:{lineno}: expected 'name = items'")
        name, items = line.split("=", 1)
        splits[name.strip()] = items.replace(",", " ").split()
    return splits
