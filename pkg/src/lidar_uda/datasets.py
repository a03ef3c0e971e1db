"""Frame files, class mappings, synthetic domains and multi-dataset merging.

Frame directory layout::

    points.bin   float32 LE, N x (x, y, z, intensity)
    labels.bin   uint32 LE, N raw labels (low 16 bits; upper bits ignored on read)
    cam_k.png    8-bit RGB image of camera k
    cam_k.txt    9 intrinsic reals then 16 extrinsic reals, row-major

A dataset root holds ``manifest.json`` plus one directory per frame.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .geometry import (
    IGNORE_ID,
    SHARED_CLASSES,
    Billboard,
    Box,
    CameraModel,
    CameraSpec,
    CameraView,
    Cylinder,
    Frame,
    Plane,
    PointCloud,
    SceneSpec,
    SensorConfig,
    simulate_scan,
)

log = logging.getLogger(__name__)

POINT_RECORD = np.dtype("<f4")
LABEL_RECORD = np.dtype("<u4")


# ---------------------------------------------------------------------------
# Class mapping


@dataclass(frozen=True)
class ClassMap:
    raw_to_shared: dict
    shared_names: tuple = SHARED_CLASSES
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        c = len(self.shared_names)
        for raw, sh in self.raw_to_shared.items():
            if sh != self.ignore_id and not 0 <= sh < c:
                raise ValueError(f"raw id {raw} maps outside the shared set")
        if 0 <= self.ignore_id < c:
            raise ValueError("ignore id collides with a shared id")

    @property
    def num_classes(self) -> int:
        return len(self.shared_names)

    def lookup_table(self, size: int = 1 << 16) -> np.ndarray:
        table = np.full(size, self.ignore_id, dtype=np.int64)
        for raw, sh in self.raw_to_shared.items():
            table[int(raw)] = sh
        return table

    def to_dict(self) -> dict:
        return {
            "raw_to_shared": {str(k): int(v) for k, v in sorted(self.raw_to_shared.items())},
            "shared_names": list(self.shared_names),
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMap":
        return cls({int(k): int(v) for k, v in d["raw_to_shared"].items()},
                   tuple(d["shared_names"]), int(d.get("ignore_id", IGNORE_ID)))

    @classmethod
    def identity(cls, names: Sequence[str] = SHARED_CLASSES) -> "ClassMap":
        return cls({i: i for i in range(len(names))}, tuple(names))


def apply_class_map(labels, cmap: ClassMap) -> np.ndarray:
    """Map raw label ids to shared ids; anything unmapped becomes ``cmap.ignore_id``."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(labels.shape, cmap.ignore_id, dtype=np.int64)
    for raw, sh in cmap.raw_to_shared.items():
        out[labels == raw] = sh
    return out


# Raw taxonomies. nuScenes uses the 16-class lidarseg benchmark ids (0 = noise).
NUSCENES_RAW = {
    0: "noise", 1: "barrier", 2: "bicycle", 3: "bus", 4: "car", 5: "construction_vehicle",
    6: "motorcycle", 7: "pedestrian", 8: "traffic_cone", 9: "trailer", 10: "truck",
    11: "driveable_surface", 12: "other_flat", 13: "sidewalk", 14: "terrain", 15: "manmade",
    16: "vegetation",
}
SEMANTICKITTI_RAW = {
    0: "unlabeled", 1: "outlier", 10: "car", 11: "bicycle", 13: "bus", 15: "motorcycle",
    16: "on-rails", 18: "truck", 20: "other-vehicle", 30: "person", 31: "bicyclist",
    32: "motorcyclist", 40: "road", 44: "parking", 48: "sidewalk", 49: "other-ground",
    50: "building", 51: "fence", 52: "other-structure", 60: "lane-marking", 70: "vegetation",
    71: "trunk", 72: "terrain", 80: "pole", 81: "traffic-sign", 99: "other-object",
    252: "moving-car", 253: "moving-bicyclist", 254: "moving-person", 255: "moving-motorcyclist",
    256: "moving-on-rails", 257: "moving-bus", 258: "moving-truck", 259: "moving-other-vehicle",
}
WAYMO_RAW = {
    0: "undefined", 1: "car", 2: "truck", 3: "bus", 4: "other_vehicle", 5: "motorcyclist",
    6: "bicyclist", 7: "pedestrian", 8: "sign", 9: "traffic_light", 10: "pole",
    11: "construction_cone", 12: "bicycle", 13: "motorcycle", 14: "building", 15: "vegetation",
    16: "tree_trunk", 17: "curb", 18: "road", 19: "lane_marker", 20: "other_ground",
    21: "walkable", 22: "sidewalk",
}

_NK_NAMES = SHARED_CLASSES
_NW_NAMES = tuple("bus" if n == "oth. vehicle" else n for n in SHARED_CLASSES)

# SemanticKITTI raw ids first go through the benchmark's learning map (moving
# objects fold onto their static class, bus / on-rails onto other-vehicle).
_SK_FOLD = {252: 10, 253: 31, 254: 30, 255: 32, 256: 20, 257: 20, 258: 18, 259: 20, 13: 20, 16: 20}


def nuscenes_class_map(pair: str = "NK") -> ClassMap:
    """nuScenes onto the 10 shared classes; ``pair`` picks the naming of class 4."""
    m = {4: 0, 2: 1, 6: 2, 10: 3, 3: 4, 7: 5, 11: 6, 13: 7, 14: 8, 16: 9}
    return ClassMap(m, _NK_NAMES if pair == "NK" else _NW_NAMES)


def semantickitti_class_map() -> ClassMap:
    """bicyclist / motorcyclist stay out of bicycle / motorcycle and are ignored."""
    official = {10: 0, 11: 1, 15: 2, 18: 3, 20: 4, 30: 5, 40: 6, 44: 6, 48: 7, 72: 8, 70: 9, 71: 9}
    m = dict(official)
    for raw, folded in _SK_FOLD.items():
        if folded in official:
            m[raw] = official[folded]
    return ClassMap(m, _NK_NAMES)


def waymo_class_map() -> ClassMap:
    m = {1: 0, 12: 1, 6: 1, 13: 2, 5: 2, 2: 3, 3: 4, 7: 5, 18: 6, 19: 6, 22: 7, 21: 8, 15: 9, 16: 9}
    return ClassMap(m, _NW_NAMES)


TAXONOMIES = {
    "nuscenes": (NUSCENES_RAW, nuscenes_class_map),
    "semantickitti": (SEMANTICKITTI_RAW, semantickitti_class_map),
    "waymo": (WAYMO_RAW, waymo_class_map),
    "shared": ({i: n for i, n in enumerate(SHARED_CLASSES)}, ClassMap.identity),
}

# Raw ids emitted by the synthetic generator for each shared class, with weights.
# IGNORE_ID stands for unlabeled structure (buildings, poles).
_EMIT = {
    "nuscenes": {0: {4: 1}, 1: {2: 1}, 2: {6: 1}, 3: {10: 1}, 4: {3: 1}, 5: {7: 1}, 6: {11: 1},
                 7: {13: 1}, 8: {14: 1}, 9: {16: 1}, IGNORE_ID: {15: 1}},
    "semantickitti": {0: {10: 0.8, 252: 0.2}, 1: {11: 1}, 2: {15: 1}, 3: {18: 1}, 4: {20: 1},
                      5: {30: 0.8, 254: 0.2}, 6: {40: 0.85, 44: 0.15}, 7: {48: 1}, 8: {72: 1},
                      9: {70: 1}, IGNORE_ID: {50: 0.8, 80: 0.2}},
    "waymo": {0: {1: 1}, 1: {12: 1}, 2: {13: 1}, 3: {2: 1}, 4: {3: 1}, 5: {7: 1}, 6: {18: 0.9, 19: 0.1},
              7: {22: 1}, 8: {21: 1}, 9: {15: 1}, IGNORE_ID: {14: 0.8, 10: 0.2}},
    "shared": {**{i: {i: 1} for i in range(10)}, IGNORE_ID: {IGNORE_ID: 1}},
}


def shared_to_raw(labels: np.ndarray, taxonomy: str, rng: np.random.Generator) -> np.ndarray:
    """Draw a raw label per point for the given taxonomy (inverse of the class map)."""
    out = np.zeros(len(labels), dtype=np.int64)
    for sh, choices in _EMIT[taxonomy].items():
        mask = labels == sh
        if not mask.any():
            continue
        ids = np.array(list(choices))
        w = np.array(list(choices.values()), dtype=np.float64)
        out[mask] = ids[rng.choice(len(ids), size=int(mask.sum()), p=w / w.sum())] if len(ids) > 1 else ids[0]
    return out


# ---------------------------------------------------------------------------
# Frame IO


def write_frame(frame: Frame, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    cloud = frame.cloud
    n = len(cloud)
    rec = np.zeros((n, 4), dtype=POINT_RECORD)
    rec[:, :3] = cloud.xyz
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    (d / "points.bin").write_bytes(rec.tobytes())
    if cloud.labels is not None:
        if np.any(cloud.labels < 0) or np.any(cloud.labels > 0xFFFF):
            raise ValueError("raw labels must fit in 16 bits")
        (d / "labels.bin").write_bytes(cloud.labels.astype(LABEL_RECORD).tobytes())
    for k, view in enumerate(frame.views):
        Image.fromarray(np.ascontiguousarray(view.image, dtype=np.uint8), "RGB").save(d / f"cam_{k}.png")
        vals = list(view.camera.intrinsics.ravel()) + list(view.camera.extrinsics.ravel())
        (d / f"cam_{k}.txt").write_text(" ".join(repr(float(v)) for v in vals) + "\n")


def load_frame(dir_path, name: str | None = None) -> Frame:
    d = Path(dir_path)
    raw = (d / "points.bin").read_bytes()
    if len(raw) % (4 * POINT_RECORD.itemsize):
        raise ValueError(f"corrupt frame: {d / 'points.bin'} has {len(raw)} bytes")
    rec = np.frombuffer(raw, dtype=POINT_RECORD).reshape(-1, 4)
    labels = None
    lpath = d / "labels.bin"
    if lpath.exists():
        lraw = lpath.read_bytes()
        if len(lraw) % LABEL_RECORD.itemsize:
            raise ValueError(f"corrupt frame: {lpath} has {len(lraw)} bytes")
        labels = (np.frombuffer(lraw, dtype=LABEL_RECORD) & 0xFFFF).astype(np.int64)
        if len(labels) != len(rec):
            raise ValueError(f"label mismatch: {len(labels)} labels for {len(rec)} points")
    cloud = PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64), labels)
    views = []
    k = 0
    while (d / f"cam_{k}.png").exists():
        image = np.asarray(Image.open(d / f"cam_{k}.png").convert("RGB"))
        vals = np.array((d / f"cam_{k}.txt").read_text().split(), dtype=np.float64)
        if len(vals) != 25:
            raise ValueError(f"corrupt frame: {d / f'cam_{k}.txt'} needs 25 values")
        cam = CameraModel(vals[:9].reshape(3, 3), vals[9:].reshape(4, 4), image.shape[1], image.shape[0])
        views.append(CameraView(cam, image))
        k += 1
    return Frame(cloud, views, name if name is not None else d.name)


def quantize_frame(frame: Frame) -> Frame:
    """Round geometry to the on-disk float32 precision."""
    c = frame.cloud
    xyz = c.xyz.astype(np.float32).astype(np.float64)
    inten = None if c.intensity is None else c.intensity.astype(np.float32).astype(np.float64)
    return Frame(PointCloud(xyz, inten, c.labels), frame.views, frame.name)


# ---------------------------------------------------------------------------
# Synthetic scenes and domains


# (length, width, height) of the box-shaped road users.
DEFAULT_VEHICLE_DIMS = {
    "car": (4.4, 1.8, 1.5),
    "bicycle": (1.7, 0.3, 1.0),
    "motorcycle": (2.2, 0.9, 1.4),
    "truck": (7.5, 2.5, 3.3),
    "oth. vehicle": (11.0, 2.6, 3.1),
}


@dataclass(frozen=True)
class SceneDistribution:
    """Procedural street scene parameters. Counts are Poisson means per scene.

    The appearance fields (vehicle sizes, tree shape, curb and verge heights)
    let two domains differ in what objects look like, not only in how often
    they occur.
    """

    road_width: tuple = (7.0, 11.0)
    sidewalk_width: tuple = (2.0, 3.5)
    terrain_width: tuple = (3.0, 6.0)
    extent: float = 40.0
    object_scale: float = 1.0
    counts: dict = field(default_factory=lambda: {
        "car": 8.0, "bicycle": 2.0, "motorcycle": 2.0, "truck": 1.5, "oth. vehicle": 1.0,
        "pedestrian": 5.0, "tree": 8.0, "hedge": 3.0, "building": 4.0, "pole": 4.0,
    })
    vehicle_dims: dict = field(default_factory=lambda: dict(DEFAULT_VEHICLE_DIMS))
    pedestrian_height: tuple = (1.55, 1.9)
    trunk_height: tuple = (1.8, 3.0)
    crown_radius: tuple = (1.2, 2.5)
    crown_height: tuple = (1.5, 3.5)
    hedge_height: tuple = (0.8, 1.6)
    curb_height: float = 0.15
    terrain_height: float = 0.08

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDistribution":
        out = {}
        for k, v in d.items():
            if k == "vehicle_dims":
                v = {name: tuple(dims) for name, dims in v.items()}
            elif isinstance(v, list):
                v = tuple(v)
            out[k] = v
        return cls(**out)


def sample_scene(dist: SceneDistribution, rng: np.random.Generator) -> SceneSpec:
    """One straight street along x with sidewalks, terrain verges, road users and roadside clutter."""
    ext = dist.extent
    road_w = rng.uniform(*dist.road_width)
    side_w = rng.uniform(*dist.sidewalk_width)
    terr_w = rng.uniform(*dist.terrain_width)
    y0 = rng.uniform(-1.0, 1.0)  # ego lateral offset
    half = road_w / 2
    prims: list = [Plane(6, 0.0, None)]
    for sgn in (-1, 1):
        ya, yb = sorted((y0 + sgn * half, y0 + sgn * (half + side_w)))
        prims.append(Plane(7, dist.curb_height, (-ext, ya, ext, yb)))
        ya2, yb2 = sorted((y0 + sgn * (half + side_w), y0 + sgn * (half + side_w + terr_w)))
        prims.append(Plane(8, dist.terrain_height, (-ext, ya2, ext, yb2)))

    occupied: list = [(-3.0, y0 - 1.5, 3.0, y0 + 1.5)]

    def free(x0, y0_, x1, y1_):
        for a in occupied:
            if x0 < a[2] and x1 > a[0] and y0_ < a[3] and y1_ > a[1]:
                return False
        occupied.append((x0, y0_, x1, y1_))
        return True

    def place_box(cls, cx, cy, zbase=0.0):
        dims = dist.vehicle_dims[SHARED_CLASSES[cls]]
        length, width, height = (v * dist.object_scale * rng.uniform(0.9, 1.1) for v in dims)
        if rng.random() < 0.15:
            length, width = width, length
        lo = (cx - length / 2, cy - width / 2, zbase)
        hi = (cx + length / 2, cy + width / 2, zbase + height)
        if free(lo[0], lo[1], hi[0], hi[1]):
            prims.append(Box(cls, lo, hi))

    counts = dist.counts
    names = {n: i for i, n in enumerate(SHARED_CLASSES)}
    for name in ("car", "truck", "oth. vehicle", "bicycle", "motorcycle"):
        cls = names[name]
        for _ in range(rng.poisson(counts.get(name, 0.0))):
            for _attempt in range(5):
                cx = rng.uniform(-ext + 6, ext - 6)
                if cls in (1, 2) and rng.random() < 0.4:
                    cy = y0 + rng.choice([-1, 1]) * (half + rng.uniform(0.3, side_w - 0.3))
                    zb = dist.curb_height
                else:
                    lane = rng.uniform(-half + 1.5, half - 1.5)
                    cy, zb = y0 + lane, 0.0
                before = len(prims)
                place_box(cls, cx, cy, zb)
                if len(prims) > before:
                    break
    for _ in range(rng.poisson(counts.get("pedestrian", 0.0))):
        for _attempt in range(5):
            cx = rng.uniform(-ext + 3, ext - 3)
            cy = y0 + rng.choice([-1, 1]) * (half + rng.uniform(0.4, side_w - 0.4))
            r = 0.3 * dist.object_scale
            if free(cx - r, cy - r, cx + r, cy + r):
                h = rng.uniform(*dist.pedestrian_height) * dist.object_scale
                prims.append(Cylinder(5, (cx, cy), r, (dist.curb_height, dist.curb_height + h)))
                break
    verge = half + side_w
    for _ in range(rng.poisson(counts.get("tree", 0.0))):
        cx = rng.uniform(-ext, ext)
        cy = y0 + rng.choice([-1, 1]) * (verge + rng.uniform(0.8, terr_w - 0.5 if terr_w > 1.5 else 1.0))
        crown = rng.uniform(*dist.crown_radius)
        trunk_h = rng.uniform(*dist.trunk_height)
        prims.append(Cylinder(9, (cx, cy), rng.uniform(0.15, 0.3), (dist.terrain_height, trunk_h)))
        prims.append(Cylinder(9, (cx, cy), crown, (trunk_h, trunk_h + rng.uniform(*dist.crown_height))))
    for _ in range(rng.poisson(counts.get("hedge", 0.0))):
        cx = rng.uniform(-ext, ext)
        cy = y0 + rng.choice([-1, 1]) * (verge + terr_w - 0.3)
        ln = rng.uniform(3.0, 10.0)
        prims.append(Billboard(9, (cx - ln / 2, cy), (cx + ln / 2, cy), (dist.terrain_height, rng.uniform(*dist.hedge_height))))
    far = verge + terr_w
    for _ in range(rng.poisson(counts.get("building", 0.0))):
        cx = rng.uniform(-ext, ext)
        sgn = rng.choice([-1, 1])
        depth = rng.uniform(6, 15)
        ya = y0 + sgn * (far + 1.0)
        yb = ya + sgn * depth
        ln = rng.uniform(8, 20)
        prims.append(Box(IGNORE_ID, (cx - ln / 2, min(ya, yb), 0.0), (cx + ln / 2, max(ya, yb), rng.uniform(5, 15))))
    for _ in range(rng.poisson(counts.get("pole", 0.0))):
        cx = rng.uniform(-ext, ext)
        cy = y0 + rng.choice([-1, 1]) * (half + 0.3)
        prims.append(Cylinder(IGNORE_ID, (cx, cy), 0.12, (dist.curb_height, rng.uniform(4, 8))))
    return SceneSpec(prims)


@dataclass(frozen=True)
class DomainSpec:
    """One synthetic dataset: sensor, scene distribution, label taxonomy, size."""

    name: str
    sensor: SensorConfig
    scenes: SceneDistribution = SceneDistribution()
    taxonomy: str = "shared"
    frame_count: int = 20

    def class_map(self, pair: str = "NK") -> ClassMap:
        _, factory = TAXONOMIES[self.taxonomy]
        return factory(pair) if self.taxonomy == "nuscenes" else factory()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sensor": self.sensor.to_dict(),
            "scenes": self.scenes.to_dict(),
            "taxonomy": self.taxonomy,
            "frame_count": self.frame_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(d["name"], SensorConfig.from_dict(d["sensor"]), SceneDistribution.from_dict(d.get("scenes", {})),
                   d.get("taxonomy", "shared"), int(d.get("frame_count", 20)))


@dataclass(frozen=True)
class GapSpec:
    source: DomainSpec
    target: DomainSpec
    shared_scenes: bool = False

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(), "target": self.target.to_dict(),
                "shared_scenes": self.shared_scenes}

    @classmethod
    def from_dict(cls, d: dict) -> "GapSpec":
        return cls(DomainSpec.from_dict(d["source"]), DomainSpec.from_dict(d["target"]),
                   bool(d.get("shared_scenes", False)))


VAL_FRACTION = 0.2


def split_counts(n: int) -> tuple[int, int]:
    """Last 20% of frames by index go to val (at least one frame each side)."""
    n_val = max(1, int(round(n * VAL_FRACTION)))
    return n - n_val, n_val


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    root: Path
    frames: tuple
    sensor: SensorConfig
    class_map: ClassMap
    split: str = "train"
    labeled: bool = True

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError("split must be train or val")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_paths(self) -> list[Path]:
        return [Path(self.root) / f for f in self.frames]

    def with_split(self, split: str) -> "DatasetManifest":
        return load_manifest(self.root, split)

    def unlabeled(self) -> "DatasetManifest":
        return replace(self, labeled=False)


def write_manifest(root, name, sensor, cmap, train, val, extra=None) -> None:
    doc = {
        "name": name,
        "sensor": sensor.to_dict(),
        "class_map": cmap.to_dict(),
        "splits": {"train": list(train), "val": list(val)},
    }
    if extra:
        doc.update(extra)
    Path(root, "manifest.json").write_text(json.dumps(doc, indent=1))


def load_manifest(root, split: str = "train") -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {root} (run `generate` first)")
    doc = json.loads(path.read_text())
    frames = tuple(doc["splits"][split])
    for f in frames:
        if not (root / f / "points.bin").exists():
            raise FileNotFoundError(f"missing frame {root / f}")
    return DatasetManifest(doc["name"], root, frames, SensorConfig.from_dict(doc["sensor"]),
                           ClassMap.from_dict(doc["class_map"]), split)


def make_domain(spec: DomainSpec, seed: int, root, scene_seed: int | None = None,
                pair: str = "NK") -> DatasetManifest:
    """Generate and write one synthetic dataset; returns its train manifest."""
    if spec.frame_count < 2:
        raise ValueError("frame_count must be >= 2 (need a train/val split)")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scene_seed = seed if scene_seed is None else scene_seed
    names = []
    for i in range(spec.frame_count):
        scene = sample_scene(spec.scenes, np.random.default_rng([scene_seed, i, 1]))
        frame = simulate_scan(scene, spec.sensor, int(np.random.default_rng([seed, i, 2]).integers(2**31)))
        raw = shared_to_raw(frame.cloud.labels, spec.taxonomy, np.random.default_rng([seed, i, 3]))
        frame.cloud = frame.cloud.with_labels(raw)
        name = f"{i:05d}"
        write_frame(frame, root / name)
        scene.save(root / name / "scene.json")
        names.append(name)
    n_train, _ = split_counts(len(names))
    write_manifest(root, spec.name, spec.sensor, spec.class_map(pair), names[:n_train], names[n_train:],
                   {"domain": spec.to_dict(), "seed": seed})
    return load_manifest(root, "train")


def make_domain_pair(gap: GapSpec, seed: int, root) -> tuple[DatasetManifest, DatasetManifest]:
    """Source and target datasets under ``root/source`` and ``root/target``.

    Scenes are disjoint unless ``gap.shared_scenes`` is set, in which case both
    sensors scan the same scene sequence.
    """
    for spec in (gap.source, gap.target):
        if spec.frame_count < 2:
            raise ValueError("frame_count must be >= 2 (need a train/val split)")
    root = Path(root)
    src_seed, tgt_seed = (int(s) for s in np.random.default_rng([seed, 11]).integers(2**31, size=2))
    tgt_scene = src_seed if gap.shared_scenes else tgt_seed
    pair = "NW" if "waymo" in (gap.source.taxonomy, gap.target.taxonomy) else "NK"
    src = make_domain(gap.source, src_seed, root / "source", pair=pair)
    tgt = make_domain(gap.target, tgt_seed, root / "target", scene_seed=tgt_scene, pair=pair)
    return src, tgt


# ---------------------------------------------------------------------------
# Loading and merging


class FrameDataset:
    """Frames of one manifest mapped to shared labels, cached in memory."""

    def __init__(self, manifest: DatasetManifest, cache: bool = True):
        self.manifest = manifest
        self._cache: dict[int, Frame] | None = {} if cache else None
        self._table = manifest.class_map.lookup_table()

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, i: int) -> Frame:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        path = self.manifest.frame_paths()[i]
        frame = load_frame(path, name=f"{self.manifest.name}/{path.name}")
        labels = frame.cloud.labels
        if labels is not None and self.manifest.labeled:
            frame.cloud = frame.cloud.with_labels(self._table[labels])
        else:
            frame.cloud = frame.cloud.with_labels(None)
        if self._cache is not None:
            self._cache[i] = frame
        return frame

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self[i]

    @property
    def class_names(self) -> tuple:
        return self.manifest.class_map.shared_names


class MemoryDataset:
    """In-memory stand-in with the FrameDataset interface (labels already shared)."""

    def __init__(self, frames: Sequence[Frame], class_names=SHARED_CLASSES, name: str = "memory"):
        self.frames = list(frames)
        self.class_names = tuple(class_names)
        self.name = name

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)


def dataset_name(ds) -> str:
    return ds.manifest.name if hasattr(ds, "manifest") else getattr(ds, "name", "memory")


class MergedDataset:
    """Concatenation of several datasets; epochs visit every frame once (size-proportional sampling)."""

    def __init__(self, parts: Sequence, require_labels: bool = False):
        if not parts:
            raise ValueError("merge needs at least one dataset")
        self.parts = [p if not isinstance(p, DatasetManifest) else FrameDataset(p) for p in parts]
        if require_labels:
            names = {tuple(_class_index_names(p)) for p in self.parts}
            if len(names) > 1:
                raise ValueError("class-set mismatch")
        self._index = [(k, i) for k, p in enumerate(self.parts) for i in range(len(p))]

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, j: int) -> Frame:
        k, i = self._index[j]
        return self.parts[k][i]

    def provenance(self, j: int) -> str:
        return dataset_name(self.parts[self._index[j][0]])

    def epoch_order(self, rng: np.random.Generator) -> np.ndarray:
        return rng.permutation(len(self))

    def __iter__(self):
        for j in range(len(self)):
            yield self[j]


def _class_index_names(ds) -> tuple:
    # Names differ only in the bus/oth. vehicle spelling between mappings; compare by count.
    names = getattr(ds, "class_names", SHARED_CLASSES)
    return (len(names),) if names in (_NK_NAMES, _NW_NAMES) else tuple(names)


def merge(parts: Sequence, require_labels: bool = False) -> MergedDataset:
    return MergedDataset(parts, require_labels=require_labels)


# ---------------------------------------------------------------------------
# Real-data adapters


class KittiLayoutAdapter:
    """SemanticKITTI-style sequence directory: ``velodyne/*.bin`` and ``labels/*.label``.

    Points are float32 (x, y, z, remission); labels are uint32 with the semantic id
    in the low 16 bits, exactly like this package's frame format.
    """

    def __init__(self, sequence_dir, class_map: ClassMap | None = None):
        self.root = Path(sequence_dir)
        self.class_map = class_map or semantickitti_class_map()
        self.scans = sorted((self.root / "velodyne").glob("*.bin"))

    def __len__(self) -> int:
        return len(self.scans)

    def __getitem__(self, i: int) -> Frame:
        scan = self.scans[i]
        raw = scan.read_bytes()
        if len(raw) % 16:
            raise ValueError(f"corrupt frame: {scan}")
        rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
        lab_path = self.root / "labels" / (scan.stem + ".label")
        labels = None
        if lab_path.exists():
            lab = np.frombuffer(lab_path.read_bytes(), dtype="<u4") & 0xFFFF
            if len(lab) != len(rec):
                raise ValueError("label mismatch")
            labels = apply_class_map(lab.astype(np.int64), self.class_map)
        return Frame(PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64), labels), [],
                     scan.stem)


class NuScenesAdapter:
    """Interface placeholder; nuScenes token-database ingestion is not implemented."""

    def __init__(self, *args, **kwargs):
        raise NotImplementedError("nuScenes ingestion is out of scope; convert frames to the directory format")


class WaymoAdapter:
    """Interface placeholder; TFRecord parsing is not implemented."""

    def __init__(self, *args, **kwargs):
        raise NotImplementedError("Waymo TFRecord ingestion is out of scope; convert frames to the directory format")


def standard_domains(frame_count: int = 40, small: bool = False) -> dict[str, DomainSpec]:
    """Three synthetic stand-ins: a 32-beam surround-camera rig in dense city
    traffic (N), a 64-beam front-camera rig in a European town (K) and a
    64-beam wide-road suburban rig with no rear camera (W). Besides sensors and
    class frequencies, the domains differ in vehicle sizes, tree shapes and
    curb heights."""
    az = 120 if small else 240
    n_cams = (CameraSpec(0.0), CameraSpec(90.0), CameraSpec(180.0), CameraSpec(270.0))
    k_cams = (CameraSpec(0.0, hfov_deg=100.0),)
    w_cams = (CameraSpec(0.0), CameraSpec(60.0), CameraSpec(-60.0))
    n = DomainSpec(
        "N",
        SensorConfig(beams=32, azimuth_steps=az, mount_height=1.84, vertical_fov=(-30.0, 10.0),
                     max_range=50.0, dropout_rate=0.05, intensity_offset=-0.08, intensity_gain=0.9,
                     cameras=n_cams),
        SceneDistribution(
            road_width=(6.5, 9.0),
            counts={"car": 7.0, "bicycle": 3.0, "motorcycle": 3.0, "truck": 2.0, "oth. vehicle": 1.5,
                    "pedestrian": 8.0, "tree": 5.0, "hedge": 2.0, "building": 5.0, "pole": 5.0},
            vehicle_dims={"car": (4.7, 1.9, 1.65), "bicycle": (1.7, 0.3, 1.0), "motorcycle": (2.0, 0.8, 1.3),
                          "truck": (7.0, 2.4, 3.0), "oth. vehicle": (11.5, 2.6, 3.2)},
            trunk_height=(1.5, 2.5), crown_radius=(2.0, 3.0), crown_height=(2.0, 4.0),
            hedge_height=(0.8, 1.4), curb_height=0.15, terrain_height=0.10),
        "nuscenes", frame_count,
    )
    k = DomainSpec(
        "K",
        SensorConfig(beams=64, azimuth_steps=az, mount_height=1.73, vertical_fov=(-24.9, 2.0),
                     max_range=50.0, dropout_rate=0.05, intensity_offset=0.1, intensity_gain=1.1,
                     cameras=k_cams),
        SceneDistribution(
            road_width=(6.0, 8.0),
            counts={"car": 10.0, "bicycle": 2.5, "motorcycle": 2.0, "truck": 1.5, "oth. vehicle": 1.5,
                    "pedestrian": 5.0, "tree": 10.0, "hedge": 4.0, "building": 4.0, "pole": 3.0},
            vehicle_dims={"car": (4.2, 1.75, 1.42), "bicycle": (1.75, 0.28, 0.95),
                          "motorcycle": (2.2, 0.8, 1.2), "truck": (6.5, 2.35, 2.9),
                          "oth. vehicle": (14.0, 2.5, 3.4)},
            trunk_height=(2.5, 4.0), crown_radius=(1.0, 2.0), crown_height=(2.5, 5.0),
            hedge_height=(1.0, 2.0), curb_height=0.12, terrain_height=0.05),
        "semantickitti", frame_count,
    )
    w = DomainSpec(
        "W",
        SensorConfig(beams=64, azimuth_steps=az + az // 3, mount_height=2.1, vertical_fov=(-17.6, 2.4),
                     max_range=50.0, dropout_rate=0.03, intensity_offset=0.0, intensity_gain=0.75,
                     cameras=w_cams),
        SceneDistribution(
            road_width=(9.0, 13.0),
            counts={"car": 9.0, "bicycle": 2.0, "motorcycle": 2.0, "truck": 2.5, "oth. vehicle": 1.5,
                    "pedestrian": 5.0, "tree": 6.0, "hedge": 3.0, "building": 3.0, "pole": 4.0},
            vehicle_dims={"car": (5.0, 2.0, 1.75), "bicycle": (1.8, 0.35, 1.05),
                          "motorcycle": (2.3, 0.95, 1.45), "truck": (8.5, 2.6, 3.8),
                          "oth. vehicle": (12.5, 2.6, 3.3)},
            trunk_height=(2.0, 3.5), crown_radius=(1.5, 3.5), crown_height=(3.0, 6.0),
            hedge_height=(0.6, 1.2), curb_height=0.18, terrain_height=0.12),
        "waymo", frame_count,
    )
    return {"N": n, "K": k, "W": w}


def make_domains(specs: dict, seed: int, root) -> dict[str, DatasetManifest]:
    """Write several domains with disjoint scene seeds; returns train manifests keyed by name."""
    out = {}
    for j, (key, spec) in enumerate(sorted(specs.items())):
        dseed = int(np.random.default_rng([seed, 101, j]).integers(2**31))
        out[key] = make_domain(spec, dseed, Path(root) / key, pair="NW" if spec.taxonomy == "waymo" else "NK")
    return out
