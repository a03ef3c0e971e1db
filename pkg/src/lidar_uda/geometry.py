"""Point clouds, analytic scenes, lidar/camera simulation and augmentations.

Scenes are small lists of analytic primitives in a world frame whose ground
plane is ``z = 0``. The lidar sits at ``(0, 0, mount_height)``; returned
points are expressed in the sensor frame (world shifted down by the mount
height). Cameras are rigidly attached to the lidar.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE_ID = 255

SHARED_CLASSES = (
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "oth. vehicle",
    "pedestrian",
    "driveable surface",
    "sidewalk",
    "terrain",
    "vegetation",
)

# Mean return strength per shared class; unlabeled structure uses IGNORE_ID.
CLASS_INTENSITY = {
    0: 0.62,
    1: 0.35,
    2: 0.50,
    3: 0.70,
    4: 0.78,
    5: 0.25,
    6: 0.10,
    7: 0.30,
    8: 0.45,
    9: 0.55,
    IGNORE_ID: 0.40,
}

# Flat label colours for rendered camera images. Pairwise distances exceed
# 2 * sqrt(3) * TINT_AMPLITUDE so nearest-colour decoding is exact.
CLASS_COLORS = {
    0: (220, 20, 60),
    1: (119, 11, 232),
    2: (0, 0, 230),
    3: (0, 80, 100),
    4: (250, 170, 30),
    5: (255, 255, 255),
    6: (128, 64, 128),
    7: (244, 35, 232),
    8: (152, 251, 152),
    9: (20, 142, 35),
    IGNORE_ID: (105, 105, 105),
}
TINT_AMPLITUDE = 12
SKY_COLOR = (0, 0, 0)

_EPS_T = 1e-9


# ---------------------------------------------------------------------------
# Core data types


@dataclass
class PointCloud:
    xyz: np.ndarray
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != n:
                raise ValueError("intensity length does not match point count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("label mismatch")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.xyz[idx],
            None if self.intensity is None else self.intensity[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.xyz, self.intensity, labels)


@dataclass
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        rot = self.extrinsics[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the lidar frame."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraSpec:
    """Mounting of one camera on the lidar: yaw of the optical axis, field of view, resolution."""

    yaw_deg: float
    hfov_deg: float = 90.0
    width: int = 224
    height: int = 112
    offset: tuple = (0.0, 0.0, -0.25)

    def camera_model(self) -> CameraModel:
        fx = (self.width / 2) / math.tan(math.radians(self.hfov_deg) / 2)
        intr = np.array([[fx, 0, self.width / 2], [0, fx, self.height / 2], [0, 0, 1.0]])
        yaw = math.radians(self.yaw_deg)
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, fwd])
        ext = np.eye(4)
        ext[:3, :3] = rot
        ext[:3, 3] = -rot @ np.asarray(self.offset, dtype=np.float64)
        return CameraModel(intr, ext, self.width, self.height)


@dataclass(frozen=True)
class SensorConfig:
    beams: int = 32
    azimuth_steps: int = 180
    mount_height: float = 1.8
    vertical_fov: tuple = (-30.0, 10.0)
    max_range: float = 60.0
    dropout_rate: float = 0.0
    intensity_offset: float = 0.0
    intensity_gain: float = 1.0
    cameras: tuple = ()

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if self.azimuth_steps < 1:
            raise ValueError("azimuth_steps must be >= 1")
        if not self.vertical_fov[0] < self.vertical_fov[1]:
            raise ValueError("vertical_fov low must be below high")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "vertical_fov", tuple(float(v) for v in self.vertical_fov))
        object.__setattr__(
            self,
            "cameras",
            tuple(c if isinstance(c, CameraSpec) else CameraSpec(**c) for c in self.cameras),
        )

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["vertical_fov"] = list(self.vertical_fov)
        d["cameras"] = [
            {"yaw_deg": c.yaw_deg, "hfov_deg": c.hfov_deg, "width": c.width,
             "height": c.height, "offset": list(c.offset)}
            for c in self.cameras
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        d = dict(d)
        d["vertical_fov"] = tuple(d.get("vertical_fov", (-30.0, 10.0)))
        d["cameras"] = tuple(CameraSpec(**{**c, "offset": tuple(c.get("offset", (0, 0, -0.25)))})
                             for c in d.get("cameras", ()))
        return cls(**d)


@dataclass
class Correspondences:
    point_idx: np.ndarray
    pixel_uv: np.ndarray
    camera_id: int = 0

    def __len__(self) -> int:
        return len(self.point_idx)


@dataclass
class CameraView:
    camera: CameraModel
    image: np.ndarray  # H x W x 3 uint8


@dataclass
class Frame:
    cloud: PointCloud
    views: list = field(default_factory=list)
    name: str = ""


@dataclass(frozen=True)
class AugmentPolicy:
    rotate_z: bool = True
    flip_xy: bool = True
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < low <= high")

    @classmethod
    def off(cls) -> "AugmentPolicy":
        return cls(False, False, (1.0, 1.0))

    @property
    def is_identity(self) -> bool:
        return not self.rotate_z and not self.flip_xy and self.scale_range == (1.0, 1.0)


# ---------------------------------------------------------------------------
# Scenes


@dataclass
class Plane:
    """Horizontal plane ``z = height``, optionally bounded to an xy rectangle."""

    class_id: int
    height: float = 0.0
    bounds: tuple | None = None  # (xmin, ymin, xmax, ymax)


@dataclass
class Box:
    class_id: int
    lo: tuple
    hi: tuple


@dataclass
class Cylinder:
    """Vertical cylinder with caps."""

    class_id: int
    center: tuple
    radius: float
    z_range: tuple


@dataclass
class Billboard:
    """Vertical rectangle spanning the xy segment p0-p1."""

    class_id: int
    p0: tuple
    p1: tuple
    z_range: tuple


_KINDS = {"plane": Plane, "box": Box, "cylinder": Cylinder, "billboard": Billboard}


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)

    def to_json(self) -> str:
        out = []
        for p in self.primitives:
            kind = next(k for k, cls in _KINDS.items() if isinstance(p, cls))
            d = {"kind": kind, **{k: _jsonable(v) for k, v in vars(p).items()}}
            out.append(d)
        return json.dumps({"primitives": out}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        doc = json.loads(text)
        prims = []
        for d in doc["primitives"]:
            d = dict(d)
            kind = _KINDS[d.pop("kind")]
            prims.append(kind(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}))
        return cls(prims)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(Path(path).read_text())


def _jsonable(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        return [float(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _hit_plane(p: Plane, o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p.height - o[..., 2]) / d[..., 2]
    t = np.where(np.isfinite(t) & (t > _EPS_T), t, np.inf)
    if p.bounds is not None:
        xmin, ymin, xmax, ymax = p.bounds
        with np.errstate(invalid="ignore"):
            hx = o[..., 0] + t * d[..., 0]
            hy = o[..., 1] + t * d[..., 1]
        inside = (hx >= xmin) & (hx <= xmax) & (hy >= ymin) & (hy <= ymax)
        t = np.where(inside, t, np.inf)
    return t


def _hit_box(b: Box, o, d):
    lo = np.asarray(b.lo, dtype=np.float64)
    hi = np.asarray(b.hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tnear = np.max(np.minimum(t1, t2), axis=-1)
    tfar = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tnear <= tfar) & (tfar > _EPS_T)
    t = np.where(tnear > _EPS_T, tnear, tfar)
    return np.where(hit, t, np.inf)


def _hit_cylinder(c: Cylinder, o, d):
    cx, cy = c.center
    z0, z1 = c.z_range
    ox = o[..., 0] - cx
    oy = o[..., 1] - cy
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    bq = 2 * (d[..., 0] * ox + d[..., 1] * oy)
    cq = ox**2 + oy**2 - c.radius**2
    disc = bq**2 - 4 * a * cq
    best = np.full(np.shape(a), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        for sign in (-1.0, 1.0):
            t = (-bq + sign * sq) / (2 * a)
            z = o[..., 2] + t * d[..., 2]
            ok = np.isfinite(t) & (t > _EPS_T) & (z >= z0) & (z <= z1)
            best = np.where(ok & (t < best), t, best)
        for zc in (z0, z1):
            t = (zc - o[..., 2]) / d[..., 2]
            hx = ox + t * d[..., 0]
            hy = oy + t * d[..., 1]
            ok = np.isfinite(t) & (t > _EPS_T) & (hx**2 + hy**2 <= c.radius**2)
            best = np.where(ok & (t < best), t, best)
    return best


def _hit_billboard(b: Billboard, o, d):
    p0 = np.asarray(b.p0, dtype=np.float64)
    seg = np.asarray(b.p1, dtype=np.float64) - p0
    normal = np.array([-seg[1], seg[0]])
    denom = d[..., 0] * normal[0] + d[..., 1] * normal[1]
    num = (p0[0] - o[..., 0]) * normal[0] + (p0[1] - o[..., 1]) * normal[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
        hx = o[..., 0] + t * d[..., 0] - p0[0]
        hy = o[..., 1] + t * d[..., 1] - p0[1]
        s = (hx * seg[0] + hy * seg[1]) / (seg @ seg)
        z = o[..., 2] + t * d[..., 2]
    ok = np.isfinite(t) & (t > _EPS_T) & (s >= 0) & (s <= 1) & (z >= b.z_range[0]) & (z <= b.z_range[1])
    return np.where(ok, t, np.inf)


_HIT = {Plane: _hit_plane, Box: _hit_box, Cylinder: _hit_cylinder, Billboard: _hit_billboard}


def cast_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Closest hit of each ray. Returns (t, primitive index); misses get t=inf, index -1."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    best_t = np.full(dirs.shape[:-1], np.inf)
    best_i = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _HIT[type(prim)](prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def beam_directions(sensor: SensorConfig) -> np.ndarray:
    """Unit ray directions, shape (beams, azimuth_steps, 3); elevations evenly spaced over the FOV."""
    lo, hi = sensor.vertical_fov
    elev = np.radians(np.linspace(lo, hi, sensor.beams)) if sensor.beams > 1 else np.radians([0.5 * (lo + hi)])
    azim = 2 * np.pi * np.arange(sensor.azimuth_steps) / sensor.azimuth_steps
    ce, se = np.cos(elev)[:, None], np.sin(elev)[:, None]
    return np.stack(
        [ce * np.cos(azim)[None, :], ce * np.sin(azim)[None, :], np.broadcast_to(se, (len(elev), len(azim)))],
        axis=-1,
    )


def simulate_scan(scene: SceneSpec, sensor: SensorConfig, seed: int) -> Frame:
    """Ray-cast one lidar sweep (and render the attached cameras) through an analytic scene."""
    if not scene.primitives:
        raise ValueError("empty scene")
    rng = np.random.default_rng(seed)
    origin = np.array([0.0, 0.0, sensor.mount_height])
    dirs = beam_directions(sensor).reshape(-1, 3)
    t, prim = cast_rays(scene, origin, dirs)
    keep = np.isfinite(t) & (t <= sensor.max_range)
    if sensor.dropout_rate > 0:
        keep &= rng.random(len(t)) >= sensor.dropout_rate
    t, prim, dirs = t[keep], prim[keep], dirs[keep]
    xyz = dirs * t[:, None]
    labels = np.array([scene.primitives[i].class_id for i in prim], dtype=np.int64)
    base = np.array([CLASS_INTENSITY.get(int(c), 0.4) for c in labels])
    intensity = np.clip(
        sensor.intensity_gain * base + sensor.intensity_offset + rng.normal(0.0, 0.05, len(labels)), 0.0, 1.0
    )
    cloud = PointCloud(xyz, intensity, labels)
    views = [render_camera(scene, spec.camera_model(), sensor.mount_height, seed) for spec in sensor.cameras]
    return Frame(cloud, views)


def instance_tint(seed: int, instance: int) -> np.ndarray:
    rng = np.random.default_rng([seed, instance, 7])
    return rng.integers(-TINT_AMPLITUDE, TINT_AMPLITUDE + 1, size=3)


def render_camera(scene: SceneSpec, cam: CameraModel, mount_height: float, seed: int) -> CameraView:
    """Flat-shaded label rendering: class colour plus a per-instance tint; sky is black."""
    jj, ii = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    kinv = np.linalg.inv(cam.intrinsics)
    pix = np.stack([jj, ii, np.ones_like(jj)], axis=-1) @ kinv.T
    dirs = pix @ cam.rotation  # rows: R^T d_cam
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = cam.center + np.array([0.0, 0.0, mount_height])
    t, prim = cast_rays(scene, origin, dirs)
    image = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    image[:] = SKY_COLOR
    for i, p in enumerate(scene.primitives):
        mask = prim == i
        if not mask.any():
            continue
        color = np.asarray(CLASS_COLORS.get(int(p.class_id), CLASS_COLORS[IGNORE_ID])) + instance_tint(seed, i)
        image[mask] = np.clip(color, 1, 255).astype(np.uint8)
    return CameraView(cam, image)


# ---------------------------------------------------------------------------
# Projection


def project_points(cloud: PointCloud, cam: CameraModel, camera_id: int = 0) -> Correspondences:
    """Pinhole projection of lidar points; keeps points in front of the camera landing inside the image."""
    xyz = cloud.xyz
    pc = xyz @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.intrinsics[0, 0] * pc[:, 0] / z + cam.intrinsics[0, 2]
        v = cam.intrinsics[1, 1] * pc[:, 1] / z + cam.intrinsics[1, 2]
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.nonzero(inside)[0]
    return Correspondences(idx, np.stack([u[idx], v[idx]], axis=1).reshape(-1, 2), camera_id)


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    flip: str  # "none", "x" or "y"
    scale: float


def sample_augmentation(policy: AugmentPolicy, seed) -> AugmentParams:
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(0, 2 * np.pi)) if policy.rotate_z else 0.0
    flip = ("none", "x", "y")[int(rng.integers(3))] if policy.flip_xy else "none"
    lo, hi = policy.scale_range
    scale = float(rng.uniform(lo, hi)) if lo != hi else float(lo)
    return AugmentParams(angle, flip, scale)


def apply_augmentation(cloud: PointCloud, params: AugmentParams) -> PointCloud:
    xyz = cloud.xyz
    if params.angle != 0.0:
        c, s = math.cos(params.angle), math.sin(params.angle)
        xyz = xyz @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    if params.flip != "none":
        xyz = xyz.copy()
        xyz[:, 0 if params.flip == "x" else 1] *= -1
    if params.scale != 1.0:
        xyz = xyz * params.scale
    return PointCloud(xyz, cloud.intensity, cloud.labels)


def augment(cloud: PointCloud, policy: AugmentPolicy, seed) -> PointCloud:
    """Random z-rotation, optional x/y flip and isotropic scaling; a pure function of ``seed``."""
    if len(cloud) == 0:
        raise ValueError("cannot augment an empty cloud")
    return apply_augmentation(cloud, sample_augmentation(policy, seed))


def rigid_transform(xyz: np.ndarray, transform: np.ndarray) -> np.ndarray:
    return xyz @ transform[:3, :3].T + transform[:3, 3]


def concat_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    has_i = all(c.intensity is not None for c in clouds)
    has_l = all(c.labels is not None for c in clouds)
    return PointCloud(
        np.concatenate([c.xyz for c in clouds]),
        np.concatenate([c.intensity for c in clouds]) if has_i else None,
        np.concatenate([c.labels for c in clouds]) if has_l else None,
    )
