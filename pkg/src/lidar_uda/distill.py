"""Image-to-lidar feature distillation: teachers, point/pixel matching, pretraining."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .backbone import ArchConfig, Backbone, Head, init_head, init_params
from .geometry import CLASS_COLORS, IGNORE_ID, AugmentPolicy, PointCloud, augment, project_points
from .schedule import WarmupCosine, make_adamw, set_lr

log = logging.getLogger(__name__)


@dataclass
class TeacherOutput:
    """Feature map plus the pixel size of one map cell in the original image.

    Node (r, c) sits at image coordinates ((c + 0.5) * scale[0], (r + 0.5) * scale[1]).
    """

    features: np.ndarray  # H' x W' x D float32
    scale: tuple


class Teacher(Protocol):
    feature_dim: int

    def features(self, image: np.ndarray) -> TeacherOutput: ...


def _image_key(image: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(image).tobytes()).hexdigest()


class MockTeacher:
    """Deterministic stand-in for a vision foundation model.

    Reads the flat label colours of rendered images. ``mode="semantic"`` emits
    one palette vector per class; ``mode="instance"`` emits a random vector
    per object instance (identified by its exact tinted colour), blended with
    the class vector by ``semantic_weight``. Gaussian noise seeded by the image
    content is added before unit normalisation. The image is resized to
    ``image_size`` (nearest) and sampled every ``stride`` pixels.
    """

    def __init__(self, mode: str = "semantic", feature_dim: int = 32, noise_sigma: float = 0.1,
                 stride: int = 4, image_size: tuple = (224, 448), seed: int = 0,
                 semantic_weight: float = 0.25):
        if mode not in ("semantic", "instance"):
            raise ValueError("mode must be 'semantic' or 'instance'")
        self.mode = mode
        self.feature_dim = feature_dim
        self.noise_sigma = noise_sigma
        self.stride = stride
        self.image_size = tuple(image_size)
        self.seed = seed
        self.semantic_weight = semantic_weight
        self.class_ids = list(range(10)) + [IGNORE_ID, -1]  # -1: sky
        colors = [CLASS_COLORS[c] for c in self.class_ids[:-1]] + [(0, 0, 0)]
        self._colors = np.array(colors, dtype=np.float64)
        n = len(self.class_ids)
        if feature_dim < n:
            raise ValueError(f"feature_dim must be >= {n}")
        rng = np.random.default_rng([seed, 3])
        q, _ = np.linalg.qr(rng.normal(size=(feature_dim, n)))
        self.palette = q.T.astype(np.float64)  # orthonormal rows
        self._instance_cache: dict = {}

    def decode(self, image: np.ndarray) -> np.ndarray:
        """Palette index of each pixel's nearest class colour."""
        px = image.reshape(-1, 3).astype(np.float64)
        d = ((px[:, None, :] - self._colors[None]) ** 2).sum(-1)
        return d.argmin(1).reshape(image.shape[:2])

    def _instance_vec(self, rgb) -> np.ndarray:
        key = tuple(int(v) for v in rgb)
        if key not in self._instance_cache:
            v = np.random.default_rng([self.seed, 5, *key]).normal(size=self.feature_dim)
            self._instance_cache[key] = v / np.linalg.norm(v)
        return self._instance_cache[key]

    def features(self, image: np.ndarray) -> TeacherOutput:
        h, w = image.shape[:2]
        rh, rw = self.image_size
        hp, wp = rh // self.stride, rw // self.stride
        sx, sy = w / wp, h / hp
        cols = np.minimum(((np.arange(wp) + 0.5) * sx).astype(np.int64), w - 1)
        rows = np.minimum(((np.arange(hp) + 0.5) * sy).astype(np.int64), h - 1)
        sampled = image[rows][:, cols]
        cls = self.decode(sampled)
        feats = self.palette[cls]
        if self.mode == "instance":
            flat = sampled.reshape(-1, 3)
            uniq, inv = np.unique(flat, axis=0, return_inverse=True)
            inst = np.stack([self._instance_vec(u) for u in uniq])[inv.reshape(-1)].reshape(hp, wp, -1)
            a = self.semantic_weight
            feats = a * feats + (1 - a) * inst
        rng = np.random.default_rng([self.seed, int(_image_key(image)[:12], 16)])
        feats = feats + rng.normal(0.0, self.noise_sigma, feats.shape)
        feats /= np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-8)
        return TeacherOutput(feats.astype(np.float32), (sx, sy))


FEATURE_MAGIC = b"LUDAFEAT"


def write_feature_file(path, features: np.ndarray, scale: tuple) -> None:
    """``magic[8] H:u32 W:u32 D:u32 sx:f64 sy:f64`` then H*W*D float32 LE, row-major."""
    f = np.ascontiguousarray(features, dtype="<f4")
    h, w, d = f.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<IIIdd", h, w, d, *scale) + f.tobytes())


def read_feature_file(path) -> TeacherOutput:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    h, w, d, sx, sy = struct.unpack_from("<IIIdd", data, 8)
    arr = np.frombuffer(data, dtype="<f4", offset=36)
    if arr.size != h * w * d:
        raise ValueError(f"{path}: expected {h * w * d} values, found {arr.size}")
    return TeacherOutput(arr.reshape(h, w, d), (sx, sy))


class PrecomputedTeacher:
    """Reads feature maps exported by an external model, one file per image.

    Files live in ``directory`` and are named ``<sha1 of the image bytes>.feat``.
    """

    def __init__(self, directory, feature_dim: int | None = None):
        self.directory = Path(directory)
        files = sorted(self.directory.glob("*.feat"))
        if feature_dim is None:
            if not files:
                raise FileNotFoundError(f"no feature files in {self.directory}")
            feature_dim = read_feature_file(files[0]).features.shape[-1]
        self.feature_dim = feature_dim

    def path_for(self, image: np.ndarray) -> Path:
        return self.directory / f"{_image_key(image)}.feat"

    def features(self, image: np.ndarray) -> TeacherOutput:
        path = self.path_for(image)
        if not path.exists():
            raise FileNotFoundError(f"no precomputed features for image ({path})")
        out = read_feature_file(path)
        if out.features.shape[-1] != self.feature_dim:
            raise ValueError(f"{path}: feature dim {out.features.shape[-1]} != {self.feature_dim}")
        return out


def export_teacher_features(teacher: Teacher, frames, directory) -> int:
    """Write ``teacher`` features for every camera image of ``frames`` in the precomputed format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = 0
    for frame in frames:
        for view in frame.views:
            out = teacher.features(view.image)
            write_feature_file(directory / f"{_image_key(view.image)}.feat", out.features, out.scale)
            n += 1
    return n


def bilinear_sample(out: TeacherOutput, uv: np.ndarray) -> np.ndarray:
    fmap = out.features
    hp, wp = fmap.shape[:2]
    fx = np.clip(uv[:, 0] / out.scale[0] - 0.5, 0, wp - 1)
    fy = np.clip(uv[:, 1] / out.scale[1] - 0.5, 0, hp - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, wp - 1)
    y1 = np.minimum(y0 + 1, hp - 1)
    ax = (fx - x0)[:, None]
    ay = (fy - y0)[:, None]
    f = fmap.astype(np.float64)
    return ((1 - ay) * ((1 - ax) * f[y0, x0] + ax * f[y0, x1])
            + ay * ((1 - ax) * f[y1, x0] + ax * f[y1, x1]))


def match_features(cloud: PointCloud, views: Sequence, teacher: Teacher, cache: dict | None = None):
    """Teacher feature for every point seen by some camera; the lowest camera id wins.

    Returns (point indices, M x D feature rows), indices sorted by camera then point.
    """
    taken = np.zeros(len(cloud), dtype=bool)
    idx_parts, feat_parts = [], []
    for cam_id, view in enumerate(views):
        corr = project_points(cloud, view.camera, cam_id)
        fresh = ~taken[corr.point_idx]
        if not fresh.any():
            continue
        key = _image_key(view.image) if cache is not None else None
        if cache is not None and key in cache:
            out = cache[key]
        else:
            out = teacher.features(view.image)
            if cache is not None:
                cache[key] = out
        idx = corr.point_idx[fresh]
        taken[idx] = True
        idx_parts.append(idx)
        feat_parts.append(bilinear_sample(out, corr.pixel_uv[fresh]))
    if not idx_parts:
        return np.zeros(0, dtype=np.int64), np.zeros((0, teacher.feature_dim))
    return np.concatenate(idx_parts), np.concatenate(feat_parts)


def distillation_loss(point_feats: torch.Tensor, pixel_feats: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Mean squared distance between unit-normalised point and pixel features (range [0, 4])."""
    if point_feats.shape[0] == 0:
        log.warning("no point-pixel correspondences in batch; distillation loss is 0")
        return point_feats.sum() * 0.0
    p = point_feats / point_feats.norm(dim=1, keepdim=True).clamp_min(eps)
    q = pixel_feats / pixel_feats.norm(dim=1, keepdim=True).clamp_min(eps)
    return ((p - q) ** 2).sum(dim=1).mean()


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 10
    batch_size: int = 2
    lr: float = 5e-4
    weight_decay: float = 0.03
    warmup_epochs: float = 1.0
    image_size: tuple = (224, 448)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if min(self.epochs, self.batch_size) <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("distillation settings must be positive")


def _frame_seed(seed, *keys) -> int:
    return int(np.random.default_rng([seed, *keys]).integers(2**31))


class _MatchCache:
    """Per-frame correspondences; the teacher is frozen so they never change."""

    def __init__(self, dataset, teacher):
        self.dataset = dataset
        self.teacher = teacher
        self.store: dict = {}
        self.images: dict = {}

    def __call__(self, j):
        if j not in self.store:
            frame = self.dataset[j]
            idx, feats = match_features(frame.cloud, frame.views, self.teacher, self.images)
            self.store[j] = (idx, torch.as_tensor(feats, dtype=torch.float32))
        return self.store[j]


def distill_step_loss(backbone: Backbone, head: Head, clouds, matches) -> torch.Tensor:
    feats = backbone(clouds)
    parts = feats.split([len(c) for c in clouds])
    pf = torch.cat([p[torch.as_tensor(m[0])] for p, m in zip(parts, matches)])
    qf = torch.cat([m[1] for m in matches]).to(pf.dtype)
    return distillation_loss(head(pf), qf)


def pretrain(merged, teacher: Teacher, arch: ArchConfig, cfg: DistillConfig, seed: int,
             init: Backbone | None = None):
    """Distil ``teacher`` into a fresh backbone over all frames of ``merged``.

    Returns (backbone, distill head, log) where log holds one record per epoch.
    """
    n = len(merged)
    if n == 0:
        raise ValueError("empty pretraining dataset")
    backbone = init if init is not None else init_params(arch, seed)
    head = init_head("distill_proj", arch.width, teacher.feature_dim, _frame_seed(seed, 1))
    opt = make_adamw([
        {"params": backbone.parameters(), "weight_decay": cfg.weight_decay, "name": "backbone"},
        {"params": head.parameters(), "weight_decay": cfg.weight_decay, "name": "head"},
    ])
    steps_per_epoch = -(-n // cfg.batch_size)
    sched = WarmupCosine(cfg.lr, int(cfg.warmup_epochs * steps_per_epoch), cfg.epochs * steps_per_epoch)
    matches = _MatchCache(merged, teacher)
    history = []
    step = 0
    backbone.train()
    head.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 2, epoch]).permutation(n)
        losses, matched = [], 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            ms = [matches(int(j)) for j in idx]
            clouds = [augment(merged[int(j)].cloud, cfg.augment, _frame_seed(seed, 3, epoch, int(j))) for j in idx]
            set_lr(opt, sched(step))
            loss = distill_step_loss(backbone, head, clouds, ms)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            count = sum(len(m[0]) for m in ms)
            matched += count
            if count:
                losses.append(loss.item())
        if matched == 0:
            raise RuntimeError("no correspondences in dataset")
        history.append({"stage": "distill", "epoch": epoch, "loss": float(np.mean(losses)),
                        "matched_points": matched, "lr": sched(step)})
        log.info("distill epoch %d loss %.4f", epoch, history[-1]["loss"])
    backbone.eval()
    backbone.pretrained = True
    return backbone, head, history


@torch.no_grad()
def nearest_palette_accuracy(backbone: Backbone, head: Head, teacher: MockTeacher, frames) -> float:
    """Share of labelled points whose projected feature is closest to their own class's palette row."""
    backbone.eval()
    pal = torch.as_tensor(teacher.palette[:10], dtype=torch.float32)
    hits = total = 0
    for frame in frames:
        labels = frame.cloud.labels
        keep = labels != IGNORE_ID
        if not keep.any():
            continue
        f = head(backbone([frame.cloud]))
        f = f / f.norm(dim=1, keepdim=True).clamp_min(1e-8)
        pred = (f @ pal.T).argmax(1).numpy()
        hits += int((pred[keep] == labels[keep]).sum())
        total += int(keep.sum())
    return hits / max(total, 1)
