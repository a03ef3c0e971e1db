"""Point-mixing segmentation backbone, classification / projection heads, checkpoints.

The backbone embeds per-point inputs (height above ground, height above the
lowest point of its bird's-eye-view column, column height span, offset from
the column centroid, range, column density and optionally intensity), then
stacks ``depth`` mixing layers. Each layer does token mixing on a sparse
voxel grid (scatter-mean of point features into occupied voxels, a depthwise
3x3x3 convolution over occupied voxels, gather back to points) followed by a
channel-mixing MLP; both branches are pre-normalised and residual. A final
norm produces the point features.

Learnable parameter count for ``F`` input features and width ``C``::

    F*C + C                       embedding
    depth * (2*C**2 + 34*C)       per layer: 2 norms (4C), depthwise conv (27C + C),
                                  two C x C linears with bias (2C**2 + 2C)
    2*C                           output norm

Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm
affines start at scale 1, shift 0.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import PointCloud

BN_MOMENTUM = 0.9  # running <- 0.9 * running + 0.1 * batch
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchConfig:
    width: int = 64
    depth: int = 4
    norm: str = "layer"
    use_intensity: bool = False
    grid_res: float = 1.0
    voxel_height: float = 0.5
    feature_dim_out: int = 32

    def __post_init__(self):
        if self.width < 8:
            raise ValueError("width must be >= 8")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.grid_res <= 0 or self.voxel_height <= 0:
            raise ValueError("grid_res and voxel_height must be positive")
        if self.norm not in ("batch", "layer"):
            raise ValueError("norm must be 'batch' or 'layer'")

    @property
    def in_features(self) -> int:
        return len(INPUT_FEATURES) + int(self.use_intensity)

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: ArchConfig) -> int:
    c = cfg.width
    return cfg.in_features * c + c + cfg.depth * (2 * c * c + 34 * c) + 2 * c


# ---------------------------------------------------------------------------
# Input preparation


@dataclass
class PointBatch:
    """Concatenated clouds plus the sparse BEV grid topology shared by all layers."""

    features: torch.Tensor  # (N, F)
    point_cell: torch.Tensor  # (N,) cell index per point
    neighbors: torch.Tensor  # (M, 27) cell indices, -1 where the neighbour is empty
    cell_count: torch.Tensor  # (M,) points per cell
    sizes: list
    edges: tuple = None  # (dst, src, kernel slot) over occupied neighbour pairs, derived from neighbors

    def __post_init__(self):
        if self.edges is None:
            dst, slot = torch.nonzero(self.neighbors >= 0, as_tuple=True)
            self.edges = (dst, self.neighbors[dst, slot], slot)

    @property
    def num_cells(self) -> int:
        return len(self.neighbors)

    def split(self, x: torch.Tensor) -> list:
        return list(torch.split(x, self.sizes))


INPUT_FEATURES = ("height", "cell_height", "cell_span", "dx", "dy", "range", "density")

_OFFSETS = [(di, dj, dk) for di in (-1, 0, 1) for dj in (-1, 0, 1) for dk in (-1, 0, 1)]
KERNEL = len(_OFFSETS)


def _cells(keys: np.ndarray):
    cells, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    return cells, inverse.reshape(-1), counts


def _cloud_inputs(cloud: PointCloud, cfg: ArchConfig):
    xyz = cloud.xyz
    n = len(xyz)
    z = xyz[:, 2]
    # BEV columns: local ground height and vertical extent
    ij = np.floor(xyz[:, :2] / cfg.grid_res).astype(np.int64)
    ij -= ij.min(axis=0)
    span_j = int(ij[:, 1].max()) + 3
    cols, point_col, col_counts = _cells(ij[:, 0] * span_j + ij[:, 1])
    zmin = np.full(len(cols), np.inf)
    zmax = np.full(len(cols), -np.inf)
    np.minimum.at(zmin, point_col, z)
    np.maximum.at(zmax, point_col, z)
    centroid = np.zeros((len(cols), 2))
    np.add.at(centroid, point_col, xyz[:, :2])
    centroid /= col_counts[:, None]
    dxy = (xyz[:, :2] - centroid[point_col]) / cfg.grid_res
    # 3D voxels for token mixing
    k = np.floor(z / cfg.voxel_height).astype(np.int64)
    k -= k.min()
    span_k = int(k.max()) + 3
    vi, vj, vk = ij[:, 0] + 1, ij[:, 1] + 1, k + 1
    key = (vi * span_j + vj) * span_k + vk
    cells, point_cell, counts = _cells(key)
    ci, rest = np.divmod(cells, span_j * span_k)
    cj, ck = np.divmod(rest, span_k)
    nbr = np.full((len(cells), len(_OFFSETS)), -1, dtype=np.int64)
    for o, (di, dj, dk) in enumerate(_OFFSETS):
        q = ((ci + di) * span_j + (cj + dj)) * span_k + (ck + dk)
        pos = np.minimum(np.searchsorted(cells, q), len(cells) - 1)
        hit = cells[pos] == q
        nbr[hit, o] = pos[hit]
    ground = np.percentile(z, 2)
    feats = [
        (z - ground) / 2.0,
        z - zmin[point_col],
        (zmax - zmin)[point_col],
        dxy[:, 0],
        dxy[:, 1],
        np.linalg.norm(xyz, axis=1) / 20.0,
        np.log1p(col_counts[point_col]) / 2.0,
    ]
    if cfg.use_intensity:
        if cloud.intensity is None:
            raise ValueError("intensity required")
        feats.append(cloud.intensity)
    return np.stack(feats, axis=1), point_cell, nbr, counts


def prepare_batch(clouds: Sequence[PointCloud] | PointCloud, cfg: ArchConfig, dtype=torch.float32) -> PointBatch:
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    feats, pcs, nbrs, counts, sizes = [], [], [], [], []
    offset = 0
    for cloud in clouds:
        if len(cloud) == 0:
            raise ValueError("empty point cloud")
        f, pc, nb, cnt = _cloud_inputs(cloud, cfg)
        feats.append(f)
        pcs.append(pc + offset)
        nbrs.append(np.where(nb >= 0, nb + offset, -1))
        counts.append(cnt)
        sizes.append(len(cloud))
        offset += len(cnt)
    return PointBatch(
        torch.as_tensor(np.concatenate(feats), dtype=dtype),
        torch.as_tensor(np.concatenate(pcs)),
        torch.as_tensor(np.concatenate(nbrs)),
        torch.as_tensor(np.concatenate(counts), dtype=dtype),
        sizes,
    )


# ---------------------------------------------------------------------------
# Modules


def make_norm(kind: str, width: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm1d(width, eps=NORM_EPS, momentum=1.0 - BN_MOMENTUM)
    return nn.LayerNorm(width, eps=NORM_EPS)


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound).to(t.dtype))


class MixingLayer(nn.Module):
    def __init__(self, width: int, norm: str):
        super().__init__()
        self.norm_token = make_norm(norm, width)
        self.conv_weight = nn.Parameter(torch.empty(KERNEL, width))
        self.conv_bias = nn.Parameter(torch.empty(width))
        self.norm_channel = make_norm(norm, width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def token_mix(self, h: torch.Tensor, batch: PointBatch) -> torch.Tensor:
        m = batch.num_cells
        cells = h.new_zeros(m, h.shape[1]).index_add_(0, batch.point_cell, h)
        cells = cells / batch.cell_count.to(h.dtype)[:, None]
        dst, src, slot = batch.edges
        mixed = h.new_zeros(m, h.shape[1]).index_add_(0, dst, cells[src] * self.conv_weight[slot])
        return (mixed + self.conv_bias)[batch.point_cell]

    def forward(self, x: torch.Tensor, batch: PointBatch) -> torch.Tensor:
        x = x + self.token_mix(self.norm_token(x), batch)
        return x + self.fc2(torch.relu(self.fc1(self.norm_channel(x))))


class Backbone(nn.Module):
    """Parameter groups: ``embed``, ``layers.<i>``, ``norm_out``."""

    pretrained = False  # set by distillation; required by the frozen and finetune recipes

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.in_features, cfg.width)
        self.layers = nn.ModuleList(MixingLayer(cfg.width, cfg.norm) for _ in range(cfg.depth))
        self.norm_out = make_norm(cfg.norm, cfg.width)

    def groups(self) -> dict[str, nn.Module]:
        out = {"embed": self.embed}
        out.update({f"layers.{i}": layer for i, layer in enumerate(self.layers)})
        out["norm_out"] = self.norm_out
        return out

    def freeze(self, groups: Sequence[str] | None = None) -> "Backbone":
        for name, mod in self.groups().items():
            if groups is None or name in groups:
                mod.requires_grad_(False)
        return self

    def unfreeze(self) -> "Backbone":
        self.requires_grad_(True)
        return self

    def frozen_flags(self) -> dict[str, bool]:
        return {name: not any(p.requires_grad for p in mod.parameters()) for name, mod in self.groups().items()}

    @property
    def is_frozen(self) -> bool:
        return all(self.frozen_flags().values())

    def batch(self, clouds) -> PointBatch:
        return prepare_batch(clouds, self.cfg, dtype=self.embed.weight.dtype)

    def forward(self, batch: PointBatch | PointCloud | Sequence[PointCloud]) -> torch.Tensor:
        if not isinstance(batch, PointBatch):
            batch = self.batch(batch)
        x = self.embed(batch.features)
        for layer in self.layers:
            x = layer(x, batch)
        return self.norm_out(x)

    def norms(self) -> list[nn.Module]:
        """Normalisation modules in forward order."""
        out = []
        for layer in self.layers:
            out += [layer.norm_token, layer.norm_channel]
        return out + [self.norm_out]


def init_params(cfg: ArchConfig, seed: int) -> Backbone:
    gen = torch.Generator().manual_seed(int(seed))
    net = Backbone(cfg)
    _uniform_(net.embed.weight, cfg.in_features, gen)
    _uniform_(net.embed.bias, cfg.in_features, gen)
    for layer in net.layers:
        _uniform_(layer.conv_weight, KERNEL, gen)
        _uniform_(layer.conv_bias, KERNEL, gen)
        for fc in (layer.fc1, layer.fc2):
            _uniform_(fc.weight, cfg.width, gen)
            _uniform_(fc.bias, cfg.width, gen)
    return net


def forward(params: Backbone, cloud, cfg: ArchConfig | None = None, mode: str = "eval") -> torch.Tensor:
    """Point features, one row per input point, in the requested mode."""
    if cfg is not None and cfg != params.cfg:
        raise ValueError("config does not match parameters")
    params.train(mode == "train")
    return params(cloud)


# ---------------------------------------------------------------------------
# Heads


class Head(nn.Module):
    """Classification or projection head.

    ``linear_bn``: batchnorm then linear; ``mlp2``: linear-ReLU-linear with
    hidden size equal to the input size; ``distill_proj``: single linear;
    ``linear``: plain affine (a folded ``linear_bn``).
    """

    KINDS = ("linear_bn", "mlp2", "distill_proj", "linear")

    def __init__(self, kind: str, in_dim: int, out_dim: int):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.in_dim = in_dim
        self.out_dim = out_dim
        if kind == "linear_bn":
            self.bn = nn.BatchNorm1d(in_dim, eps=NORM_EPS, momentum=1.0 - BN_MOMENTUM)
            self.fc = nn.Linear(in_dim, out_dim)
        elif kind == "mlp2":
            self.fc1 = nn.Linear(in_dim, in_dim)
            self.fc2 = nn.Linear(in_dim, out_dim)
        else:
            self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim} features, got {feats.shape[-1]}")
        if self.kind == "linear_bn":
            return self.fc(self.bn(feats))
        if self.kind == "mlp2":
            return self.fc2(torch.relu(self.fc1(feats)))
        return self.fc(feats)


def init_head(kind: str, in_dim: int, out_dim: int, seed: int) -> Head:
    gen = torch.Generator().manual_seed(int(seed))
    head = Head(kind, in_dim, out_dim)
    for mod in head.modules():
        if isinstance(mod, nn.Linear):
            _uniform_(mod.weight, mod.in_features, gen)
            _uniform_(mod.bias, mod.in_features, gen)
    return head


def head_forward(head: Head, feats: torch.Tensor) -> torch.Tensor:
    return head(feats)


def fold_linear_head(head: Head) -> Head:
    """Merge the batchnorm of a ``linear_bn`` head into its linear layer (eval-mode equivalent)."""
    if head.kind != "linear_bn":
        raise ValueError("only linear_bn heads can be folded")
    bn, fc = head.bn, head.fc
    with torch.no_grad():
        scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
        w = fc.weight * scale[None, :]
        b = fc.bias + fc.weight @ (bn.bias - bn.running_mean * scale)
    out = Head("linear", head.in_dim, head.out_dim).to(fc.weight.dtype)
    with torch.no_grad():
        out.fc.weight.copy_(w)
        out.fc.bias.copy_(b)
    return out


# ---------------------------------------------------------------------------
# Batchnorm recalibration


@torch.no_grad()
def recalibrate_batchnorm(params: Backbone, clouds: Sequence[PointCloud]) -> Backbone:
    """Replace running statistics by exact population statistics on ``clouds``.

    Norm layers are recalibrated in forward order, each from an eval-mode pass
    through the already recalibrated layers below it, so that after the call
    every batchnorm standardises the given data exactly. Weights are untouched.
    """
    if params.cfg.norm != "batch":
        raise ValueError("no batchnorm to recalibrate")
    out = copy.deepcopy(params)
    out.eval()
    clouds = list(clouds)
    batches = [out.batch(c) for c in clouds]
    for norm in out.norms():
        acc = {"s": 0.0, "ss": 0.0, "n": 0}

        def hook(_mod, inputs, _acc=acc):
            x = inputs[0].double()
            _acc["s"] = _acc["s"] + x.sum(0)
            _acc["ss"] = _acc["ss"] + (x * x).sum(0)
            _acc["n"] += x.shape[0]

        handle = norm.register_forward_pre_hook(hook)
        for b in batches:
            out(b)
        handle.remove()
        mean = acc["s"] / acc["n"]
        var = (acc["ss"] / acc["n"] - mean**2).clamp_min(0.0)
        norm.running_mean.copy_(mean.to(norm.running_mean.dtype))
        norm.running_var.copy_(var.to(norm.running_var.dtype))
    return out


# ---------------------------------------------------------------------------
# Hashing and checkpoints


def state_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (names, dtypes and bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


CKPT_MAGIC = b"LUDACKPT"
CKPT_VERSION = 1


def save_checkpoint(path, backbone: Backbone, heads: dict | None = None, meta: dict | None = None) -> None:
    """Binary container::

        magic[8] version:u32 header_len:u32 header(JSON utf-8) count:u32
        then per tensor: name_len:u16 name kind:u8 frozen:u8 ndim:u8 dims:u32*ndim data:f32 LE

    ``kind`` is 0 for parameters and 1 for buffers. The JSON header carries the
    ArchConfig, head kinds / dims and free-form metadata.
    """
    heads = heads or {}
    header = {
        "arch": backbone.cfg.to_dict(),
        "heads": {k: {"kind": h.kind, "in_dim": h.in_dim, "out_dim": h.out_dim} for k, h in heads.items()},
        "meta": meta or {},
        "pretrained": bool(backbone.pretrained),
    }
    entries = []
    for prefix, mod in [("backbone", backbone)] + [(f"head.{k}", h) for k, h in heads.items()]:
        for name, p in mod.named_parameters():
            entries.append((f"{prefix}.{name}", 0, not p.requires_grad, p))
        for name, b in mod.named_buffers():
            entries.append((f"{prefix}.{name}", 1, True, b))
    buf = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(entries)))
    for name, kind, frozen, t in entries:
        nb = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BBB", kind, int(frozen), arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Backbone, dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    backbone = Backbone(ArchConfig(**header["arch"]))
    backbone.pretrained = bool(header.get("pretrained", False))
    heads = {k: Head(v["kind"], v["in_dim"], v["out_dim"]) for k, v in header["heads"].items()}
    targets = {f"backbone.{n}": t for n, t in list(backbone.named_parameters()) + list(backbone.named_buffers())}
    for k, h in heads.items():
        targets.update({f"head.{k}.{n}": t for n, t in list(h.named_parameters()) + list(h.named_buffers())})
    frozen_params = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        kind, frozen, ndim = struct.unpack_from("<BBB", data, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        t = targets[name]
        with torch.no_grad():
            t.copy_(torch.from_numpy(arr.copy()).to(t.dtype))
        if kind == 0 and frozen:
            frozen_params.add(name)
    for name, p in backbone.named_parameters():
        p.requires_grad_(f"backbone.{name}" not in frozen_params)
    for k, h in heads.items():
        for name, p in h.named_parameters():
            p.requires_grad_(f"head.{k}.{name}" not in frozen_params)
    return backbone, heads, header["meta"]
