"""Segmentation losses and the source-supervised training recipes."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ArchConfig, Backbone, Head, init_head, init_params
from .distill import Teacher, _frame_seed, _MatchCache, distillation_loss
from .evaluate import evaluate_model, miou
from .geometry import IGNORE_ID, AugmentPolicy, augment
from .schedule import WarmupCosine, lr_at, make_adamw, set_lr

__all__ = ["RECIPES", "ConfigError", "TrainConfig", "cross_entropy", "lovasz_softmax", "segmentation_loss",
           "lr_at", "param_groups", "train", "train_joint", "joint_step_losses", "FeatureBank", "write_log"]

log = logging.getLogger(__name__)

RECIPES = ("from_scratch", "frozen_linear", "frozen_mlp", "full_finetune", "joint_distill_classify")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    recipe: str = "frozen_mlp"
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    warmup_epochs: float = 1.0
    weight_decay: float = 0.03
    layerwise_decay: float = 0.99
    distill_weight: float = 1.0  # joint recipe: distill_weight * distill + classification
    num_classes: int = 10
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        if min(self.epochs, self.batch_size, self.num_classes) <= 0 or self.lr <= 0:
            raise ConfigError("epochs, batch_size, num_classes and lr must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.distill_weight < 0:
            raise ConfigError("weight_decay, warmup_epochs and distill_weight must be >= 0")
        if not 0 < self.layerwise_decay <= 1:
            raise ConfigError("layerwise_decay must lie in (0, 1]")

    @classmethod
    def scratch(cls, **kw) -> "TrainConfig":
        """Supervised training of a randomly initialised backbone."""
        base = dict(recipe="from_scratch", epochs=45, warmup_epochs=4.0, weight_decay=0.003)
        return cls(**{**base, **kw})

    @property
    def frozen(self) -> bool:
        return self.recipe in ("frozen_linear", "frozen_mlp")

    @property
    def head_kind(self) -> str:
        return "mlp2" if self.recipe == "frozen_mlp" else "linear_bn"


# ---------------------------------------------------------------------------
# Losses


def cross_entropy(logits: torch.Tensor, labels, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long) if not torch.is_tensor(labels) else labels.long()
    keep = labels != ignore_id
    if not bool(keep.any()):
        return logits.sum() * 0.0
    logp = F.log_softmax(logits[keep], dim=1)
    return -logp.gather(1, labels[keep][:, None]).mean()


def _jaccard_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    total = fg_sorted.sum()
    inter = total - fg_sorted.cumsum(0)
    union = total + (1.0 - fg_sorted).cumsum(0)
    jac = 1.0 - inter / union
    return torch.cat([jac[:1], jac[1:] - jac[:-1]])


def lovasz_softmax(probs: torch.Tensor, labels, ignore_id: int = IGNORE_ID, tol: float = 1e-5) -> torch.Tensor:
    """Lovász extension of the Jaccard loss, averaged over classes present in ``labels``."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long) if not torch.is_tensor(labels) else labels.long()
    if probs.numel() and (probs.detach().sum(1) - 1).abs().max().item() > tol:
        raise ValueError("probs not normalized")
    keep = labels != ignore_id
    if not bool(keep.any()):
        return probs.sum() * 0.0
    probs, labels = probs[keep], labels[keep]
    losses = []
    for c in torch.unique(labels).tolist():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        errs, perm = torch.sort(errors, descending=True)
        losses.append(torch.dot(errs, _jaccard_grad(fg[perm])))
    return torch.stack(losses).mean()


def segmentation_loss(logits: torch.Tensor, labels, ignore_id: int = IGNORE_ID) -> tuple:
    ce = cross_entropy(logits, labels, ignore_id)
    lv = lovasz_softmax(F.softmax(logits, dim=1), labels, ignore_id)
    return ce + lv, ce, lv


# ---------------------------------------------------------------------------
# Optimisation


def param_groups(backbone: Backbone, head: Head, cfg: TrainConfig, extra_heads=()) -> list[dict]:
    """AdamW groups for a recipe.

    full_finetune: depth 0 is the head, depth 1 the top mixing layer with the
    output norm, down to the embedding; lr scale ``layerwise_decay ** depth``
    and no weight decay on pretrained weights.
    """
    heads = [head, *extra_heads]
    groups = [{"params": [p for h in heads for p in h.parameters()], "weight_decay": cfg.weight_decay,
               "lr_scale": 1.0, "name": "head"}]
    if cfg.frozen:
        return groups
    if cfg.recipe == "full_finetune":
        depth = len(backbone.layers)
        ladder = [("norm_out+layers.%d" % (depth - 1), [backbone.norm_out, backbone.layers[depth - 1]])]
        ladder += [(f"layers.{i}", [backbone.layers[i]]) for i in range(depth - 2, -1, -1)]
        ladder += [("embed", [backbone.embed])]
        for d, (name, mods) in enumerate(ladder, start=1):
            groups.append({"params": [p for m in mods for p in m.parameters()], "weight_decay": 0.0,
                           "lr_scale": cfg.layerwise_decay ** d, "name": name})
        return groups
    groups.append({"params": list(backbone.parameters()), "weight_decay": cfg.weight_decay,
                   "lr_scale": 1.0, "name": "backbone"})
    return groups


class FeatureBank:
    """Backbone features of a frozen network, cached per frame when inputs are not augmented."""

    def __init__(self, backbone: Backbone, dataset, policy: AugmentPolicy):
        self.backbone = backbone
        self.dataset = dataset
        self.policy = policy
        self.store: dict = {}

    @torch.no_grad()
    def __call__(self, i: int, aug_seed=None) -> torch.Tensor:
        if self.policy.is_identity or aug_seed is None:
            if i not in self.store:
                self.backbone.eval()
                self.store[i] = self.backbone([self.dataset[i].cloud])
            return self.store[i]
        self.backbone.eval()
        return self.backbone([augment(self.dataset[i].cloud, self.policy, aug_seed)])


def _source_labels(frame):
    if frame.cloud.labels is None:
        raise ConfigError(f"frame {frame.name!r} has no labels; the source dataset must be labelled")
    return frame.cloud.labels


def write_log(path, records) -> None:
    """Line-delimited JSON, one record per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _val_record(backbone, head, val, bank, epoch, stage) -> dict:
    cm = evaluate_model(backbone, head, val, features=bank)
    return {"stage": stage, "epoch": epoch, "split": "source_val", "miou": miou(cm)}


def train(backbone, dataset, cfg: TrainConfig, seed: int, val=None):
    """Train a segmentation head (and, depending on the recipe, the backbone) on labelled frames.

    ``backbone`` is an ArchConfig or Backbone for ``from_scratch`` (fresh weights
    either way) and a pretrained Backbone otherwise. Inputs are not modified.
    Returns (backbone, head, log).
    """
    if cfg.recipe == "joint_distill_classify":
        raise ConfigError("the joint recipe needs a teacher; use train_joint")
    if cfg.recipe == "from_scratch":
        arch = backbone.cfg if isinstance(backbone, Backbone) else backbone
        if not isinstance(arch, ArchConfig):
            raise ConfigError("from_scratch needs an ArchConfig or Backbone")
        net = init_params(arch, seed)
    else:
        if not isinstance(backbone, Backbone) or not backbone.pretrained:
            raise ConfigError(f"recipe {cfg.recipe} requires a pretrained backbone")
        net = copy.deepcopy(backbone)
    n = len(dataset)
    if n == 0:
        raise ConfigError("empty training dataset")
    for i in range(n):
        _source_labels(dataset[i])
    head = init_head(cfg.head_kind, net.cfg.width, cfg.num_classes, _frame_seed(seed, 11))
    if cfg.frozen:
        net.freeze()
        net.eval()
    else:
        net.unfreeze()
    opt = make_adamw(param_groups(net, head, cfg))
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    sched = WarmupCosine(cfg.lr, int(cfg.warmup_epochs * steps_per_epoch), total)
    bank = FeatureBank(net, dataset, cfg.augment) if cfg.frozen else None
    val_bank = FeatureBank(net, val, AugmentPolicy.off()) if (cfg.frozen and val is not None) else None
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 12, epoch]).permutation(n)
        sums = np.zeros(3)
        for b in range(0, n, cfg.batch_size):
            idx = [int(j) for j in order[b:b + cfg.batch_size]]
            seeds = [_frame_seed(seed, 13, epoch, j) for j in idx]
            labels = np.concatenate([dataset[j].cloud.labels for j in idx])
            head.train()
            if cfg.frozen:
                feats = torch.cat([bank(j, s) for j, s in zip(idx, seeds)])
            else:
                net.train()
                feats = net([augment(dataset[j].cloud, cfg.augment, s) for j, s in zip(idx, seeds)])
            loss, ce, lv = segmentation_loss(head(feats), labels)
            set_lr(opt, sched(step))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            sums += [loss.item(), ce.item(), lv.item()]
        nb = steps_per_epoch
        rec = {"stage": "train", "recipe": cfg.recipe, "epoch": epoch, "split": "source_train",
               "loss": sums[0] / nb, "ce": sums[1] / nb, "lovasz": sums[2] / nb}
        if val is not None:
            rec["miou"] = _val_record(net, head, val, val_bank, epoch, "train")["miou"]
        history.append(rec)
        log.info("train[%s] epoch %d loss %.4f miou %s", cfg.recipe, epoch, rec["loss"], rec.get("miou"))
    net.eval()
    head.eval()
    return net, head, history


def joint_step_losses(net: Backbone, dist_head: Head, cls_head: Head, clouds, matches) -> tuple:
    """(distillation loss over all clouds, CE + Lovász over the labelled clouds only)."""
    feats = net(clouds)
    parts = feats.split([len(c) for c in clouds])
    pf = torch.cat([p[torch.as_tensor(m[0])] for p, m in zip(parts, matches)])
    d_loss = distillation_loss(dist_head(pf), torch.cat([m[1] for m in matches]).to(pf.dtype))
    lab_parts = [(p, c.labels) for p, c in zip(parts, clouds) if c.labels is not None]
    if not lab_parts:
        return d_loss, feats.sum() * 0.0
    c_loss = segmentation_loss(cls_head(torch.cat([p for p, _ in lab_parts])),
                               np.concatenate([l for _, l in lab_parts]))[0]
    return d_loss, c_loss


def train_joint(merged, teacher: Teacher, arch: ArchConfig, cfg: TrainConfig, seed: int, val=None):
    """Distillation on every cloud plus classification on labelled clouds, all weights trained together.

    Frames without labels contribute only to the distillation term. Returns
    (backbone, {"distill": head, "classify": head}, log).
    """
    cfg = replace(cfg, recipe="joint_distill_classify")
    n = len(merged)
    if n == 0:
        raise ConfigError("empty training dataset")
    if not any(merged[i].cloud.labels is not None for i in range(n)):
        raise ConfigError("joint training needs at least one labelled frame")
    net = init_params(arch, seed)
    cls_head = init_head("linear_bn", arch.width, cfg.num_classes, _frame_seed(seed, 11))
    dist_head = init_head("distill_proj", arch.width, teacher.feature_dim, _frame_seed(seed, 1))
    opt = make_adamw(param_groups(net, cls_head, cfg, extra_heads=[dist_head]))
    steps_per_epoch = -(-n // cfg.batch_size)
    sched = WarmupCosine(cfg.lr, int(cfg.warmup_epochs * steps_per_epoch), cfg.epochs * steps_per_epoch)
    matches = _MatchCache(merged, teacher)
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 12, epoch]).permutation(n)
        sums = np.zeros(3)
        for b in range(0, n, cfg.batch_size):
            idx = [int(j) for j in order[b:b + cfg.batch_size]]
            net.train()
            cls_head.train()
            clouds = [augment(merged[j].cloud, cfg.augment, _frame_seed(seed, 13, epoch, j)) for j in idx]
            d_loss, c_loss = joint_step_losses(net, dist_head, cls_head, clouds, [matches(j) for j in idx])
            loss = cfg.distill_weight * d_loss + c_loss
            set_lr(opt, sched(step))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            sums += [loss.item(), d_loss.item(), c_loss.item()]
        nb = steps_per_epoch
        rec = {"stage": "joint", "epoch": epoch, "split": "train", "loss": sums[0] / nb,
               "distill": sums[1] / nb, "classify": sums[2] / nb}
        if val is not None:
            rec["miou"] = _val_record(net, cls_head, val, None, epoch, "joint")["miou"]
        history.append(rec)
    net.eval()
    net.pretrained = True
    return net, {"distill": dist_head.eval(), "classify": cls_head.eval()}, history
