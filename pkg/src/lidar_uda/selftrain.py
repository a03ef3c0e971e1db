"""Mean-teacher self-training of a segmentation head on a frozen backbone."""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, Head, state_hash
from .distill import _frame_seed
from .downstream import ConfigError, FeatureBank, cross_entropy, segmentation_loss
from .evaluate import evaluate_model, miou
from .geometry import IGNORE_ID, AugmentPolicy
from .schedule import make_adamw, set_lr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelfTrainConfig:
    momentum: float = 0.99
    confidence_threshold: float = 0.9
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.03
    teacher_sees_augmented: bool = False
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        # 1.0 is allowed for both: a frozen teacher and a target branch that never fires
        if not 0 < self.momentum <= 1:
            raise ConfigError("momentum must lie in (0, 1]")
        if not 0 < self.confidence_threshold <= 1:
            raise ConfigError("confidence_threshold must lie in (0, 1]")
        if min(self.epochs, self.batch_size) <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("epochs, batch_size and lr must be positive")


@dataclass
class TeacherStudentPair:
    backbone: Backbone
    student: Head
    teacher: Head

    @classmethod
    def from_head(cls, backbone: Backbone, head: Head) -> "TeacherStudentPair":
        """Student and teacher both start as copies of ``head``; the backbone is frozen in place."""
        backbone.freeze()
        backbone.eval()
        return cls(backbone, copy.deepcopy(head), copy.deepcopy(head))

    def __post_init__(self):
        ts = {k: v.shape for k, v in self.teacher.state_dict().items()}
        ss = {k: v.shape for k, v in self.student.state_dict().items()}
        if ts != ss:
            raise ValueError("teacher and student heads differ in shape")
        if not self.backbone.is_frozen:
            raise ValueError("self-training requires a frozen backbone")


def ema_update(teacher, student, momentum: float):
    """``teacher <- momentum * teacher + (1 - momentum) * student``.

    Works on modules (parameters and floating buffers, in place) and on
    scalars or arrays (returns the new value).
    """
    if isinstance(teacher, torch.nn.Module):
        ts, ss = teacher.state_dict(), student.state_dict()
        if ts.keys() != ss.keys() or any(ts[k].shape != ss[k].shape for k in ts):
            raise ValueError("teacher and student differ in shape")
        with torch.no_grad():
            for k, t in ts.items():
                if t.is_floating_point():
                    t.mul_(momentum).add_(ss[k].to(t.dtype), alpha=1.0 - momentum)
                else:
                    t.copy_(ss[k])
        return teacher
    t, s = np.asarray(teacher, dtype=np.float64), np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError("teacher and student differ in shape")
    out = momentum * t + (1.0 - momentum) * s
    return float(out) if out.ndim == 0 else out


def pseudo_labels(teacher_logits, threshold: float = 0.9, ignore_id: int = IGNORE_ID):
    """argmax where the top softmax probability is strictly above ``threshold``, else ``ignore_id``.

    Returns (labels, confidence) as numpy arrays.
    """
    logits = torch.as_tensor(teacher_logits, dtype=torch.float64)
    conf, cls = F.softmax(logits, dim=1).max(1)
    labels = cls.numpy().astype(np.int64)
    labels[~(conf.numpy() > threshold)] = ignore_id
    return labels, conf.numpy()


def _interleave(a: list, b: list) -> list:
    out = []
    for k in range(max(len(a), len(b))):
        if k < len(a):
            out.append(a[k])
        if k < len(b):
            out.append(b[k])
    return out


def self_train(pair: TeacherStudentPair, source_ds, target_ds, cfg: SelfTrainConfig, seed: int,
               target_val=None, source_val=None):
    """Alternate source batches (CE + Lovász, true labels) and target batches (CE, teacher pseudo-labels).

    The teacher is updated by EMA after every student step. Target labels, if
    present in ``target_ds``, are never read. Returns (student head, log).
    """
    backbone = pair.backbone
    if not backbone.is_frozen:
        raise ConfigError("self-training requires a frozen backbone")
    before = state_hash(backbone)
    student, teacher = pair.student, pair.teacher
    ns, nt = len(source_ds), len(target_ds)
    if ns == 0 or nt == 0:
        raise ConfigError("self-training needs non-empty source and target datasets")
    for i in range(ns):
        if source_ds[i].cloud.labels is None:
            raise ConfigError("source frames must be labelled")
    opt = make_adamw([{"params": student.parameters(), "weight_decay": cfg.weight_decay, "name": "head"}])
    set_lr(opt, cfg.lr)
    src_bank = FeatureBank(backbone, source_ds, cfg.augment)
    tgt_bank = FeatureBank(backbone, target_ds, cfg.augment)
    eval_banks = {}
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([seed, 21, epoch])
        so, to = rng.permutation(ns), rng.permutation(nt)
        src_batches = [("source", [int(j) for j in so[b:b + cfg.batch_size]]) for b in range(0, ns, cfg.batch_size)]
        tgt_batches = [("target", [int(j) for j in to[b:b + cfg.batch_size]]) for b in range(0, nt, cfg.batch_size)]
        stats = {"source_loss": [], "target_loss": [], "kept": 0, "seen": 0, "skipped": 0}
        for kind, idx in _interleave(src_batches, tgt_batches):
            seeds = [_frame_seed(seed, 22 if kind == "source" else 23, epoch, j) for j in idx]
            student.train()
            if kind == "source":
                feats = torch.cat([src_bank(j, s) for j, s in zip(idx, seeds)])
                labels = np.concatenate([source_ds[j].cloud.labels for j in idx])
                loss = segmentation_loss(student(feats), labels)[0]
            else:
                teacher.eval()
                with torch.no_grad():
                    t_feats = torch.cat([tgt_bank(j, s if cfg.teacher_sees_augmented else None)
                                         for j, s in zip(idx, seeds)])
                    plabels, _ = pseudo_labels(teacher(t_feats), cfg.confidence_threshold)
                kept = int((plabels != IGNORE_ID).sum())
                stats["kept"] += kept
                stats["seen"] += len(plabels)
                if kept == 0:
                    stats["skipped"] += 1
                    continue
                feats = torch.cat([tgt_bank(j, s) for j, s in zip(idx, seeds)])
                loss = cross_entropy(student(feats), plabels)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_update(teacher, student, cfg.momentum)
            stats[f"{kind}_loss"].append(loss.item())
        if stats["kept"] == 0:
            warnings.warn("no confident pseudo-labels", RuntimeWarning)
            log.warning("self-training epoch %d: no confident pseudo-labels", epoch)
        rec = {"stage": "selftrain", "epoch": epoch,
               "loss": float(np.mean(stats["source_loss"] + stats["target_loss"])),
               "source_loss": float(np.mean(stats["source_loss"])),
               "target_loss": float(np.mean(stats["target_loss"])) if stats["target_loss"] else 0.0,
               "pseudo_label_rate": stats["kept"] / max(stats["seen"], 1),
               "skipped_target_batches": stats["skipped"]}
        for split, ds in (("target_val", target_val), ("source_val", source_val)):
            if ds is not None:
                bank = eval_banks.setdefault(split, FeatureBank(backbone, ds, AugmentPolicy.off()))
                rec[f"{split}_miou"] = miou(evaluate_model(backbone, student, ds, features=bank))
        history.append(rec)
        log.info("selftrain epoch %d loss %.4f kept %.3f", epoch, rec["loss"], rec["pseudo_label_rate"])
    if state_hash(backbone) != before:
        raise RuntimeError("backbone changed during self-training")
    student.eval()
    teacher.eval()
    return student, history
