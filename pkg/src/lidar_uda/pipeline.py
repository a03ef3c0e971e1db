"""Experiment configuration and the content-addressed stage runner behind the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import ArchConfig, Backbone, Head, load_checkpoint, save_checkpoint
from .datasets import (DomainSpec, FrameDataset, GapSpec, load_manifest, make_domain, make_domain_pair,
                       merge, standard_domains)
from .distill import DistillConfig, MockTeacher, PrecomputedTeacher, pretrain
from .downstream import TrainConfig, train, train_joint, write_log
from .evaluate import ConfusionMatrix, RunResult, evaluate_model, miou
from .geometry import AugmentPolicy
from .selftrain import SelfTrainConfig, TeacherStudentPair, self_train

log = logging.getLogger(__name__)

OUT_ENV = "LIDAR_UDA_OUT"
TEACHERS = ("mock_semantic", "mock_instance", "precomputed")
ABLATION_AXES = ("norm", "intensity", "width", "recipe", "teacher", "pretrain_sets")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "mock_semantic"
    feature_dim: int = 32
    noise_sigma: float = 0.1
    semantic_weight: float = 0.25
    seed: int = 0
    path: str = ""

    def __post_init__(self):
        if self.kind not in TEACHERS:
            raise ValueError(f"teacher kind must be one of {TEACHERS}")

    def build(self):
        if self.kind == "precomputed":
            if not self.path:
                raise ValueError("precomputed teacher needs a path")
            return PrecomputedTeacher(self.path, self.feature_dim)
        mode = "semantic" if self.kind == "mock_semantic" else "instance"
        return MockTeacher(mode, self.feature_dim, self.noise_sigma, seed=self.seed,
                           semantic_weight=self.semantic_weight)


def _default_domains() -> dict:
    return standard_domains(frame_count=40, small=True)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on. ``gap`` (one source/target pair) replaces ``domains``/``pairs`` when set."""

    name: str = "desk"
    seed: int = 0
    out_root: str = ""
    domains: dict = field(default_factory=_default_domains)
    pairs: tuple = (("N", "K"), ("K", "N"), ("N", "W"), ("W", "N"))
    gap: GapSpec | None = None
    pretrain: str = "all"  # all | pair | source
    arch: ArchConfig = ArchConfig()
    teacher: TeacherConfig = TeacherConfig()
    distill: DistillConfig = DistillConfig()
    train: TrainConfig = TrainConfig()
    scratch: TrainConfig = field(default_factory=TrainConfig.scratch)
    selftrain: SelfTrainConfig = SelfTrainConfig()

    def __post_init__(self):
        if self.pretrain not in ("all", "pair", "source"):
            raise ValueError("pretrain must be all, pair or source")
        if self.gap is not None:
            object.__setattr__(self, "domains", {self.gap.source.name: self.gap.source,
                                                 self.gap.target.name: self.gap.target})
            object.__setattr__(self, "pairs", ((self.gap.source.name, self.gap.target.name),))
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        for s, t in self.pairs:
            if s not in self.domains or t not in self.domains:
                raise ValueError(f"pair {s}->{t} names an unknown domain")
            if s == t:
                raise ValueError("source and target must differ")

    def to_dict(self) -> dict:
        return to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return from_jsonable(cls, d)

    def root(self) -> Path:
        return Path(self.out_root or os.environ.get(OUT_ENV, "runs"))

    def pretrain_sets(self, source: str, target: str) -> tuple:
        if self.pretrain == "source":
            return (source,)
        if self.pretrain == "pair":
            return tuple(sorted({source, target}))
        return tuple(sorted(self.domains))


# ---------------------------------------------------------------------------
# (De)serialisation of nested dataclass configs


def to_jsonable(obj):
    if isinstance(obj, (DomainSpec, GapSpec)):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _as_tuple(v):
    return tuple(_as_tuple(x) for x in v) if isinstance(v, list) else v


def from_jsonable(cls, d):
    if d is None:
        return None
    if cls in (DomainSpec, GapSpec):
        return cls.from_dict(d)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v, hint = d[f.name], hints[f.name]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        target = args[0] if args and dataclasses.is_dataclass(args[0]) else hint
        if f.name == "domains":
            v = {k: DomainSpec.from_dict(s) for k, s in v.items()}
        elif dataclasses.is_dataclass(target):
            v = from_jsonable(target, v)
        else:
            v = _as_tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def config_hash(payload) -> str:
    text = json.dumps(to_jsonable(payload), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` overrides; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return d


# ---------------------------------------------------------------------------
# Stage runner


class Runner:
    """Runs stages under ``root``; each stage output lives in ``root/<stage>/<hash>`` and is reused."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.root = cfg.root()
        self.force = force
        self.cache_hits: list = []
        self.artifacts: list = []
        self._datasets: dict = {}

    # -- bookkeeping
    def _stage_dir(self, stage: str, payload) -> tuple[str, Path, bool]:
        key = config_hash(payload)
        d = self.root / stage / key
        done = (d / "done.json").exists() and not self.force
        if done:
            self.cache_hits.append(f"{stage}/{key}")
        else:
            d.mkdir(parents=True, exist_ok=True)
            (d / "config.json").write_text(json.dumps(to_jsonable(payload), indent=1, sort_keys=True))
        return key, d, done

    def _finish(self, d: Path, info: dict) -> None:
        (d / "done.json").write_text(json.dumps(info, indent=1, sort_keys=True))

    def _record(self, stage: str, path: Path) -> None:
        self.artifacts.append({"stage": stage, "path": str(path)})
        manifest = self.root / "artifacts.json"
        known = json.loads(manifest.read_text()) if manifest.exists() else []
        if str(path) not in {a["path"] for a in known}:
            known.append({"stage": stage, "path": str(path)})
            manifest.parent.mkdir(parents=True, exist_ok=True)
            manifest.write_text(json.dumps(known, indent=1))

    # -- data
    def data_dir(self) -> Path:
        payload = {"seed": self.cfg.seed, "domains": self.cfg.domains, "gap": self.cfg.gap}
        return self.root / "data" / config_hash(payload)

    def generate(self) -> dict:
        """Write every domain (idempotent unless forced); returns domain -> directory."""
        base = self.data_dir()
        paths = {k: base / k for k in sorted(self.cfg.domains)}
        if all((p / "manifest.json").exists() for p in paths.values()) and not self.force:
            self.cache_hits.append("data")
            return paths
        base.mkdir(parents=True, exist_ok=True)
        if self.cfg.gap is not None:
            src, tgt = make_domain_pair(self.cfg.gap, self.cfg.seed, base / "_pair")
            for name, sub in ((self.cfg.gap.source.name, "source"), (self.cfg.gap.target.name, "target")):
                if paths[name].exists():
                    import shutil

                    shutil.rmtree(paths[name])
                (base / "_pair" / sub).rename(paths[name])
        else:
            for j, key in enumerate(sorted(self.cfg.domains)):
                spec = self.cfg.domains[key]
                dseed = int(np.random.default_rng([self.cfg.seed, 101, j]).integers(2**31))
                make_domain(spec, dseed, paths[key], pair="NW" if spec.taxonomy == "waymo" else "NK")
        (base / "config.json").write_text(json.dumps(to_jsonable(
            {"seed": self.cfg.seed, "domains": self.cfg.domains, "gap": self.cfg.gap}), indent=1))
        for p in paths.values():
            self._record("generate", p)
        return paths

    def dataset(self, domain: str, split: str = "train", labeled: bool = True):
        key = (domain, split, labeled)
        if key not in self._datasets:
            root = self.data_dir() / domain
            try:
                man = load_manifest(root, split)
            except FileNotFoundError as e:
                raise StageError("data", str(e)) from e
            self._datasets[key] = FrameDataset(man if labeled else man.unlabeled())
        return self._datasets[key]

    # -- stages
    def distill(self, sets: tuple, arch: ArchConfig | None = None, teacher: TeacherConfig | None = None):
        arch = arch or self.cfg.arch
        teacher = teacher or self.cfg.teacher
        payload = {"stage": "distill", "data": self.data_dir().name, "sets": list(sets), "arch": arch,
                   "teacher": teacher, "distill": self.cfg.distill, "seed": self.cfg.seed}
        key, d, done = self._stage_dir("distill", payload)
        ckpt = d / "backbone.ckpt"
        if not done:
            t0 = time.time()
            try:
                merged = merge([self.dataset(s, "train", labeled=False) for s in sets])
                bb, head, hist = pretrain(merged, teacher.build(), arch, self.cfg.distill, self.cfg.seed)
            except StageError:
                raise
            except Exception as e:
                raise StageError("distill", str(e)) from e
            save_checkpoint(ckpt, bb, {"distill": head}, {"stage": "distill", "sets": list(sets)})
            write_log(d / "log.jsonl", hist)
            self._finish(d, {"seconds": time.time() - t0})
            self._record("distill", ckpt)
        bb, heads, _ = load_checkpoint(ckpt)
        return key, bb

    def head(self, source: str, backbone_key: str | None, backbone: Backbone | ArchConfig,
             tcfg: TrainConfig | None = None, stage: str = "train"):
        tcfg = tcfg or (self.cfg.scratch if backbone_key is None else self.cfg.train)
        arch = backbone if isinstance(backbone, ArchConfig) else backbone.cfg
        payload = {"stage": stage, "data": self.data_dir().name, "source": source, "backbone": backbone_key,
                   "arch": arch, "train": tcfg, "seed": self.cfg.seed}
        key, d, done = self._stage_dir(stage, payload)
        ckpt = d / "model.ckpt"
        if not done:
            t0 = time.time()
            try:
                net, head, hist = train(backbone, self.dataset(source, "train"), tcfg, self.cfg.seed,
                                        val=self.dataset(source, "val"))
            except StageError:
                raise
            except Exception as e:
                raise StageError(stage, str(e)) from e
            save_checkpoint(ckpt, net, {"classify": head}, {"stage": stage, "source": source})
            write_log(d / "log.jsonl", hist)
            self._finish(d, {"seconds": time.time() - t0})
            self._record(stage, ckpt)
        net, heads, _ = load_checkpoint(ckpt)
        return key, net, heads["classify"].eval()

    def joint(self, source: str, target: str, tcfg: TrainConfig, teacher: TeacherConfig | None = None):
        teacher = teacher or self.cfg.teacher
        payload = {"stage": "joint", "data": self.data_dir().name, "source": source, "target": target,
                   "arch": self.cfg.arch, "teacher": teacher, "train": tcfg, "seed": self.cfg.seed}
        key, d, done = self._stage_dir("joint", payload)
        ckpt = d / "model.ckpt"
        if not done:
            t0 = time.time()
            try:
                merged = merge([self.dataset(source, "train"), self.dataset(target, "train", labeled=False)])
                net, heads, hist = train_joint(merged, teacher.build(), self.cfg.arch, tcfg, self.cfg.seed,
                                               val=self.dataset(source, "val"))
            except Exception as e:
                raise StageError("joint", str(e)) from e
            save_checkpoint(ckpt, net, heads, {"stage": "joint"})
            write_log(d / "log.jsonl", hist)
            self._finish(d, {"seconds": time.time() - t0})
            self._record("joint", ckpt)
        net, heads, _ = load_checkpoint(ckpt)
        return key, net, heads["classify"].eval()

    def selftrain(self, train_key: str, backbone: Backbone, head: Head, source: str, target: str):
        payload = {"stage": "selftrain", "data": self.data_dir().name, "train": train_key, "source": source,
                   "target": target, "selftrain": self.cfg.selftrain, "seed": self.cfg.seed}
        key, d, done = self._stage_dir("selftrain", payload)
        ckpt = d / "model.ckpt"
        if not done:
            t0 = time.time()
            try:
                pair = TeacherStudentPair.from_head(backbone, head)
                student, hist = self_train(pair, self.dataset(source, "train"),
                                           self.dataset(target, "train", labeled=False),
                                           self.cfg.selftrain, self.cfg.seed)
            except Exception as e:
                raise StageError("selftrain", str(e)) from e
            save_checkpoint(ckpt, backbone, {"classify": student}, {"stage": "selftrain"})
            write_log(d / "log.jsonl", hist)
            self._finish(d, {"seconds": time.time() - t0})
            self._record("selftrain", ckpt)
        net, heads, _ = load_checkpoint(ckpt)
        return key, net, heads["classify"].eval()

    def evaluate(self, model_key: str, backbone: Backbone, head: Head, domain: str,
                 split: str = "val") -> ConfusionMatrix:
        payload = {"stage": "eval", "data": self.data_dir().name, "model": model_key, "domain": domain,
                   "split": split}
        key, d, done = self._stage_dir("eval", payload)
        path = d / "confusion.json"
        if not done:
            try:
                cm = evaluate_model(backbone, head, self.dataset(domain, split))
            except StageError:
                raise
            except Exception as e:
                raise StageError("eval", str(e)) from e
            path.write_text(json.dumps(cm.to_dict()))
            self._finish(d, {"miou": miou(cm)})
            self._record("eval", path)
        return ConfusionMatrix.from_dict(json.loads(path.read_text()))

    def stage_log(self, stage: str, key: str) -> list:
        p = self.root / stage / key / "log.jsonl"
        return [json.loads(line) for line in p.read_text().splitlines()] if p.exists() else []

    # -- compositions
    def pipeline(self, selftrain: bool = True) -> list[RunResult]:
        """Distil -> frozen head per source -> self-training per pair -> target evaluation."""
        runs = []
        for src, tgt in self.cfg.pairs:
            dkey, bb = self.distill(self.cfg.pretrain_sets(src, tgt))
            hkey, net, head = self.head(src, dkey, bb)
            runs.append(RunResult(f"{self.cfg.train.recipe}/{src}->{tgt}", self.evaluate(hkey, net, head, tgt),
                                  self.stage_log("train", hkey)))
            if selftrain:
                skey, net2, student = self.selftrain(hkey, net, head, src, tgt)
                runs.append(RunResult(f"{self.cfg.train.recipe}+selftrain/{src}->{tgt}",
                                      self.evaluate(skey, net2, student, tgt), self.stage_log("selftrain", skey)))
        return runs

    def scratch_run(self, src: str, tgt: str, arch: ArchConfig | None = None, label: str = "scratch"):
        arch = arch or self.cfg.arch
        key, net, head = self.head(src, None, arch, self.cfg.scratch, stage="scratch")
        return RunResult(f"{label}/{src}->{tgt}", self.evaluate(key, net, head, tgt), self.stage_log("scratch", key))

    def frozen_run(self, src: str, tgt: str, sets: tuple, teacher: TeacherConfig | None = None,
                   tcfg: TrainConfig | None = None, label: str = "frozen", arch: ArchConfig | None = None):
        dkey, bb = self.distill(sets, arch=arch, teacher=teacher)
        key, net, head = self.head(src, dkey, bb, tcfg or self.cfg.train)
        return RunResult(f"{label}/{src}->{tgt}", self.evaluate(key, net, head, tgt), self.stage_log("train", key))

    def ablate(self, axis: str) -> list[RunResult]:
        """Vary one factor with everything else fixed; rows are named ``<variant>/<src>-><tgt>``."""
        if axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
        cfg = self.cfg
        runs = []
        for src, tgt in cfg.pairs:
            if axis == "norm":
                for norm in ("batch", "layer"):
                    runs.append(self.scratch_run(src, tgt, replace(cfg.arch, norm=norm), f"{norm}norm"))
            elif axis == "intensity":
                for use in (False, True):
                    runs.append(self.scratch_run(src, tgt, replace(cfg.arch, use_intensity=use),
                                                 "intensity" if use else "no-intensity"))
            elif axis == "width":
                for w in (32, 64, 96):
                    runs.append(self.scratch_run(src, tgt, replace(cfg.arch, width=w), f"width{w}"))
            elif axis == "teacher":
                for kind in ("mock_semantic", "mock_instance"):
                    runs.append(self.frozen_run(src, tgt, tuple(sorted({src, tgt})),
                                                replace(cfg.teacher, kind=kind), label=kind))
            elif axis == "pretrain_sets":
                extra = tuple(sorted(set(cfg.domains) - {src, tgt}))
                for label, sets in (("S", (src,)), ("S+T", (src, tgt)), ("S+T+E", (src, tgt) + extra)):
                    if label == "S+T+E" and not extra:
                        continue
                    runs.append(self.frozen_run(src, tgt, tuple(sorted(sets)), label=label))
            elif axis == "recipe":
                sets = cfg.pretrain_sets(src, tgt)
                runs.append(self.scratch_run(src, tgt, label="from_scratch"))
                for recipe in ("frozen_linear", "frozen_mlp", "full_finetune"):
                    runs.append(self.frozen_run(src, tgt, sets, tcfg=replace(cfg.train, recipe=recipe),
                                                label=recipe))
                key, net, head = self.joint(src, tgt, replace(cfg.train, recipe="joint_distill_classify"))
                runs.append(RunResult(f"joint_distill_classify/{src}->{tgt}", self.evaluate(key, net, head, tgt),
                                      self.stage_log("joint", key)))
        return runs
