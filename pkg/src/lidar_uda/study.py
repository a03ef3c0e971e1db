"""Desk-scale configuration and the comparison runs behind the ordering checks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import ArchConfig
from .distill import DistillConfig
from .downstream import TrainConfig
from .evaluate import RunResult, miou
from .geometry import AugmentPolicy
from .pipeline import ExperimentConfig, Runner, TeacherConfig
from .selftrain import SelfTrainConfig

PAIRS = (("N", "K"), ("K", "N"), ("N", "W"), ("W", "N"))
TEACHER_PAIRS = (("N", "K"), ("K", "N"))


def desk_config(out_root: str = "", seed: int = 0) -> ExperimentConfig:
    """Settings sized for a single CPU core.

    Step counts are what matter at this scale, so batches are small and the
    learning rates higher than the large-data defaults.
    """
    return ExperimentConfig(
        name="desk",
        seed=seed,
        out_root=out_root,
        pairs=PAIRS,
        pretrain="pair",
        arch=ArchConfig(width=64, depth=4, norm="layer"),
        teacher=TeacherConfig("mock_semantic", feature_dim=32, noise_sigma=0.1),
        distill=DistillConfig(epochs=10, batch_size=2, lr=5e-3, warmup_epochs=1.0),
        train=TrainConfig(recipe="frozen_mlp", epochs=20, batch_size=2, lr=5e-3, warmup_epochs=1.0,
                          augment=AugmentPolicy.off()),
        scratch=TrainConfig.scratch(epochs=12, batch_size=2, lr=5e-3, warmup_epochs=1.0),
        selftrain=SelfTrainConfig(epochs=5, batch_size=2, lr=1e-3, augment=AugmentPolicy.off()),
    )


@dataclass
class Study:
    """mIoU (0-1) per comparison arm and pair, plus wall time per block."""

    arms: dict = field(default_factory=dict)  # arm -> {pair: miou}
    runs: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)

    def add(self, arm: str, run: RunResult) -> None:
        pair = run.setting
        self.arms.setdefault(arm, {})[pair] = miou(run.cm)
        self.runs.append(RunResult(f"{arm}/{pair}", run.cm, run.log))

    def mean(self, arm: str) -> float:
        return float(np.mean(list(self.arms[arm].values())))


def _pair(src, tgt) -> str:
    return f"{src}->{tgt}"


def run_study(cfg: ExperimentConfig, blocks=("norm", "scratch_vs_distill", "pretrain_sets", "teacher",
                                              "selftrain", "width")) -> Study:
    runner = Runner(cfg)
    st = Study()
    t0 = time.time()
    runner.generate()
    st.seconds["generate"] = time.time() - t0
    for block in blocks:
        t0 = time.time()
        for src, tgt in cfg.pairs:
            st_pair = (src, tgt)
            if block == "norm":
                for norm in ("layer", "batch"):
                    st.add(f"scratch-{norm}norm", runner.scratch_run(src, tgt, replace(cfg.arch, norm=norm)))
            elif block == "scratch_vs_distill":
                st.add("scratch", runner.scratch_run(src, tgt))
                st.add("distill-frozen", runner.frozen_run(src, tgt, tuple(sorted({src, tgt}))))
            elif block == "pretrain_sets":
                st.add("pretrain-S", runner.frozen_run(src, tgt, (src,)))
                st.add("pretrain-S+T", runner.frozen_run(src, tgt, tuple(sorted({src, tgt}))))
            elif block == "teacher" and st_pair in TEACHER_PAIRS:
                for kind in ("mock_semantic", "mock_instance"):
                    st.add(f"teacher-{kind}", runner.frozen_run(src, tgt, tuple(sorted({src, tgt})),
                                                                 replace(cfg.teacher, kind=kind)))
            elif block == "selftrain":
                dkey, bb = runner.distill(tuple(sorted({src, tgt})))
                hkey, net, head = runner.head(src, dkey, bb)
                st.add("no-selftrain", RunResult(f"no-selftrain/{_pair(src, tgt)}", runner.evaluate(hkey, net, head, tgt)))
                skey, net2, student = runner.selftrain(hkey, net, head, src, tgt)
                st.add("selftrain", RunResult(f"selftrain/{_pair(src, tgt)}", runner.evaluate(skey, net2, student, tgt),
                                              runner.stage_log("selftrain", skey)))
            elif block == "width":
                for w in (32, 96):
                    st.add(f"scratch-width{w}", runner.scratch_run(src, tgt, replace(cfg.arch, width=w)))
        st.seconds[block] = time.time() - t0
    return st
