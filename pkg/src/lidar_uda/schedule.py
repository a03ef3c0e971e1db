"""Warmup + cosine learning-rate schedule and AdamW parameter groups."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class WarmupCosine:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __call__(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return self.base_lr
        t = (step - self.warmup_steps) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def lr_at(step: int, total_steps: int, cfg, steps_per_epoch: int = 1) -> float:
    """Learning rate at ``step``: linear 0 -> cfg.lr over the warmup epochs, then cosine to 0."""
    return WarmupCosine(cfg.lr, int(cfg.warmup_epochs * steps_per_epoch), total_steps)(step)


def make_adamw(groups: list[dict]) -> torch.optim.AdamW:
    """AdamW over groups of the form ``{"params", "lr_scale", "weight_decay"}``; frozen tensors are skipped."""
    param_groups = []
    for g in groups:
        params = [p for p in g["params"] if p.requires_grad]
        if params:
            param_groups.append({"params": params, "lr": 0.0, "lr_scale": g.get("lr_scale", 1.0),
                                 "weight_decay": g.get("weight_decay", 0.0), "name": g.get("name", "")})
    if not param_groups:
        raise ValueError("nothing to optimise: every parameter is frozen")
    return torch.optim.AdamW(param_groups, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr * g["lr_scale"]
