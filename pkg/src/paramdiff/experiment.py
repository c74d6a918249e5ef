"""The desk-scale conflict experiment: two designed task families, three training variants.

Variants share model, data, schedule and seed; they differ only in how the
size budget is spent: ``"none"`` splits by gradient conflict, ``"random"``
splits random replicas into random halves, ``"shared"`` never splits.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import generate, two_family_suite
from .model import ModelConfig
from .report import differentiated_leaves, family_purity
from .train import TrainConfig, train

VARIANTS = ("none", "shared", "random")


def desk_data(seed):
    """Copy-like vs reverse-like tasks on sequences of 4 to 14 content symbols."""
    return generate(two_family_suite(min_len=4, max_len=14), seed=seed)


def desk_train_config(seed, baseline="none", **overrides):
    kw = dict(total_steps=20000, diff_interval=400, target_size_ratio=2.0, batch_tokens=64,
              seed=seed, baseline=baseline)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class ConflictRun:
    seed: int
    variant: str
    loss: float
    param_count: int
    events: int
    purity: float      # over leaves of differentiated units; nan when nothing split
    seconds: float


def run_conflict(seed, variant, out_dir=None, **overrides):
    data = desk_data(seed)
    t0 = time.perf_counter()
    res = train(ModelConfig(), desk_train_config(seed, variant, **overrides), data, out_dir)
    leaves = differentiated_leaves(res.events, data.tasks)
    purity = family_purity(leaves, data.families) if leaves else float("nan")
    return ConflictRun(seed, variant, res.final.mean_loss, res.param_count, len(res.events),
                       purity, time.perf_counter() - t0)


def summarize(runs):
    """Median loss per variant and median purity of the criterion-based runs."""
    by = {v: [r for r in runs if r.variant == v] for v in VARIANTS}
    out = {f"median_loss_{v}": float(np.median([r.loss for r in rs])) for v, rs in by.items() if rs}
    if by["none"]:
        out["median_purity"] = float(np.median([r.purity for r in by["none"]]))
    return out
