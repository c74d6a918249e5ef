"""Training loop with periodic gradient probing and parameter differentiation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import criterion
from .model import (BOS, EOS, PAD, NUM_SPECIAL, Batch, ModelConfig, batch_loss, build_model,
                    greedy_decode, loss_and_grads)
from .optim import Adam
from .tensor import ConfigError, Tape

log = logging.getLogger(__name__)

BASELINES = ("none", "random", "shared")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 20000
    diff_interval: int = 400
    target_size_ratio: float = 2.0
    sampling: str = "uniform"          # "uniform" or "temp:<tau>"
    batch_tokens: int = 128
    accumulation_steps: int = 1
    seed: int = 0
    probe_batch_size: int = 64
    eval_interval: int = 0
    lr: float = 1e-3
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float | None = None
    baseline: str = "none"             # "none", "random" or "shared"
    checkpoint_interval: int = 0
    max_failures: int = 10

    def __post_init__(self):
        if self.total_steps <= 0 or self.diff_interval <= 0:
            raise ConfigError("total_steps and diff_interval must be positive")
        if self.diff_interval > self.total_steps:
            raise ConfigError("diff_interval must not exceed total_steps")
        if self.target_size_ratio < 1.0:
            raise ConfigError("target_size_ratio must be >= 1")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        parse_sampling(self.sampling)

    def to_dict(self):
        return asdict(self)


def parse_sampling(spec):
    """``"uniform"`` -> None, ``"temp:5"`` -> 5.0."""
    if spec == "uniform":
        return None
    if spec.startswith("temp:"):
        tau = float(spec[5:])
        if not tau > 0:
            raise ConfigError("sampling temperature must be positive")
        return tau
    raise ConfigError(f"unknown sampling mode {spec!r}")


class TaskSampler:
    """Draws tasks with ``p_t`` proportional to ``D_t ** (1/tau)`` (uniform without tau)."""

    def __init__(self, tasks, sizes=None, temperature=None, rng=None):
        self.tasks = tuple(tasks)
        if temperature is None or np.isinf(temperature):
            p = np.ones(len(self.tasks))
        else:
            p = np.asarray(sizes, dtype=np.float64) ** (1.0 / temperature)
        self.probs = p / p.sum()
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0
        self.rng = rng if rng is not None else np.random.default_rng()

    def sample(self):
        return self.tasks[int(np.searchsorted(self._cdf, self.rng.random(), side="right"))]

    def sample_many(self, n):
        idx = np.searchsorted(self._cdf, self.rng.random(n), side="right")
        return [self.tasks[i] for i in idx]


def task_token(tasks, task):
    return NUM_SPECIAL + tuple(sorted(tasks)).index(task)


def pack_batch(task, tok, pairs, max_len):
    """Pad a list of (src, tgt) content-id pairs into a single-task Batch."""
    srcs, tins, touts, cut = [], [], [], 0
    for s, t in pairs:
        src = (tok,) + tuple(s) + (EOS,)
        tin = (BOS,) + tuple(t)
        tout = tuple(t) + (EOS,)
        if len(src) > max_len or len(tin) > max_len:
            cut += 1
        srcs.append(src[:max_len])
        tins.append(tin[:max_len])
        touts.append(tout[:max_len])
    S = max(len(s) for s in srcs)
    T = max(len(t) for t in tins)
    src = np.full((len(pairs), S), PAD, dtype=np.int64)
    tin = np.full((len(pairs), T), PAD, dtype=np.int64)
    tout = np.full((len(pairs), T), PAD, dtype=np.int64)
    for i, (s, a, b) in enumerate(zip(srcs, tins, touts)):
        src[i, : len(s)] = s
        tin[i, : len(a)] = a
        tout[i, : len(b)] = b
    return Batch(task, src, tin, tout, cut)


def make_batch(task, dataset, tok, batch_tokens, max_len, rng):
    """Random single-task batch whose padded size stays within ``batch_tokens``."""
    if not dataset:
        raise ValueError(f"empty dataset for task {task!r}")
    chosen, S, T = [], 0, 0
    while True:
        s, t = dataset[int(rng.integers(len(dataset)))]
        s2 = min(len(s) + 2, max_len)
        t2 = min(len(t) + 1, max_len)
        n = len(chosen) + 1
        if chosen and n * max(S, s2, T, t2) > batch_tokens:
            break
        chosen.append((s, t))
        S, T = max(S, s2), max(T, t2)
        if n * max(S, T) >= batch_tokens:
            break
    return pack_batch(task, tok, chosen, max_len)


@dataclass
class EvalResult:
    step: int
    loss: dict
    accuracy: dict = field(default_factory=dict)

    @property
    def mean_loss(self):
        return float(np.mean(list(self.loss.values())))


class Trainer:
    """Runs the differentiation training loop for one configuration and seed."""

    def __init__(self, model_cfg, train_cfg, data, out_dir=None, _restore=None):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.data = data
        self.tasks = tuple(sorted(data.tasks))
        if data.vocab_size > model_cfg.vocab_size:
            raise ConfigError(f"data needs vocab {data.vocab_size} > model vocab {model_cfg.vocab_size}")
        ss = np.random.SeedSequence(train_cfg.seed)
        init_ss, sampler_ss, batch_ss, drop_ss, rand_ss = ss.spawn(5)
        self.store, self.views = build_model(model_cfg, self.tasks, np.random.default_rng(init_ss))
        self.batch_rng = np.random.default_rng(batch_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)
        self.random_rng = np.random.default_rng(rand_ss)
        sizes = [len(data.train[t]) for t in self.tasks]
        self.sampler = TaskSampler(self.tasks, sizes, parse_sampling(train_cfg.sampling),
                                   np.random.default_rng(sampler_ss))
        self.optimizer = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps,
                              train_cfg.warmup_steps, train_cfg.clip_norm)
        self.initial_params = self.store.initial_params()
        ratio = 1.0 if train_cfg.baseline == "shared" else train_cfg.target_size_ratio
        self.budget = criterion.BudgetConfig(self.initial_params, ratio * self.initial_params,
                                             train_cfg.total_steps, train_cfg.diff_interval)
        self.step = 0
        self.passes = 0
        self.failures = 0
        self.truncated = 0
        self.events = []
        self.metrics = []
        self.evals = []
        self.probe_batches = {
            t: pack_batch(t, task_token(self.tasks, t),
                          data.valid.pairs[t][: train_cfg.probe_batch_size], model_cfg.max_len)
            for t in self.tasks}
        self.out_dir = out_dir
        if out_dir and _restore is None:
            os.makedirs(out_dir, exist_ok=True)
            for name in ("metrics.jsonl", "events.jsonl"):
                open(os.path.join(out_dir, name), "w").close()

    # ----------------------------------------------------------------- logging

    def _append(self, name, record):
        if self.out_dir:
            with open(os.path.join(self.out_dir, name), "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # ---------------------------------------------------------------- training

    @property
    def differentiating(self):
        return self.budget.target_size > self.budget.initial_size

    def train_step(self):
        """One optimizer step (over ``accumulation_steps`` single-task batches)."""
        self.step += 1
        cfg, mcfg = self.cfg, self.model_cfg
        grads, losses, tasks = {}, [], []
        for _ in range(cfg.accumulation_steps):
            task = self.sampler.sample()
            batch = make_batch(task, self.data.train[task], task_token(self.tasks, task),
                               cfg.batch_tokens, mcfg.max_len, self.batch_rng)
            self.truncated += batch.truncated
            loss, g = loss_and_grads(self.store, task, batch, rng=self.dropout_rng, train=True)
            if not np.isfinite(loss):
                continue
            losses.append(loss)
            tasks.append(task)
            for rid, gr in g.items():
                if rid in grads:
                    grads[rid] += gr
                else:
                    grads[rid] = gr
        lr = None
        if losses:
            if cfg.accumulation_steps > 1:
                for rid in grads:
                    grads[rid] /= cfg.accumulation_steps
            replicas = dict(self.store.replicas)
            replicas[self.store.shared.replica_id] = self.store.shared
            lr = self.optimizer.step(replicas, grads, self.step)
        if lr is None:
            self.failures += 1
            log.warning("step %d skipped (non-finite loss or gradient)", self.step)
            if self.failures >= cfg.max_failures:
                raise TrainingError(f"{self.failures} non-finite steps, last at step {self.step}")
        else:
            self.failures = 0
        rec = {"step": self.step,
               "task": tasks[0] if cfg.accumulation_steps == 1 and tasks else tasks,
               "loss": float(np.mean(losses)) if losses else None,
               "lr": lr,
               "param_count": self.store.total_params()}
        self.metrics.append(rec)
        self._append("metrics.jsonl", rec)
        if self.step % cfg.diff_interval == 0 and self.differentiating:
            self.differentiate()
        if cfg.eval_interval and self.step % cfg.eval_interval == 0:
            self.evaluate()
        if cfg.checkpoint_interval and self.out_dir and self.step % cfg.checkpoint_interval == 0:
            self.save(os.path.join(self.out_dir, "checkpoint.npz"))
        return rec

    def differentiate(self):
        """Probe, flag within the carried-over budget, split, warm up new replicas."""
        self.passes += 1
        probe = criterion.probe_gradients(self.store, self.probe_batches, self.step)
        grown = self.store.total_params() - self.initial_params
        quota = self.budget.allowed_growth(self.passes) - grown
        rng = self.random_rng if self.cfg.baseline == "random" else None
        events = criterion.flag_and_split(self.store, probe, max(quota, 0.0), self.step, rng)
        for ev in events:
            children = [self.store.replicas[c] for c in ev.child_replica_ids]
            self.optimizer.warmup_states(ev.parent_replica_id, children, probe)
            self.events.append(ev)
            self._append("events.jsonl", ev.to_record())
        return events

    def run(self, until=None):
        until = self.cfg.total_steps if until is None else until
        while self.step < until:
            self.train_step()
        return self

    # -------------------------------------------------------------- evaluation

    def evaluate(self, split="test", accuracy=False):
        sets = self.data.test if split == "test" else self.data.valid
        losses, accs = {}, {}
        for t in self.tasks:
            batch = pack_batch(t, task_token(self.tasks, t), sets.pairs[t], self.model_cfg.max_len)
            loss, _ = batch_loss(self.store, t, batch, Tape(record=False), label_smoothing=0.0)
            losses[t] = float(loss.value)
            if accuracy:
                accs[t] = token_accuracy(self.store, t, batch)
        res = EvalResult(self.step, losses, accs)
        self.evals.append(res)
        self._append("eval.jsonl", {"step": self.step, "loss": losses, "accuracy": accs})
        return res

    # ------------------------------------------------------------- checkpoints

    def save(self, path):
        from .checkpoint import save_trainer
        save_trainer(self, path)

    @classmethod
    def load(cls, path, data, out_dir=None):
        from .checkpoint import load_trainer
        return load_trainer(path, data, out_dir)


def token_accuracy(store, task, batch):
    """Fraction of reference target tokens (EOS included) reproduced by greedy decoding."""
    hyp = greedy_decode(store, task, batch.src, batch.tgt_out.shape[1])
    ref = batch.tgt_out
    L = min(hyp.shape[1], ref.shape[1])
    hyp_p = np.full(ref.shape, PAD, dtype=np.int64)
    hyp_p[:, :L] = hyp[:, :L]
    mask = ref != PAD
    return float((hyp_p == ref)[mask].mean())


@dataclass
class TrainResult:
    trainer: Trainer
    final: EvalResult

    @property
    def store(self):
        return self.trainer.store

    @property
    def events(self):
        return self.trainer.events

    @property
    def param_count(self):
        return self.trainer.store.total_params()


def train(model_cfg, train_cfg, data, out_dir=None, accuracy=False):
    """Run ``total_steps`` of training and evaluate on the held-out test split."""
    trainer = Trainer(model_cfg, train_cfg, data, out_dir)
    trainer.run()
    final = trainer.evaluate(accuracy=accuracy)
    if out_dir:
        trainer.save(os.path.join(out_dir, "checkpoint.npz"))
    return TrainResult(trainer, final)


def random_sharing_baseline(model_cfg, train_cfg, data, out_dir=None, accuracy=False):
    """Same pipeline and budget, but replicas and bipartitions are chosen at random."""
    cfg = TrainConfig(**{**train_cfg.to_dict(), "baseline": "random"})
    return train(model_cfg, cfg, data, out_dir, accuracy)


def shared_baseline(model_cfg, train_cfg, data, out_dir=None, accuracy=False):
    cfg = TrainConfig(**{**train_cfg.to_dict(), "baseline": "shared"})
    return train(model_cfg, cfg, data, out_dir, accuracy)


__all__ = ["TrainConfig", "TaskSampler", "Trainer", "TrainResult", "make_batch", "pack_batch",
           "train", "random_sharing_baseline", "shared_baseline", "ModelConfig"]
