"""Gradient-conflict criterion and the split step.

Task gradients on each shared replica are probed on multi-way aligned
held-out data.  A replica's interference degree is the largest negative
cosine similarity between any two of its tasks' gradients; flagged replicas
are split into the two task subsets that minimise summed interference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import loss_and_grads
from .tensor import ConfigError

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 15
SINGLETON_INTERFERENCE = -1.0


class ProbeError(ValueError):
    pass


@dataclass
class GradientProbe:
    """Flattened gradient per ``(replica_id, task)``, measured at ``probe_step``."""

    grads: dict = field(default_factory=dict)
    probe_step: int = 0
    losses: dict = field(default_factory=dict)

    def vectors(self, replica):
        """Probe vectors of ``replica``'s tasks in sorted task order."""
        tasks = sorted(replica.tasks)
        return tasks, [self.grads[(replica.replica_id, t)] for t in tasks]


@dataclass
class InterferenceReport:
    replica_id: int
    unit_id: str
    interference: float
    worst_pair: tuple
    best_partition: tuple
    partition_score: float


@dataclass
class DifferentiationEvent:
    step: int
    unit_id: str
    parent_replica_id: int
    partition: tuple  # (sorted tasks, sorted tasks)
    child_replica_ids: tuple
    interference_at_split: float
    unit_size: int = 0
    params_before: int = 0
    params_after: int = 0

    def to_record(self):
        return {
            "step": self.step,
            "unit": self.unit_id,
            "parent": self.parent_replica_id,
            "partition": [list(s) for s in self.partition],
            "children": list(self.child_replica_ids),
            "interference": self.interference_at_split,
            "unit_size": self.unit_size,
            "params_before": self.params_before,
            "params_after": self.params_after,
        }

    @classmethod
    def from_record(cls, r):
        return cls(r["step"], r["unit"], r["parent"], tuple(tuple(s) for s in r["partition"]),
                   tuple(r["children"]), r["interference"], r.get("unit_size", 0),
                   r.get("params_before", 0), r.get("params_after", 0))


# ------------------------------------------------------------------ probing


def probe_gradients(store, validation, step=0):
    """One backward pass per task over its aligned probe batch (dropout off).

    ``validation`` maps task -> Batch.  Tasks are visited in sorted order so
    the result does not depend on scheduling.
    """
    probe = GradientProbe(probe_step=step)
    for task in store.tasks:
        batch = validation.get(task)
        if batch is None or batch.src.shape[0] == 0:
            raise ProbeError(f"no validation batch for task {task!r}")
        loss, grads = loss_and_grads(store, task, batch, train=False)
        probe.losses[task] = loss
        for unit_id in store.units:
            rid = store.views[task][unit_id]
            probe.grads[(rid, task)] = grads[rid]
    return probe


# --------------------------------------------------------------- interference


def cosine_matrix(vectors):
    """Pairwise cosine similarities; a zero vector has cosine 0 with everything."""
    G = np.array(vectors, dtype=np.float64)
    norms = np.linalg.norm(G, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.warning("zero-norm probe gradient for %d task(s); treating cosine as 0", zero.sum())
    U = G / np.where(zero, 1.0, norms)[:, None]
    C = U @ U.T
    np.clip(C, -1.0, 1.0, out=C)
    C[zero, :] = 0.0
    C[:, zero] = 0.0
    return C


def _set_interference(C, idx):
    if len(idx) < 2:
        return SINGLETON_INTERFERENCE
    sub = C[np.ix_(idx, idx)]
    iu = np.triu_indices(len(idx), 1)
    return float(-sub[iu].min())


def interference_from_vectors(tasks, vectors):
    """(score, worst_pair) over the given tasks' gradient vectors."""
    if len(tasks) < 2:
        raise ValueError("interference needs at least two tasks")
    C = cosine_matrix(vectors)
    n = len(tasks)
    best, pair = None, None
    for j in range(n):
        for k in range(j + 1, n):
            s = -C[j, k]
            if best is None or s > best:
                best, pair = s, (tasks[j], tasks[k])
    return float(best), pair


def interference(probe, replica):
    tasks, vectors = probe.vectors(replica)
    return interference_from_vectors(tasks, vectors)


def bipartition_from_vectors(tasks, vectors):
    """Two-way split of ``tasks`` minimising summed interference.

    Returns ``((side_a, side_b), score)`` with the smallest task always on side
    ``a``.  Exhaustive up to EXHAUSTIVE_LIMIT tasks, heuristic beyond.
    """
    n = len(tasks)
    if n < 2:
        raise ValueError("bipartition needs at least two tasks")
    order = sorted(range(n), key=lambda i: tasks[i])
    tasks = [tasks[i] for i in order]
    C = cosine_matrix([vectors[i] for i in order])
    if n > EXHAUSTIVE_LIMIT:
        return _bipartition_heuristic(tasks, C)
    best = None
    # task 0 is pinned to side a; each mask over the remaining n-1 tasks is one bipartition
    for mask in range(0, 2 ** (n - 1) - 1):
        a = [0] + [i + 1 for i in range(n - 1) if mask >> i & 1]
        b = [i + 1 for i in range(n - 1) if not mask >> i & 1]
        score = _set_interference(C, a) + _set_interference(C, b)
        key = (score, tuple(tasks[i] for i in a))
        if best is None or key < best[0]:
            best = (key, a, b)
    (score, _), a, b = best
    return (tuple(tasks[i] for i in a), tuple(tasks[i] for i in b)), score


def _bipartition_heuristic(tasks, C):
    n = len(tasks)
    iu = np.triu_indices(n, 1)
    w = int(np.argmin(C[iu]))
    seeds = (iu[0][w], iu[1][w])
    assign = np.where(C[:, seeds[0]] >= C[:, seeds[1]], 0, 1)
    # spherical 2-means on unit gradients, expressed through the cosine matrix:
    # cos(u_i, centroid_S) = mean_j C[i, j] / sqrt(mean_jk C[j, k])
    for _ in range(100):
        cos = []
        for s in (0, 1):
            m = assign == s
            if not m.any():
                m = np.zeros(n, dtype=bool)
                m[seeds[s]] = True
            norm = np.sqrt(max(C[np.ix_(m, m)].mean(), 1e-300))
            cos.append(C[:, m].mean(axis=1) / norm)
        new = np.where(cos[0] >= cos[1], 0, 1)
        if new.all() or not new.any() or (new == assign).all():
            break
        assign = new

    def objective(asg):
        a, b = np.flatnonzero(asg == 0), np.flatnonzero(asg == 1)
        if len(a) == 0 or len(b) == 0:
            return np.inf
        return _set_interference(C, list(a)) + _set_interference(C, list(b))

    cur = objective(assign)
    improved = True
    while improved:
        improved = False
        for i in range(n):
            trial = assign.copy()
            trial[i] = 1 - trial[i]
            val = objective(trial)
            if val < cur:
                assign, cur, improved = trial, val, True
    if assign[0] == 1:
        assign = 1 - assign
    a = tuple(tasks[i] for i in range(n) if assign[i] == 0)
    b = tuple(tasks[i] for i in range(n) if assign[i] == 1)
    return (a, b), float(cur)


def best_bipartition(probe, replica):
    tasks, vectors = probe.vectors(replica)
    return bipartition_from_vectors(tasks, vectors)


def report(probe, store):
    """Interference report for every replica bound to two or more tasks."""
    out = []
    for rep in store.unit_replicas():
        if len(rep.tasks) < 2:
            continue
        tasks, vectors = probe.vectors(rep)
        score, pair = interference_from_vectors(tasks, vectors)
        part, pscore = bipartition_from_vectors(tasks, vectors)
        out.append(InterferenceReport(rep.replica_id, rep.unit_id, score, pair, part, pscore))
    return out


# ------------------------------------------------------------------- budget


@dataclass
class BudgetConfig:
    initial_size: int     # O0
    target_size: float    # O
    total_steps: int      # Q
    interval: int         # N

    @property
    def num_events(self):
        return self.total_steps // self.interval

    def allowed_growth(self, event_index):
        """Cumulative growth permitted after the ``event_index``-th pass (1-based)."""
        n = self.num_events
        if n == 0:
            return 0.0
        return (self.target_size - self.initial_size) * min(event_index, n) / n


def per_event_quota(budget):
    """Parameters added per differentiation pass: ``N / Q * (O - O0)``."""
    if budget.total_steps <= 0 or budget.interval <= 0:
        raise ConfigError("total steps and interval must be positive")
    if budget.target_size < budget.initial_size:
        raise ConfigError(
            f"target size {budget.target_size} is below the initial size {budget.initial_size}")
    return budget.interval / budget.total_steps * (budget.target_size - budget.initial_size)


def select_within_budget(candidates, quota):
    """Longest prefix of ``(replica, size)`` candidates whose cumulative size fits ``quota``."""
    chosen, used = [], 0
    for rep, size in candidates:
        if used + size > quota:
            break
        chosen.append(rep)
        used += size
    return chosen


def flag_and_split(store, probe, quota, step=0, rng=None):
    """Rank multi-task replicas, split the top prefix that fits ``quota`` parameters.

    With ``rng`` given, replicas are ranked in random order and split into a
    random balanced bipartition instead (the random-sharing baseline).
    """
    if quota < 0:
        raise ValueError("quota must be non-negative")
    eligible = [r for r in store.unit_replicas() if len(r.tasks) >= 2]
    scored = [(interference(probe, rep)[0], rep) for rep in eligible]
    if rng is None:
        scored.sort(key=lambda sr: (-sr[0], sr[1].unit_id, sr[1].replica_id))
    else:
        perm = rng.permutation(len(scored))
        scored = [scored[i] for i in perm]
    size_of = {u: unit.param_count for u, unit in store.units.items()}
    chosen = select_within_budget([(sr, size_of[sr[1].unit_id]) for sr in scored], quota)

    events = []
    for score, rep in chosen:
        if rng is None:
            partition, _ = best_bipartition(probe, rep)
        else:
            partition = random_balanced_bipartition(sorted(rep.tasks), rng)
        before = store.total_params()
        children = store.rebind(rep.unit_id, rep.replica_id, partition, step)
        events.append(DifferentiationEvent(
            step, rep.unit_id, rep.replica_id, tuple(tuple(sorted(s)) for s in partition),
            tuple(c.replica_id for c in children), score, size_of[rep.unit_id],
            before, store.total_params()))
    return events


def random_balanced_bipartition(tasks, rng):
    tasks = list(tasks)
    perm = rng.permutation(len(tasks))
    half = len(tasks) // 2
    a = sorted(tasks[i] for i in perm[:half])
    b = sorted(tasks[i] for i in perm[half:])
    if tasks[0] not in a:
        a, b = b, a
    return tuple(a), tuple(b)

