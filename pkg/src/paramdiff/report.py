"""Post-hoc analysis of training artifacts: layer counts, lineage trees, sharing matrices.

Every report is a pure function of its inputs, so re-running it on the same
files yields byte-identical text.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .criterion import DifferentiationEvent
from .model import layer_of, parameter_shapes, unit_of

EVENT_KEYS = ("step", "unit", "parent", "partition", "children")


class LogParseError(ValueError):
    pass


def read_event_log(path):
    """Parse an ``events.jsonl`` file; malformed lines raise LogParseError naming the line."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(f"{path}: line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise LogParseError(f"{path}: line {lineno}: expected a JSON object")
            missing = [k for k in EVENT_KEYS if k not in rec]
            if missing:
                raise LogParseError(f"{path}: line {lineno}: missing field(s) {', '.join(missing)}")
            try:
                ev = DifferentiationEvent.from_record(rec)
            except (TypeError, ValueError) as exc:
                raise LogParseError(f"{path}: line {lineno}: {exc}") from None
            if len(ev.partition) != 2 or len(ev.child_replica_ids) != 2:
                raise LogParseError(f"{path}: line {lineno}: a split needs two sides and two children")
            events.append(ev)
    return events


def unit_ids(model_cfg):
    """Differentiation unit ids in registry order."""
    out = []
    for name, _ in parameter_shapes(model_cfg):
        u = unit_of(name, model_cfg.granularity)
        if u is not None and u not in out:
            out.append(u)
    return out


@dataclass
class SharingConfiguration:
    """Which tasks share which replica, per unit."""

    tasks: tuple
    units: dict = field(default_factory=dict)  # unit_id -> {replica_id: frozenset(tasks)}

    @classmethod
    def initial(cls, model_cfg, tasks):
        """Fully shared layout as built by the registry (unit replicas numbered from 1)."""
        tasks = tuple(sorted(tasks))
        units = {u: {i: frozenset(tasks)} for i, u in enumerate(unit_ids(model_cfg), 1)}
        return cls(tasks, units)

    @classmethod
    def from_store(cls, store):
        return cls(store.tasks, {u: {rid: rep.tasks for rid, rep in unit.replicas.items()}
                                 for u, unit in store.units.items()})

    @classmethod
    def from_events(cls, model_cfg, tasks, events):
        conf = cls.initial(model_cfg, tasks)
        for ev in events:
            conf.apply(ev)
        return conf

    def apply(self, event):
        reps = self.units.get(event.unit_id)
        if reps is None:
            raise LogParseError(f"event at step {event.step} names unknown unit {event.unit_id!r}")
        parent = reps.get(event.parent_replica_id)
        sides = [frozenset(s) for s in event.partition]
        if parent is None:
            raise LogParseError(f"event at step {event.step}: replica {event.parent_replica_id} "
                                f"is not live in {event.unit_id}")
        if sides[0] | sides[1] != parent or sides[0] & sides[1] or not all(sides):
            raise LogParseError(f"event at step {event.step}: partition does not split "
                                f"{sorted(parent)}")
        del reps[event.parent_replica_id]
        for rid, side in zip(event.child_replica_ids, sides):
            reps[rid] = side

    def __eq__(self, other):
        return (isinstance(other, SharingConfiguration) and self.tasks == other.tasks
                and self.units == other.units)

    def replica_count(self, unit_id):
        return len(self.units[unit_id])

    def sharing_matrix(self):
        """``S[j, k]`` = number of units on which tasks j and k use the same replica."""
        index = {t: i for i, t in enumerate(self.tasks)}
        S = np.zeros((len(self.tasks), len(self.tasks)), dtype=np.int64)
        for reps in self.units.values():
            for group in reps.values():
                idx = [index[t] for t in group]
                S[np.ix_(idx, idx)] += 1
        return S

    def layer_counts(self):
        """Rows ``(side, layer, units, specialized)`` in encoder-then-decoder order."""
        rows = {}
        for u, reps in self.units.items():
            key = layer_of(u)
            total, spec = rows.get(key, (0, 0))
            rows[key] = (total + 1, spec + (len(reps) > 1))
        order = sorted(rows, key=lambda k: (k[0] != "encoder", k[1]))
        return [(side, layer, *rows[(side, layer)]) for side, layer in order]


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def layers_csv(conf):
    return _csv(["side", "layer", "units", "specialized"], conf.layer_counts())


def sharing_csv(conf):
    S = conf.sharing_matrix()
    return _csv(["task", *conf.tasks], [[t, *map(int, S[i])] for i, t in enumerate(conf.tasks)])


# ------------------------------------------------------------------- lineage


@dataclass
class LineageNode:
    replica_id: int
    tasks: frozenset
    step: int = 0
    children: list = field(default_factory=list)

    def leaves(self):
        if not self.children:
            return [self]
        return [leaf for c in self.children for leaf in c.leaves()]


def lineage(unit_id, events, tasks, root_id=None):
    """Split tree of one unit replayed from the event log.

    The root holds every task.  A unit that never differentiated is a single node.
    """
    root = LineageNode(root_id, frozenset(tasks))
    nodes = {}
    for ev in events:
        if ev.unit_id != unit_id:
            continue
        if not nodes:
            root.replica_id = ev.parent_replica_id
            nodes[root.replica_id] = root
        parent = nodes.get(ev.parent_replica_id)
        if parent is None:
            raise LogParseError(f"event at step {ev.step}: replica {ev.parent_replica_id} of "
                                f"{unit_id} has no recorded origin")
        for rid, side in zip(ev.child_replica_ids, ev.partition):
            child = LineageNode(rid, frozenset(side), ev.step)
            parent.children.append(child)
            nodes[rid] = child
    return root


def family_purity(task_sets, families):
    """Fraction of task sets lying inside a single family."""
    task_sets = list(task_sets)
    if not task_sets:
        return 1.0
    pure = sum(len({families[t] for t in s}) == 1 for s in task_sets)
    return pure / len(task_sets)


def differentiated_leaves(events, tasks):
    """Leaf task sets of every unit that split at least once."""
    out = []
    for u in sorted({ev.unit_id for ev in events}):
        out.extend(leaf.tasks for leaf in lineage(u, events, tasks).leaves())
    return out


def render_lineage(unit_id, root, families=None):
    lines = [f"unit {unit_id}"]

    def walk(node, depth):
        rid = "?" if node.replica_id is None else node.replica_id
        lines.append(f"{'  ' * depth}[{rid}] {{{', '.join(sorted(node.tasks))}}} step {node.step}")
        for c in node.children:
            walk(c, depth + 1)

    walk(root, 1)
    leaves = root.leaves()
    lines.append(f"leaves {len(leaves)}")
    if families is not None:
        lines.append(f"purity {family_purity([n.tasks for n in leaves], families):.4f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- sweep


def sweep_csv(rows):
    """``rows`` of (ratio, final loss, param count), written in ascending ratio order."""
    rows = sorted(rows, key=lambda r: r[0])
    return _csv(["ratio", "final_loss", "param_count"],
                [[f"{r:g}", f"{loss:.6f}", int(n)] for r, loss, n in rows])
