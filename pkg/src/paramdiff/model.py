"""Tiny transformer encoder-decoder whose parameters are partitioned into
differentiation units, each owning one or more task-bound replicas.

Parameter names are dotted paths such as
``encoder.layer-0.self-attention.value-projection.weight``.  The unit a
parameter belongs to is a prefix of its name whose depth depends on the
granularity (layer: 2 components, module: 3, operation: 4).  Embedding and
output projection are permanently shared and never differentiate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import ConfigError, Tape, Var, padding_bias, sinusoidal_positions

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NUM_SPECIAL = 4

SHARED_ID = 0


class Granularity(str, enum.Enum):
    LAYER = "layer"
    MODULE = "module"
    OPERATION = "operation"

    @property
    def depth(self):
        return {"layer": 2, "module": 3, "operation": 4}[self.value]


class IntegrityError(RuntimeError):
    """Raised when replicas or task views stop partitioning the task set."""


@dataclass
class ModelConfig:
    num_layers_enc: int = 2
    num_layers_dec: int = 2
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    vocab_size: int = 64
    max_len: int = 16
    granularity: Granularity = Granularity.OPERATION
    dropout: float = 0.0
    label_smoothing: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        dims = (self.num_layers_enc, self.num_layers_dec, self.d_model, self.d_ff,
                self.heads, self.vocab_size, self.max_len)
        if min(dims) < 1:
            raise ConfigError(f"all model dimensions must be >= 1, got {dims}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("dropout and label_smoothing must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["granularity"] = self.granularity.value
        return d

    @classmethod
    def transformer_base(cls, **overrides):
        """The 6+6 layer, 512/2048, 8-head preset with dropout and smoothing 0.1."""
        kw = dict(num_layers_enc=6, num_layers_dec=6, d_model=512, d_ff=2048, heads=8,
                  vocab_size=64000, max_len=256, dropout=0.1, label_smoothing=0.1)
        kw.update(overrides)
        return cls(**kw)


def parameter_shapes(cfg):
    """Ordered ``(name, shape)`` pairs for every trainable parameter."""
    d, f = cfg.d_model, cfg.d_ff
    out = [("embedding.weight", (cfg.vocab_size, d))]

    def attention(prefix):
        for p in ("query", "key", "value", "output"):
            out.append((f"{prefix}.{p}-projection.weight", (d, d)))
            out.append((f"{prefix}.{p}-projection.bias", (d,)))
        out.append((f"{prefix}.layer-norm.gain", (d,)))
        out.append((f"{prefix}.layer-norm.bias", (d,)))

    def feed_forward(prefix):
        out.append((f"{prefix}.linear-1.weight", (d, f)))
        out.append((f"{prefix}.linear-1.bias", (f,)))
        out.append((f"{prefix}.linear-2.weight", (f, d)))
        out.append((f"{prefix}.linear-2.bias", (d,)))
        out.append((f"{prefix}.layer-norm.gain", (d,)))
        out.append((f"{prefix}.layer-norm.bias", (d,)))

    for i in range(cfg.num_layers_enc):
        attention(f"encoder.layer-{i}.self-attention")
        feed_forward(f"encoder.layer-{i}.feed-forward")
    for i in range(cfg.num_layers_dec):
        attention(f"decoder.layer-{i}.self-attention")
        attention(f"decoder.layer-{i}.cross-attention")
        feed_forward(f"decoder.layer-{i}.feed-forward")
    out.append(("output-projection.weight", (d, cfg.vocab_size)))
    out.append(("output-projection.bias", (cfg.vocab_size,)))
    return out


def unit_of(name, granularity):
    """Unit id owning parameter ``name``, or None for permanently shared parameters."""
    parts = name.split(".")
    if parts[0] not in ("encoder", "decoder"):
        return None
    return ".".join(parts[: Granularity(granularity).depth])


def layer_of(unit_id):
    """``("encoder", 0)`` for any unit inside encoder layer 0."""
    side, layer = unit_id.split(".")[:2]
    return side, int(layer.split("-")[1])


def _init_param(name, shape, rng, d_model):
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name == "embedding.weight":
        return rng.normal(0.0, d_model ** -0.5, size=shape)
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Replica:
    replica_id: int
    unit_id: str
    tasks: frozenset
    params: np.ndarray
    parent_replica_id: int | None = None
    created_at_step: int = 0

    @property
    def size(self):
        return self.params.size


@dataclass
class DifferentiationUnit:
    unit_id: str
    granularity: Granularity
    layout: dict  # parameter name -> (offset, shape)
    param_count: int
    replicas: dict = field(default_factory=dict)  # replica_id -> Replica (live only)


class TaskViewTable:
    """Per-task map ``unit_id -> replica_id``; defines each task's computation graph."""

    def __init__(self, tasks, units=()):
        self.table = {t: {u: None for u in units} for t in tasks}

    def __getitem__(self, task):
        try:
            return self.table[task]
        except KeyError:
            raise KeyError(f"unknown task {task!r}") from None

    def __eq__(self, other):
        return isinstance(other, TaskViewTable) and self.table == other.table

    @property
    def tasks(self):
        return tuple(self.table)

    def to_dict(self):
        return {t: dict(v) for t, v in self.table.items()}

    @classmethod
    def from_dict(cls, d):
        view = cls(())
        view.table = {t: dict(v) for t, v in d.items()}
        return view


def _layout(names_shapes):
    layout, offset = {}, 0
    for name, shape in names_shapes:
        layout[name] = (offset, tuple(shape))
        offset += int(np.prod(shape))
    return layout, offset


class ParameterStore:
    """All trainable parameters: one shared block plus per-unit replicas."""

    def __init__(self, config, tasks):
        if not tasks:
            raise ConfigError("at least one task is required")
        self.config = config
        self.tasks = tuple(sorted(tasks))
        self.units = {}
        self.shared = None
        self.shared_layout = {}
        self.replicas = {}
        self.views = TaskViewTable(self.tasks)
        self.next_replica_id = 1
        self._leaf_cache = {}
        self._pos = sinusoidal_positions(config.max_len + 1, config.d_model)

    # --- construction -------------------------------------------------------

    @classmethod
    def build(cls, config, tasks, rng):
        store = cls(config, tasks)
        values = {n: _init_param(n, s, rng, config.d_model) for n, s in parameter_shapes(config)}
        shared, grouped = [], {}
        for name, shape in parameter_shapes(config):
            u = unit_of(name, config.granularity)
            if u is None:
                shared.append((name, shape))
            else:
                grouped.setdefault(u, []).append((name, shape))
        store.shared_layout, n_shared = _layout(shared)
        block = np.concatenate([values[n].ravel() for n, _ in shared])
        store.shared = Replica(SHARED_ID, "shared", frozenset(store.tasks), block)
        assert block.size == n_shared
        for u, items in grouped.items():
            layout, count = _layout(items)
            unit = DifferentiationUnit(u, config.granularity, layout, count)
            block = np.concatenate([values[n].ravel() for n, _ in items])
            rep = store._new_replica(u, frozenset(store.tasks), block, None, 0)
            unit.replicas[rep.replica_id] = rep
            store.units[u] = unit
        store.views = TaskViewTable(store.tasks, store.units)
        for t in store.tasks:
            for u, unit in store.units.items():
                store.views[t][u] = next(iter(unit.replicas))
        return store

    def _new_replica(self, unit_id, tasks, params, parent, step):
        rep = Replica(self.next_replica_id, unit_id, frozenset(tasks), params, parent, step)
        self.replicas[rep.replica_id] = rep
        self.next_replica_id += 1
        return rep

    # --- queries ------------------------------------------------------------

    @property
    def shared_param_count(self):
        return self.shared.size

    def total_params(self):
        return self.shared.size + sum(u.param_count * len(u.replicas) for u in self.units.values())

    def initial_params(self):
        return self.shared.size + sum(u.param_count for u in self.units.values())

    def max_unit_size(self):
        return max(u.param_count for u in self.units.values())

    def unit_replicas(self):
        """Live unit replicas in (unit order, replica id) order."""
        for unit in self.units.values():
            for rid in sorted(unit.replicas):
                yield unit.replicas[rid]

    def task_replicas(self, task):
        """Replica ids in ``task``'s view (shared block included)."""
        return [SHARED_ID] + [self.views[task][u] for u in self.units]

    def all_replicas(self):
        return [self.shared] + list(self.unit_replicas())

    def leaves(self, task):
        """Name -> parameter array view used by ``task``.  Cached until the next rebind."""
        cached = self._leaf_cache.get(task)
        if cached is not None:
            return cached
        view = self.views[task]
        out = {}
        for name, (off, shape) in self.shared_layout.items():
            out[name] = self.shared.params[off: off + int(np.prod(shape))].reshape(shape)
        for u, unit in self.units.items():
            rep = self.replicas[view[u]]
            for name, (off, shape) in unit.layout.items():
                out[name] = rep.params[off: off + int(np.prod(shape))].reshape(shape)
        self._leaf_cache[task] = out
        return out

    def gather_grads(self, task, grads):
        """Pack per-name gradients into flat per-replica gradient vectors."""
        view = self.views[task]
        out = {SHARED_ID: self._pack(self.shared_layout, self.shared.size, grads)}
        for u, unit in self.units.items():
            out[view[u]] = self._pack(unit.layout, unit.param_count, grads)
        return out

    @staticmethod
    def _pack(layout, size, grads):
        parts = []
        for name, (off, shape) in layout.items():
            g = grads.get(name)
            parts.append(np.zeros(int(np.prod(shape))) if g is None else g.ravel())
        return np.concatenate(parts) if len(parts) > 1 else parts[0].copy()

    # --- mutation -------------------------------------------------------------

    def rebind(self, unit_id, parent_id, partition, step=0):
        """Replace replica ``parent_id`` of ``unit_id`` by one copy per task subset.

        Children are bit-identical copies of the parent; the parent is retired.
        Returns the new replicas in partition order.
        """
        unit = self.units[unit_id]
        parent = unit.replicas.get(parent_id)
        if parent is None:
            raise IntegrityError(f"replica {parent_id} is not live in unit {unit_id}")
        sides = [frozenset(s) for s in partition]
        union = frozenset().union(*sides)
        if (any(not s for s in sides) or union != parent.tasks
                or sum(len(s) for s in sides) != len(parent.tasks)):
            raise IntegrityError(
                f"{unit_id}: {[sorted(s) for s in sides]} does not partition {sorted(parent.tasks)}")
        children = []
        for s in sides:
            child = self._new_replica(unit_id, s, parent.params.copy(), parent_id, step)
            unit.replicas[child.replica_id] = child
            for t in s:
                self.views[t][unit_id] = child.replica_id
            children.append(child)
        del unit.replicas[parent_id]
        del self.replicas[parent_id]
        self._leaf_cache.clear()
        return children

    def audit(self):
        """Check partition and view-consistency invariants; raise IntegrityError if broken."""
        full = frozenset(self.tasks)
        for u, unit in self.units.items():
            seen = []
            for rid, rep in unit.replicas.items():
                if not rep.tasks:
                    raise IntegrityError(f"{u}: replica {rid} has no tasks")
                if rep.size != unit.param_count:
                    raise IntegrityError(f"{u}: replica {rid} has wrong size")
                seen.extend(rep.tasks)
            if len(seen) != len(set(seen)) or frozenset(seen) != full:
                raise IntegrityError(f"{u}: replica task sets do not partition {sorted(full)}")
            for t in self.tasks:
                rid = self.views[t].get(u)
                if rid not in unit.replicas or t not in unit.replicas[rid].tasks:
                    raise IntegrityError(f"view of {t!r} on {u} is inconsistent")
        if set(self.views.tasks) != set(self.tasks):
            raise IntegrityError("task view table does not cover the task set")
        return True

    def replace_all(self, replicas, views, next_replica_id):
        """Install replicas and views read from a checkpoint."""
        for unit in self.units.values():
            unit.replicas = {}
        self.replicas = {}
        for rep in replicas:
            if rep.unit_id == "shared":
                self.shared = rep
            else:
                self.units[rep.unit_id].replicas[rep.replica_id] = rep
                self.replicas[rep.replica_id] = rep
        self.views = views
        self.next_replica_id = next_replica_id
        self._leaf_cache.clear()

    def positions(self, length):
        if length > self._pos.shape[0]:
            self._pos = sinusoidal_positions(length, self.config.d_model)
        return self._pos[:length]


def build_model(config, tasks, seed=0):
    """Completely shared model: every unit has one replica bound to all tasks."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParameterStore.build(config, tasks, rng)
    return store, store.views


# ---------------------------------------------------------------- forward pass


@dataclass
class Batch:
    task: str
    src: np.ndarray      # (B, S) int, task token first, PAD-padded
    tgt_in: np.ndarray   # (B, T) int, BOS first
    tgt_out: np.ndarray  # (B, T) int, EOS last, PAD-padded
    truncated: int = 0

    @property
    def num_tokens(self):
        return int(max(self.src.size, self.tgt_out.size))


def _attention_block(tape, P, prefix, x, mem, heads, causal, key_padding, drop, eps):
    W = [P[f"{prefix}.{n}-projection.weight"] for n in ("query", "key", "value")]
    b = [P[f"{prefix}.{n}-projection.bias"] for n in ("query", "key", "value")]
    if mem is None:
        qkv = tape.packed_linear(x, W, b)
        a = tape.packed_attention(qkv, None, heads, causal, key_padding, drop)
    else:
        q = tape.linear(x, W[0], b[0])
        kv = tape.packed_linear(mem, W[1:], b[1:])
        a = tape.packed_attention(q, kv, heads, causal, key_padding, drop)
    a = tape.linear(a, P[f"{prefix}.output-projection.weight"], P[f"{prefix}.output-projection.bias"])
    a = tape.dropout(a, drop)
    return tape.layer_norm(tape.add(x, a), P[f"{prefix}.layer-norm.gain"],
                           P[f"{prefix}.layer-norm.bias"], eps)


def _ffn_block(tape, P, prefix, x, drop, eps):
    h = tape.relu(tape.linear(x, P[f"{prefix}.linear-1.weight"], P[f"{prefix}.linear-1.bias"]))
    h = tape.dropout(h, drop)
    h = tape.linear(h, P[f"{prefix}.linear-2.weight"], P[f"{prefix}.linear-2.bias"])
    h = tape.dropout(h, drop)
    return tape.layer_norm(tape.add(x, h), P[f"{prefix}.layer-norm.gain"],
                           P[f"{prefix}.layer-norm.bias"], eps)


def bind_leaves(store, task, tape):
    """Register the task's parameters on ``tape`` as leaf variables."""
    tape.leaves = {n: Var(a, requires_grad=tape.record) for n, a in store.leaves(task).items()}
    return tape.leaves


def encode(store, task, src, tape, train=False):
    cfg = store.config
    P = tape.leaves if getattr(tape, "leaves", None) else bind_leaves(store, task, tape)
    drop = cfg.dropout if train else 0.0
    src_pad = padding_bias(src == PAD)
    x = tape.embedding(P["embedding.weight"], src, np.sqrt(cfg.d_model),
                       store.positions(src.shape[1]))
    x = tape.dropout(x, drop)
    for i in range(cfg.num_layers_enc):
        x = _attention_block(tape, P, f"encoder.layer-{i}.self-attention", x, None, cfg.heads,
                             False, src_pad, drop, cfg.ln_eps)
        x = _ffn_block(tape, P, f"encoder.layer-{i}.feed-forward", x, drop, cfg.ln_eps)
    return x, src_pad


def decode(store, task, memory, src_pad, tgt_in, tape, train=False):
    cfg = store.config
    P = tape.leaves
    drop = cfg.dropout if train else 0.0
    y = tape.embedding(P["embedding.weight"], tgt_in, np.sqrt(cfg.d_model),
                       store.positions(tgt_in.shape[1]))
    y = tape.dropout(y, drop)
    for i in range(cfg.num_layers_dec):
        y = _attention_block(tape, P, f"decoder.layer-{i}.self-attention", y, None, cfg.heads,
                             True, None, drop, cfg.ln_eps)
        y = _attention_block(tape, P, f"decoder.layer-{i}.cross-attention", y, memory, cfg.heads,
                             False, src_pad, drop, cfg.ln_eps)
        y = _ffn_block(tape, P, f"decoder.layer-{i}.feed-forward", y, drop, cfg.ln_eps)
    return tape.linear(y, P["output-projection.weight"], P["output-projection.bias"])


def forward(store, task, batch, tape=None, train=False):
    """Logits (B, T, V) for ``batch`` through ``task``'s view, plus the tape."""
    if task not in store.views.table:
        raise KeyError(f"unknown task {task!r}")
    if batch.src.max(initial=0) >= store.config.vocab_size or \
            batch.tgt_in.max(initial=0) >= store.config.vocab_size:
        raise IndexError("batch token id exceeds vocab_size")
    tape = Tape() if tape is None else tape
    bind_leaves(store, task, tape)
    memory, src_pad = encode(store, task, batch.src, tape, train)
    return decode(store, task, memory, src_pad, batch.tgt_in, tape, train), tape


def batch_loss(store, task, batch, tape=None, train=False, label_smoothing=None):
    logits, tape = forward(store, task, batch, tape, train)
    eps = store.config.label_smoothing if label_smoothing is None else label_smoothing
    loss = tape.softmax_cross_entropy(logits, batch.tgt_out, eps, ignore_index=PAD)
    return loss, tape


def loss_and_grads(store, task, batch, rng=None, train=True, label_smoothing=None):
    """Scalar loss and flat gradients keyed by replica id for ``task``'s view."""
    tape = Tape(record=True, rng=rng)
    loss, tape = batch_loss(store, task, batch, tape, train, label_smoothing)
    leaves = tape.leaves
    tape.backward(loss)
    grads = {n: v.grad for n, v in leaves.items() if v.grad is not None}
    return float(loss.value), store.gather_grads(task, grads)


def greedy_decode(store, task, src, max_len=None):
    """Greedy decoding of a (B, S) source batch; returns (B, L) token ids."""
    max_len = max_len or store.config.max_len
    tape = Tape(record=False)
    bind_leaves(store, task, tape)
    memory, src_pad = encode(store, task, src, tape)
    out = np.full((src.shape[0], 1), BOS, dtype=np.int64)
    done = np.zeros(src.shape[0], dtype=bool)
    for _ in range(max_len):
        logits = decode(store, task, memory, src_pad, out, tape)
        nxt = logits.value[:, -1].argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    return out[:, 1:]
