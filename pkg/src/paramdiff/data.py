"""Synthetic sequence-transduction task families and toy parallel-corpus loading.

Every task maps a sequence of content symbols to another sequence through a
deterministic bijection (copy, reverse, shift, vocabulary permutation or a
composition of these).  Tasks that share a family use near transforms, so a
ground-truth clustering of tasks is known.  Validation and test sets are
multi-way aligned: every task sees the same underlying sequences.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .model import NUM_SPECIAL, UNK
from .tensor import ConfigError


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Transform:
    kind: str
    shift: int = 0
    perm: tuple = ()
    steps: tuple = ()

    def __call__(self, seq, content_size):
        seq = list(seq)
        if self.kind == "copy":
            return seq
        if self.kind == "reverse":
            return seq[::-1]
        if self.kind == "shift":
            return [(s + self.shift) % content_size for s in seq]
        if self.kind == "permute":
            return [self.perm[s] for s in seq]
        if self.kind == "compose":
            for step in self.steps:
                seq = step(seq, content_size)
            return seq
        raise ConfigError(f"unknown transform {self.kind!r}")

    @classmethod
    def from_dict(cls, d, content_size):
        kind = d["kind"]
        if kind in ("copy", "reverse"):
            return cls(kind)
        if kind == "shift":
            return cls(kind, shift=int(d["k"]))
        if kind == "permute":
            if "perm" in d:
                perm = tuple(int(p) for p in d["perm"])
            else:
                perm = small_permutation(content_size, int(d.get("swaps", 1)), int(d.get("seed", 0)))
            if sorted(perm) != list(range(content_size)):
                raise ConfigError("permute transform needs a permutation of the content symbols")
            return cls(kind, perm=perm)
        if kind == "compose":
            return cls(kind, steps=tuple(cls.from_dict(s, content_size) for s in d["steps"]))
        raise ConfigError(f"unknown transform {kind!r}")

    def to_dict(self):
        if self.kind == "shift":
            return {"kind": "shift", "k": self.shift}
        if self.kind == "permute":
            return {"kind": "permute", "perm": list(self.perm)}
        if self.kind == "compose":
            return {"kind": "compose", "steps": [s.to_dict() for s in self.steps]}
        return {"kind": self.kind}


def small_permutation(n, swaps, seed):
    """Identity on ``n`` symbols with ``swaps`` disjoint random transpositions."""
    rng = np.random.default_rng(seed)
    perm = list(range(n))
    picks = rng.permutation(n)[: 2 * swaps]
    for a, b in zip(picks[0::2], picks[1::2]):
        perm[a], perm[b] = perm[b], perm[a]
    return tuple(perm)


@dataclass
class TaskSpec:
    task_id: str
    transform: Transform
    family_id: str
    dataset_size: int = 2000
    min_len: int = 3
    max_len: int = 10


@dataclass
class MultiWayValidationSet:
    """Per-task pairs built from one shared list of underlying sequences."""

    sequences: list                              # underlying symbol sequences
    pairs: dict = field(default_factory=dict)    # task -> list of (src ids, tgt ids)

    def __len__(self):
        return len(self.sequences)


@dataclass
class TaskData:
    tasks: tuple
    train: dict                     # task -> list of (src ids, tgt ids)
    valid: MultiWayValidationSet
    test: MultiWayValidationSet
    families: dict                  # task -> family id
    vocab_size: int


def content_offset(num_tasks):
    return NUM_SPECIAL + num_tasks


def generate(specs, seed, vocab_size=64, valid_size=64, test_size=200):
    """Train/validation/test pairs for every spec; a pure function of its arguments.

    Token ids: specials first, then one target-task token per task, then content
    symbols.  Validation and test sequences never occur in any training set.
    """
    specs = sorted(specs, key=lambda s: s.task_id)
    tasks = tuple(s.task_id for s in specs)
    if len(set(tasks)) != len(tasks):
        raise ConfigError("duplicate task ids")
    offset = content_offset(len(tasks))
    content = vocab_size - offset
    if content < 2:
        raise ConfigError(f"vocab_size={vocab_size} leaves no room for content symbols")
    lo = min(s.min_len for s in specs)
    hi = max(s.max_len for s in specs)
    root = np.random.SeedSequence(seed)
    held_seed, *task_seeds = root.spawn(1 + len(specs))

    rng = np.random.default_rng(held_seed)
    held, seen = [], set()
    while len(held) < valid_size + test_size:
        seq = tuple(int(x) for x in rng.integers(0, content, rng.integers(lo, hi + 1)))
        if seq not in seen:
            seen.add(seq)
            held.append(seq)

    def encode(seq):
        return tuple(s + offset for s in seq)

    def pairs_for(spec, seqs):
        out = []
        for seq in seqs:
            out.append((encode(seq), encode(spec.transform(seq, content))))
        return out

    valid = MultiWayValidationSet(held[:valid_size])
    test = MultiWayValidationSet(held[valid_size:])
    train = {}
    for spec, ss in zip(specs, task_seeds):
        r = np.random.default_rng(ss)
        seqs = []
        while len(seqs) < spec.dataset_size:
            seq = tuple(int(x) for x in r.integers(0, content, r.integers(spec.min_len, spec.max_len + 1)))
            if seq in seen:
                continue
            if len(spec.transform(seq, content)) > spec.max_len:
                continue
            seqs.append(seq)
        train[spec.task_id] = pairs_for(spec, seqs)
        valid.pairs[spec.task_id] = pairs_for(spec, valid.sequences)
        test.pairs[spec.task_id] = pairs_for(spec, test.sequences)
    return TaskData(tasks, train, valid, test, {s.task_id: s.family_id for s in specs}, vocab_size)


def two_family_suite(dataset_size=2000, swaps=4, min_len=3, max_len=10, vocab_size=64):
    """Copy-like versus reverse-like: four tasks in two designed families."""
    content = vocab_size - content_offset(4)
    p1 = Transform("permute", perm=small_permutation(content, swaps, 1))
    p2 = Transform("permute", perm=small_permutation(content, swaps, 2))
    rev = Transform("reverse")
    kw = dict(dataset_size=dataset_size, min_len=min_len, max_len=max_len)
    return [
        TaskSpec("copy", Transform("copy"), "copy-like", **kw),
        TaskSpec("copy-perm", p1, "copy-like", **kw),
        TaskSpec("reverse", rev, "reverse-like", **kw),
        TaskSpec("reverse-perm", Transform("compose", steps=(rev, p2)), "reverse-like", **kw),
    ]


# ----------------------------------------------------------------- real text


@dataclass
class Vocab:
    tokens: list                 # content tokens in id order
    tasks: tuple
    level: str = "char"

    @property
    def offset(self):
        return content_offset(len(self.tasks))

    @property
    def size(self):
        return self.offset + len(self.tokens)

    def encode(self, text):
        index = {t: i + self.offset for i, t in enumerate(self.tokens)}
        return tuple(index.get(t, UNK) for t in tokenize(text, self.level))


def tokenize(line, level):
    return list(line) if level == "char" else line.split()


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def load_parallel_corpus(path_pairs, vocab_size, level="char"):
    """Tokenize paired text files, one sentence per line.

    ``path_pairs`` maps task -> (source path, target path).  A joint vocabulary
    keeps the most frequent tokens (ties in lexical order); the rest map to UNK.
    Returns ``(datasets, vocab)``.
    """
    texts = {}
    for task in sorted(path_pairs):
        src_path, tgt_path = path_pairs[task]
        src, tgt = _read_lines(src_path), _read_lines(tgt_path)
        if len(src) != len(tgt):
            first = min(len(src), len(tgt)) + 1
            raise CorpusFormatError(
                f"{tgt_path}: {len(tgt)} lines but {src_path} has {len(src)}; "
                f"line {first} has no partner")
        texts[task] = (src, tgt)
    tasks = tuple(sorted(path_pairs))
    counts = Counter()
    for src, tgt in texts.values():
        for line in src + tgt:
            counts.update(tokenize(line, level))
    capacity = vocab_size - content_offset(len(tasks))
    if capacity < 0:
        raise ConfigError(f"vocab_size={vocab_size} too small for {len(tasks)} tasks")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = Vocab([tok for tok, _ in ranked[:capacity]], tasks, level)
    datasets = {t: [(vocab.encode(s), vocab.encode(g)) for s, g in zip(*texts[t])] for t in tasks}
    return datasets, vocab


# ------------------------------------------------------------------ manifest


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def data_from_manifest(manifest, seed, vocab_size, base_dir="."):
    """Build TaskData from a manifest's ``tasks`` list.

    Entries either carry a ``transform`` (synthetic) or ``source``/``target``
    file paths (parallel text; ``valid_fraction`` of lines are held out).
    """
    entries = manifest["tasks"]
    if all("transform" in e for e in entries):
        content = vocab_size - content_offset(len(entries))
        specs = [TaskSpec(e["id"], Transform.from_dict(e["transform"], content),
                          e.get("family", e["id"]), int(e.get("size", 2000)),
                          int(e.get("min_len", 3)), int(e.get("max_len", 10))) for e in entries]
        return generate(specs, seed, vocab_size, int(manifest.get("valid_size", 64)),
                        int(manifest.get("test_size", 200)))
    if any("transform" in e for e in entries):
        raise ConfigError("a manifest cannot mix synthetic and file-backed tasks")
    pairs = {e["id"]: (os.path.join(base_dir, e["source"]), os.path.join(base_dir, e["target"]))
             for e in entries}
    datasets, vocab = load_parallel_corpus(pairs, vocab_size, manifest.get("level", "char"))
    n_hold = int(manifest.get("valid_size", 64))
    n_test = int(manifest.get("test_size", 64))
    # multi-way alignment assumes line i of every task is a translation of the same sentence
    n = min(len(v) for v in datasets.values())
    if n < n_hold + n_test + 1:
        raise ConfigError(f"corpus too small: {n} aligned lines for {n_hold}+{n_test} held out")
    valid = MultiWayValidationSet(list(range(n_hold)))
    test = MultiWayValidationSet(list(range(n_hold, n_hold + n_test)))
    train = {}
    for t, pairs_t in datasets.items():
        valid.pairs[t] = pairs_t[:n_hold]
        test.pairs[t] = pairs_t[n_hold:n_hold + n_test]
        train[t] = pairs_t[n_hold + n_test:]
    families = {e["id"]: e.get("family", e["id"]) for e in entries}
    return TaskData(tuple(sorted(datasets)), train, valid, test, families, vocab.size)
