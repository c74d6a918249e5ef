"""Independent reference implementations used only by tests."""

import itertools
import math


def cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * y for x, y in zip(u, v)) / (nu * nv)


def interference(vectors):
    """Max over unordered pairs of the negative cosine; -1 for fewer than two vectors."""
    if len(vectors) < 2:
        return -1.0
    return max(-cosine(vectors[j], vectors[k])
               for j, k in itertools.combinations(range(len(vectors)), 2))


def bipartitions(tasks):
    """Every unordered nontrivial two-way split, first side holding the smallest task."""
    tasks = sorted(tasks)
    first, rest = tasks[0], tasks[1:]
    for r in range(len(rest)):
        for extra in itertools.combinations(rest, r):
            a = (first, *extra)
            b = tuple(t for t in tasks if t not in a)
            yield a, b


def best_bipartition(grads):
    """Exhaustive argmin of summed interference, ties to the lexicographically smallest first side."""
    best = None
    for a, b in bipartitions(grads):
        score = interference([grads[t] for t in a]) + interference([grads[t] for t in b])
        if best is None or (score, a) < (best[1], best[0][0]):
            best = ((a, b), score)
    return best
