import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import tiny_config
from paramdiff.criterion import (EXHAUSTIVE_LIMIT, BudgetConfig, GradientProbe, ProbeError,
                                 bipartition_from_vectors, cosine_matrix, flag_and_split,
                                 interference_from_vectors, per_event_quota, probe_gradients,
                                 random_balanced_bipartition, report, select_within_budget)
from paramdiff.model import Batch, build_model
from paramdiff.tensor import ConfigError, central_difference, relative_error


def test_parallel_and_opposed():
    assert interference_from_vectors(["a", "b"], [[1, 0], [2, 0]])[0] == pytest.approx(-1.0)
    assert interference_from_vectors(["a", "b"], [[1, 0], [-1, 0]])[0] == pytest.approx(1.0)


def test_three_task_example():
    vecs = [[1, 0], [0.8, 0.6], [-1, 0]]
    score, pair = interference_from_vectors(["a", "b", "c"], vecs)
    assert score == pytest.approx(1.0) and pair == ("a", "c")
    C = cosine_matrix(vecs)
    np.testing.assert_allclose([C[0, 1], C[0, 2], C[1, 2]], [0.8, -1.0, -0.8], atol=1e-15)
    (a, b), s = bipartition_from_vectors(["a", "b", "c"], vecs)
    assert (a, b) == (("a", "b"), ("c",))
    assert s == pytest.approx(-1.8)


def test_two_tasks_forced_split():
    part, score = bipartition_from_vectors(["b", "a"], [[1, 2], [3, -1]])
    assert part == (("a",), ("b",)) and score == -2.0


def test_antipodal_pairs_grouped():
    tasks = ["w", "x", "y", "z"]
    vecs = [[1, 0], [-1, 0], [2, 0], [-3, 0]]
    part, score = bipartition_from_vectors(tasks, vecs)
    assert part == (("w", "y"), ("x", "z"))
    assert score == pytest.approx(-2.0)


def test_zero_vector_is_neutral(caplog):
    with caplog.at_level(logging.WARNING):
        score, _ = interference_from_vectors(["a", "b", "c"], [[0, 0], [1, 0], [1, 0]])
    assert score == pytest.approx(0.0)
    assert "zero-norm" in caplog.text


def test_interference_needs_two_tasks():
    with pytest.raises(ValueError):
        interference_from_vectors(["a"], [[1.0]])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_matches_brute_force(n, dim, seed):
    rng = np.random.default_rng(seed)
    tasks = [f"t{i}" for i in range(n)]
    vecs = rng.normal(size=(n, dim))
    score, pair = interference_from_vectors(tasks, list(vecs))
    assert abs(score - oracles.interference(vecs.tolist())) < 1e-12
    j, k = tasks.index(pair[0]), tasks.index(pair[1])
    assert abs(-oracles.cosine(vecs[j], vecs[k]) - score) < 1e-12
    part, pscore = bipartition_from_vectors(tasks, list(vecs))
    ref_part, ref_score = oracles.best_bipartition(dict(zip(tasks, vecs.tolist())))
    assert abs(pscore - ref_score) < 1e-12
    assert part == ref_part


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2 ** 32 - 1), st.floats(1e-6, 1e6))
def test_scale_invariance(n, seed, c):
    rng = np.random.default_rng(seed)
    tasks = [f"t{i}" for i in range(n)]
    vecs = rng.normal(size=(n, 5))
    scaled = vecs.copy()
    scaled[rng.integers(n)] *= c
    s1, p1 = interference_from_vectors(tasks, list(vecs))
    s2, p2 = interference_from_vectors(tasks, list(scaled))
    assert p1 == p2 and abs(s1 - s2) < 1e-12
    b1, q1 = bipartition_from_vectors(tasks, list(vecs))
    b2, q2 = bipartition_from_vectors(tasks, list(scaled))
    assert b1 == b2 and abs(q1 - q2) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 7), st.integers(0, 2 ** 32 - 1))
def test_relabeling_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    tasks = [f"t{i}" for i in range(n)]
    vecs = rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    s1, pair1 = interference_from_vectors(tasks, list(vecs))
    s2, pair2 = interference_from_vectors([tasks[i] for i in perm], [vecs[i] for i in perm])
    assert abs(s1 - s2) < 1e-12 and set(pair1) == set(pair2)
    assert bipartition_from_vectors(tasks, list(vecs))[0] == \
        bipartition_from_vectors([tasks[i] for i in perm], [vecs[i] for i in perm])[0]


def test_heuristic_beyond_exhaustive_limit():
    rng = np.random.default_rng(0)
    n = EXHAUSTIVE_LIMIT + 3
    tasks = [f"t{i:02d}" for i in range(n)]
    base = rng.normal(size=6)
    vecs = [(base if i % 2 == 0 else -base) + 0.05 * rng.normal(size=6) for i in range(n)]
    (a, b), score = bipartition_from_vectors(tasks, vecs)
    assert a == tuple(tasks[0::2]) and b == tuple(tasks[1::2])
    assert score < -1.9


# ---------------------------------------------------------------- budget


def test_quota_examples():
    assert per_event_quota(BudgetConfig(1.0e6, 2.0e6, 400000, 8000)) == pytest.approx(20000)
    assert BudgetConfig(1.0e6, 2.0e6, 400000, 8000).num_events == 50
    assert per_event_quota(BudgetConfig(1000, 1000, 100, 10)) == 0
    assert per_event_quota(BudgetConfig(1000, 1600, 100, 10)) == pytest.approx(60)


def test_quota_rejects_shrinking_target():
    with pytest.raises(ConfigError):
        per_event_quota(BudgetConfig(1000, 900, 100, 10))


def test_allowed_growth_reaches_target():
    b = BudgetConfig(1000, 1600, 100, 10)
    assert [b.allowed_growth(e) for e in (1, 5, 10, 11)] == pytest.approx([60, 300, 600, 600])


def test_select_within_budget_is_prefix():
    cands = [("x", 100), ("y", 100), ("z", 10)]
    assert select_within_budget(cands, 100) == ["x"]
    assert select_within_budget(cands, 99) == []
    assert select_within_budget(cands, 210) == ["x", "y", "z"]


# ------------------------------------------------------- flag and split


def fake_probe(store, rng):
    probe = GradientProbe()
    for rep in store.unit_replicas():
        for t in rep.tasks:
            probe.grads[(rep.replica_id, t)] = rng.normal(size=rep.size)
    return probe


def test_flag_and_split_ranking_oracle(rng):
    store, views = build_model(tiny_config(), ("a", "b", "c", "d"))
    probe = fake_probe(store, rng)
    sizes = {u: unit.param_count for u, unit in store.units.items()}
    k = 2.5 * max(sizes.values())
    ranked = sorted(store.unit_replicas(),
                    key=lambda r: (-oracles.interference([probe.grads[(r.replica_id, t)]
                                                         for t in sorted(r.tasks)]),
                                   r.unit_id, r.replica_id))
    expected, used = [], 0
    for r in ranked:
        if used + sizes[r.unit_id] > k:
            break
        expected.append(r.replica_id)
        used += sizes[r.unit_id]
    before = store.total_params()
    events = flag_and_split(store, probe, k, step=3)
    assert [e.parent_replica_id for e in events] == expected
    assert before <= store.total_params() <= before + k
    store.audit()
    for e in events:
        ref, _ = oracles.best_bipartition({t: probe.grads[(e.parent_replica_id, t)]
                                           for t in ("a", "b", "c", "d")})
        assert e.partition == ref


def test_flag_and_split_two_units_example():
    # unit 1 has opposed task gradients, unit 2 nearly aligned ones; the quota covers one unit
    store, views = build_model(tiny_config(d_model=4, d_ff=4), ("a", "b"))
    probe = GradientProbe()
    reps = list(store.unit_replicas())
    for i, rep in enumerate(reps):
        g = np.zeros(rep.size)
        g[0] = 1.0
        h = -g if i == 1 else g.copy()
        if i == 2:
            h[1] = 1.0
        probe.grads[(rep.replica_id, "a")] = g
        probe.grads[(rep.replica_id, "b")] = h
    size = store.units[reps[1].unit_id].param_count
    events = flag_and_split(store, probe, size)
    assert [e.unit_id for e in events] == [reps[1].unit_id]
    assert events[0].interference_at_split == pytest.approx(1.0)


def test_zero_quota_no_events(rng):
    store, _ = build_model(tiny_config(), ("a", "b"))
    assert flag_and_split(store, fake_probe(store, rng), 0) == []


def test_negative_quota_rejected(rng):
    store, _ = build_model(tiny_config(), ("a", "b"))
    with pytest.raises(ValueError):
        flag_and_split(store, fake_probe(store, rng), -1)


def test_flag_and_split_is_deterministic(rng):
    results = []
    for _ in range(2):
        store, _ = build_model(tiny_config(), ("a", "b", "c"), seed=1)
        probe = fake_probe(store, np.random.default_rng(9))
        results.append([e.to_record() for e in flag_and_split(store, probe, 400)])
    assert results[0] == results[1]


def test_random_split_is_balanced():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_balanced_bipartition(["a", "b", "c", "d", "e"], rng)
        assert "a" in a and {len(a), len(b)} == {2, 3}
        assert set(a) | set(b) == set("abcde")


# ---------------------------------------------------------------- probing


def probe_batch(task, tok):
    src = np.array([[tok, 9, 10, 11, 2], [tok, 12, 9, 2, 0]])
    tin = np.array([[1, 11, 10, 9], [1, 9, 12, 0]])
    tout = np.array([[11, 10, 9, 2], [9, 12, 2, 0]])
    return Batch(task, src, tin, tout)


def test_probe_identical_tasks_give_identical_vectors():
    store, _ = build_model(tiny_config(), ("a", "b"))
    probe = probe_gradients(store, {"a": probe_batch("a", 5), "b": probe_batch("b", 5)})
    for rep in store.unit_replicas():
        assert np.array_equal(probe.grads[(rep.replica_id, "a")], probe.grads[(rep.replica_id, "b")])


def test_probe_binding_rule():
    store, views = build_model(tiny_config(), ("a", "b"))
    u = next(iter(store.units))
    ca, cb = store.rebind(u, views["a"][u], (("a",), ("b",)))
    probe = probe_gradients(store, {"a": probe_batch("a", 4), "b": probe_batch("b", 5)})
    assert (ca.replica_id, "a") in probe.grads and (ca.replica_id, "b") not in probe.grads
    assert (cb.replica_id, "b") in probe.grads and (cb.replica_id, "a") not in probe.grads
    for (rid, _), g in probe.grads.items():
        assert g.size == store.replicas[rid].size


def test_probe_matches_finite_differences():
    from paramdiff.model import batch_loss
    from paramdiff.tensor import Tape
    cfg = tiny_config(d_model=4, d_ff=4, heads=1, vocab_size=16)
    store, _ = build_model(cfg, ("a", "b"), seed=2)
    batches = {"a": probe_batch("a", 4), "b": probe_batch("b", 5)}
    probe = probe_gradients(store, batches)
    for rep in list(store.unit_replicas())[:6]:
        num = central_difference(
            lambda: float(batch_loss(store, "b", batches["b"], Tape(record=False))[0].value),
            rep.params)
        assert relative_error(probe.grads[(rep.replica_id, "b")], num) < 1e-4


def test_probe_requires_every_task():
    store, _ = build_model(tiny_config(), ("a", "b"))
    with pytest.raises(ProbeError):
        probe_gradients(store, {"a": probe_batch("a", 4)})


def test_report_covers_shared_replicas(rng):
    store, views = build_model(tiny_config(), ("a", "b", "c"))
    u = next(iter(store.units))
    store.rebind(u, views["a"][u], (("a",), ("b", "c")))
    probe = fake_probe(store, rng)
    rows = report(probe, store)
    assert len(rows) == len(store.units)
    for r in rows:
        assert -1.0 <= r.interference <= 1.0
        a, b = r.best_partition
        assert a and b
