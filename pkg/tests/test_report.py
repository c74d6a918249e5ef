import json

import numpy as np
import pytest

from conftest import tiny_config
from paramdiff import report
from paramdiff.criterion import DifferentiationEvent
from paramdiff.model import ModelConfig, build_model
from paramdiff.report import SharingConfiguration

TASKS = ("a", "b", "c", "d")
FAMILIES = {"a": "x", "b": "x", "c": "y", "d": "y"}


def event(step, unit, parent, sides, children):
    return DifferentiationEvent(step, unit, parent, tuple(tuple(s) for s in sides), tuple(children), 0.5)


def test_fully_shared_layer_counts():
    conf = SharingConfiguration.initial(ModelConfig(), TASKS)
    assert conf.layer_counts() == [("encoder", 0, 8, 0), ("encoder", 1, 8, 0),
                                   ("decoder", 0, 13, 0), ("decoder", 1, 13, 0)]
    assert report.layers_csv(conf).splitlines()[0] == "side,layer,units,specialized"


def test_one_split_in_encoder_layer_zero():
    store, views = build_model(ModelConfig(), TASKS)
    u = "encoder.layer-0.feed-forward.linear-2"
    store.rebind(u, views["a"][u], (("a", "b"), ("c", "d")))
    conf = SharingConfiguration.from_store(store)
    counts = {(s, l): spec for s, l, _, spec in conf.layer_counts()}
    assert counts == {("encoder", 0): 1, ("encoder", 1): 0, ("decoder", 0): 0, ("decoder", 1): 0}


def test_replay_equals_store_and_counts_match_log():
    cfg = tiny_config()
    store, views = build_model(cfg, TASKS)
    units = list(store.units)
    events = []
    for i, u in enumerate(units[:3] + units[:1]):
        rep = store.replicas[views["a"][u]]
        sides = (("a", "b"), ("c", "d")) if len(rep.tasks) == 4 else (("a",), ("b",))
        kids = store.rebind(u, rep.replica_id, sides, step=10 * i)
        events.append(event(10 * i, u, rep.replica_id, sides, [k.replica_id for k in kids]))
    replayed = SharingConfiguration.from_events(cfg, TASKS, events)
    assert replayed == SharingConfiguration.from_store(store)
    assert sum(r[3] for r in replayed.layer_counts()) == len({e.unit_id for e in events})


def test_sharing_matrix_symmetric_with_unit_count_diagonal():
    store, views = build_model(tiny_config(), TASKS)
    u = next(iter(store.units))
    store.rebind(u, views["a"][u], (("a", "c"), ("b", "d")))
    conf = SharingConfiguration.from_store(store)
    S = conf.sharing_matrix()
    n = len(store.units)
    assert (S == S.T).all() and (np.diag(S) == n).all()
    assert S[0, 2] == n and S[0, 1] == n - 1
    lines = report.sharing_csv(conf).splitlines()
    assert lines[0] == "task,a,b,c,d" and lines[1].split(",")[1:] == [str(v) for v in S[0]]


def test_lineage_no_events_single_node():
    root = report.lineage("u", [], TASKS)
    assert root.children == [] and root.tasks == frozenset(TASKS)
    assert report.family_purity([n.tasks for n in root.leaves()], {t: "x" for t in TASKS}) == 1.0
    assert report.family_purity([n.tasks for n in root.leaves()], FAMILIES) == 0.0


def test_lineage_three_leaves():
    events = [event(400, "u", 7, ("ab", "cd"), [50, 51]), event(800, "u", 50, ("a", "b"), [60, 61]),
              event(800, "v", 8, ("abc", "d"), [62, 63])]
    root = report.lineage("u", events, TASKS)
    leaves = root.leaves()
    assert [sorted(n.tasks) for n in leaves] == [["a"], ["b"], ["c", "d"]]
    assert root.replica_id == 7 and [n.replica_id for n in leaves] == [60, 61, 51]
    text = report.render_lineage("u", root, FAMILIES)
    assert "[61] {b} step 800" in text and text.endswith("purity 1.0000\n")


def test_purity_matches_hand_count():
    events = [event(400, "u", 1, ("ab", "cd"), [9, 10]), event(400, "v", 2, ("abc", "d"), [11, 12]),
              event(800, "v", 11, ("ab", "c"), [13, 14])]
    leaves = report.differentiated_leaves(events, TASKS)
    # u: {a,b} {c,d}; v: {a,b} {c} {d}  -> all five leaves pure
    assert report.family_purity(leaves, FAMILIES) == 1.0
    events[1] = event(400, "v", 2, ("ac", "bd"), [11, 12])
    events[2] = event(800, "v", 11, ("a", "c"), [13, 14])
    leaves = report.differentiated_leaves(events, TASKS)
    # u: 2 pure; v: {b,d} impure, {a}, {c} pure -> 4/5
    assert report.family_purity(leaves, FAMILIES) == pytest.approx(0.8)


def test_lineage_rejects_orphan_event():
    events = [event(1, "u", 1, ("ab", "cd"), [2, 3]), event(2, "u", 99, ("a", "b"), [4, 5])]
    with pytest.raises(report.LogParseError):
        report.lineage("u", events, TASKS)


def test_event_log_parse_errors_name_line(tmp_path):
    good = json.dumps(event(1, "u", 1, ("ab", "cd"), [2, 3]).to_record())
    p = tmp_path / "events.jsonl"
    p.write_text(good + "\n" + "{not json\n")
    with pytest.raises(report.LogParseError, match="line 2"):
        report.read_event_log(str(p))
    p.write_text(good + "\n\n" + json.dumps({"step": 3}) + "\n")
    with pytest.raises(report.LogParseError, match="line 3.*missing"):
        report.read_event_log(str(p))
    p.write_text(good + "\n")
    assert report.read_event_log(str(p))[0].child_replica_ids == (2, 3)


def test_replay_rejects_inconsistent_log():
    conf = SharingConfiguration.initial(tiny_config(), TASKS)
    with pytest.raises(report.LogParseError):
        conf.apply(event(1, "encoder.layer-0.self-attention.query-projection", 1, ("ab", "c"), [90, 91]))
    with pytest.raises(report.LogParseError):
        conf.apply(event(1, "nope", 1, ("ab", "cd"), [90, 91]))


def test_sweep_csv_sorted():
    text = report.sweep_csv([(2.0, 0.5, 200), (1.0, 0.75, 100), (1.5, 0.6, 150)])
    assert text.splitlines() == ["ratio,final_loss,param_count", "1,0.750000,100",
                                 "1.5,0.600000,150", "2,0.500000,200"]
