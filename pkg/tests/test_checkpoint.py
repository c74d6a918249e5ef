import json

import numpy as np
import pytest

from conftest import tiny_config
from paramdiff import checkpoint
from paramdiff.model import build_model
from paramdiff.optim import Adam, AdamState


def split_store():
    store, views = build_model(tiny_config(), ("a", "b", "c"), seed=4)
    u = next(iter(store.units))
    store.rebind(u, views["a"][u], (("a",), ("b", "c")), step=5)
    return store


def test_store_round_trip_is_bit_exact(tmp_path):
    store = split_store()
    opt = Adam(lr=0.01)
    for r in store.all_replicas():
        opt.states[r.replica_id] = AdamState(np.random.default_rng(r.replica_id).random(r.size),
                                             np.random.default_rng(r.replica_id + 100).random(r.size), 3)
    path = str(tmp_path / "c.npz")
    checkpoint.save_store_file(path, store, opt)
    loaded, header = checkpoint.load_store(path)
    assert loaded.views == store.views
    assert loaded.next_replica_id == store.next_replica_id
    for a, b in zip(store.all_replicas(), loaded.all_replicas()):
        assert (a.replica_id, a.unit_id, a.tasks, a.parent_replica_id, a.created_at_step) == \
               (b.replica_id, b.unit_id, b.tasks, b.parent_replica_id, b.created_at_step)
        assert a.params.tobytes() == b.params.tobytes()
    opt2 = checkpoint.restore_optimizer(Adam(), header, checkpoint.read(path)[1])
    for rid, st in opt.states.items():
        assert st.m.tobytes() == opt2.states[rid].m.tobytes()
        assert st.step_count == opt2.states[rid].step_count


def test_header_is_self_describing(tmp_path):
    path = str(tmp_path / "c.npz")
    checkpoint.save_store_file(path, split_store())
    header, arrays = checkpoint.read(path)
    assert header["format"] == checkpoint.FORMAT and header["version"] == checkpoint.VERSION
    assert header["model_config"]["d_model"] == 8
    assert set(header["units"]) and all(k.startswith("replica/") for k in arrays)


def test_rejects_wrong_version(tmp_path):
    path = str(tmp_path / "c.npz")
    header, arrays = checkpoint.save_store(split_store())
    header["version"] = 99
    checkpoint.write(path, header, arrays)
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.read(path)


def test_rejects_foreign_file(tmp_path):
    path = str(tmp_path / "x.npz")
    payload = np.frombuffer(json.dumps({"format": "other"}).encode(), dtype=np.uint8)
    np.savez(path, header=payload)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read(path)
