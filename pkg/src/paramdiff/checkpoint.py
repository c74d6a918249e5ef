"""Self-describing checkpoint container.

A single ``.npz`` file: a JSON header (format name, version, configs, unit
table, replica metadata, task views, optimizer and RNG state, counters) stored
as UTF-8 bytes under ``header``, plus raw float64 arrays ``replica/<id>``,
``adam_m/<id>`` and ``adam_v/<id>``.  Loading restores bit-identical values.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .criterion import DifferentiationEvent
from .model import ModelConfig, Replica, TaskViewTable
from .optim import AdamState

FORMAT = "paramdiff-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _replica_meta(rep):
    return {"id": rep.replica_id, "unit": rep.unit_id, "parent": rep.parent_replica_id,
            "tasks": sorted(rep.tasks), "created_at_step": rep.created_at_step}


def save_store(store, optimizer=None, extra=None):
    """Header dict and array dict for a parameter store (and optional optimizer)."""
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": store.config.to_dict(),
        "tasks": list(store.tasks),
        "units": {u: {"param_count": unit.param_count,
                      "layout": {n: [off, list(shape)] for n, (off, shape) in unit.layout.items()}}
                  for u, unit in store.units.items()},
        "replicas": [_replica_meta(r) for r in store.all_replicas()],
        "views": {t: {u: int(r) for u, r in v.items()} for t, v in store.views.to_dict().items()},
        "next_replica_id": store.next_replica_id,
    }
    arrays = {f"replica/{r.replica_id}": r.params for r in store.all_replicas()}
    if optimizer is not None:
        header["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "warmup_steps": optimizer.warmup_steps,
            "clip_norm": optimizer.clip_norm,
            "step_counts": {str(k): st.step_count for k, st in optimizer.states.items()},
        }
        for k, st in optimizer.states.items():
            arrays[f"adam_m/{k}"] = st.m
            arrays[f"adam_v/{k}"] = st.v
    if extra:
        header.update(extra)
    return header, arrays


def write(path, header, arrays):
    payload = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, header=payload, **arrays)
    os.replace(tmp, path)


def read(path):
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(bytes(z["header"]).decode("utf-8"))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: missing or unreadable header") from exc
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "header"}
    return header, arrays


def restore_store(store, header, arrays):
    """Overwrite ``store``'s replicas and views with checkpointed ones."""
    reps = []
    for meta in header["replicas"]:
        params = np.array(arrays[f"replica/{meta['id']}"], dtype=np.float64)
        reps.append(Replica(meta["id"], meta["unit"], frozenset(meta["tasks"]), params,
                            meta["parent"], meta["created_at_step"]))
    store.replace_all(reps, TaskViewTable.from_dict(header["views"]), header["next_replica_id"])
    store.audit()
    return store


def restore_optimizer(optimizer, header, arrays):
    opt = header["optimizer"]
    optimizer.states = {}
    for key, count in opt["step_counts"].items():
        optimizer.states[int(key)] = AdamState(np.array(arrays[f"adam_m/{key}"]),
                                               np.array(arrays[f"adam_v/{key}"]), count)
    return optimizer


def save_store_file(path, store, optimizer=None):
    header, arrays = save_store(store, optimizer)
    write(path, header, arrays)


def load_store(path):
    """Rebuild a ParameterStore (and config) from a checkpoint, without trainer state."""
    from .model import ParameterStore
    header, arrays = read(path)
    cfg = ModelConfig(**header["model_config"])
    store = ParameterStore.build(cfg, header["tasks"], np.random.default_rng(0))
    restore_store(store, header, arrays)
    return store, header


def save_trainer(trainer, path):
    extra = {
        "train_config": trainer.cfg.to_dict(),
        "step": trainer.step,
        "passes": trainer.passes,
        "failures": trainer.failures,
        "truncated": trainer.truncated,
        "initial_params": trainer.initial_params,
        "events": [e.to_record() for e in trainer.events],
        "rng": {
            "sampler": trainer.sampler.rng.bit_generator.state,
            "batch": trainer.batch_rng.bit_generator.state,
            "dropout": trainer.dropout_rng.bit_generator.state,
            "random": trainer.random_rng.bit_generator.state,
        },
    }
    header, arrays = save_store(trainer.store, trainer.optimizer, extra)
    write(path, header, arrays)


def load_trainer(path, data, out_dir=None):
    from .train import TrainConfig, Trainer
    header, arrays = read(path)
    if "train_config" not in header:
        raise CheckpointError(f"{path}: no trainer state")
    mcfg = ModelConfig(**header["model_config"])
    tcfg = TrainConfig(**header["train_config"])
    tr = Trainer(mcfg, tcfg, data, out_dir, _restore=True)
    restore_store(tr.store, header, arrays)
    tr.views = tr.store.views
    restore_optimizer(tr.optimizer, header, arrays)
    tr.step = header["step"]
    tr.passes = header["passes"]
    tr.failures = header["failures"]
    tr.truncated = header["truncated"]
    if header["initial_params"] != tr.initial_params:
        raise CheckpointError(f"{path}: initial size does not match the configuration")
    tr.events = [DifferentiationEvent.from_record(r) for r in header["events"]]
    rng = header["rng"]
    tr.sampler.rng.bit_generator.state = rng["sampler"]
    tr.batch_rng.bit_generator.state = rng["batch"]
    tr.dropout_rng.bit_generator.state = rng["dropout"]
    tr.random_rng.bit_generator.state = rng["random"]
    return tr
