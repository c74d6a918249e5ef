"""Command-line entry points: ``paramdiff train | report-layers | report-lineage |
report-sharing | sweep-size``.

Run configs are JSON with three optional sections::

    {"model": {...ModelConfig fields...},
     "train": {...TrainConfig fields...},
     "data":  {"suite": "two-family", "seed": 0}    # or a manifest with a "tasks" list
    }
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import report
from .checkpoint import CheckpointError, load_store
from .data import CorpusFormatError, data_from_manifest, generate, two_family_suite
from .model import Granularity, ModelConfig
from .tensor import ConfigError
from .train import TrainConfig, train

OUT_DIR_ENV = "PARAMDIFF_OUT_DIR"
SUITES = {"two-family": two_family_suite}


class UsageError(Exception):
    """Bad input from the command line; exit code 2."""


def load_config(path):
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = set(cfg) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return cfg


def build_data(data_cfg, vocab_size, base_dir="."):
    data_cfg = dict(data_cfg or {"suite": "two-family"})
    seed = int(data_cfg.pop("seed", 0))
    if "tasks" in data_cfg:
        return data_from_manifest(data_cfg, seed, vocab_size, base_dir)
    suite = data_cfg.pop("suite", "two-family")
    if suite not in SUITES:
        raise ConfigError(f"unknown task suite {suite!r}; known: {sorted(SUITES)}")
    valid = int(data_cfg.pop("valid_size", 64))
    test = int(data_cfg.pop("test_size", 200))
    specs = SUITES[suite](vocab_size=vocab_size, **data_cfg)
    return generate(specs, seed, vocab_size, valid, test)


def _resolve(cfg, args, base_dir):
    model = dict(cfg.get("model", {}))
    tr = dict(cfg.get("train", {}))
    if getattr(args, "granularity", None):
        model["granularity"] = args.granularity
    if getattr(args, "seed", None) is not None:
        tr["seed"] = args.seed
    if getattr(args, "size_ratio", None) is not None:
        tr["target_size_ratio"] = args.size_ratio
    if getattr(args, "sampling", None):
        tr["sampling"] = args.sampling
    if getattr(args, "baseline", None):
        tr["baseline"] = args.baseline
    try:
        model_cfg = ModelConfig(**model)
        train_cfg = TrainConfig(**tr)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    data = build_data(cfg.get("data"), model_cfg.vocab_size, base_dir)
    return model_cfg, train_cfg, data


def _out_dir(args):
    return args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs"


def _run(model_cfg, train_cfg, data, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                   "tasks": list(data.tasks), "families": data.families}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return train(model_cfg, train_cfg, data, out_dir)


def cmd_train(args):
    cfg = load_config(args.config)
    model_cfg, train_cfg, data = _resolve(cfg, args, os.path.dirname(os.path.abspath(args.config)))
    out = _out_dir(args)
    res = _run(model_cfg, train_cfg, data, out)
    print(f"steps {train_cfg.total_steps}  events {len(res.events)}  "
          f"params {res.param_count} (initial {res.trainer.initial_params})  "
          f"held-out loss {res.final.mean_loss:.4f}  -> {out}")
    return 0


def _load_conf(args):
    store, header = load_store(args.checkpoint)
    conf = report.SharingConfiguration.from_store(store)
    if getattr(args, "events", None):
        events = report.read_event_log(args.events)
        replayed = report.SharingConfiguration.from_events(store.config, store.tasks, events)
        if replayed != conf:
            raise report.LogParseError(
                f"{args.events} does not reproduce the sharing layout of {args.checkpoint}")
    return conf


def _emit(text, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_report_layers(args):
    _emit(report.layers_csv(_load_conf(args)), args.output)
    return 0


def cmd_report_sharing(args):
    _emit(report.sharing_csv(_load_conf(args)), args.output)
    return 0


def _families(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "families" in doc:            # run.json written by ``train``
        return dict(doc["families"])
    data = doc.get("data", doc)
    if "tasks" in data:
        return {e["id"]: e.get("family", e["id"]) for e in data["tasks"]}
    suite = data.get("suite", "two-family")
    if suite not in SUITES:
        raise ConfigError(f"unknown task suite {suite!r}")
    return {s.task_id: s.family_id for s in SUITES[suite]()}


def cmd_report_lineage(args):
    events = report.read_event_log(args.events)
    families = _families(args.manifest) if args.manifest else None
    if args.checkpoint:
        store, _ = load_store(args.checkpoint)
        tasks, units = store.tasks, list(store.units)
    elif args.tasks:
        tasks, units = tuple(sorted(args.tasks.split(","))), None
    elif families:
        tasks, units = tuple(sorted(families)), None
    else:
        raise UsageError("report-lineage needs --checkpoint, --tasks or --manifest to know the task set")
    chosen = args.unit or sorted({ev.unit_id for ev in events})
    if not chosen:
        if not units:
            raise UsageError("no events in the log; name a unit with --unit")
        chosen = [units[0]]
    parts, leaves = [], []
    for u in chosen:
        root = report.lineage(u, events, tasks)
        parts.append(report.render_lineage(u, root, families))
        leaves.extend(n.tasks for n in root.leaves())
    if families is not None and len(chosen) > 1:
        parts.append(f"overall purity {report.family_purity(leaves, families):.4f} "
                     f"over {len(leaves)} leaves\n")
    _emit("\n".join(parts), args.output)
    return 0


def cmd_sweep_size(args):
    cfg = load_config(args.config)
    try:
        ratios = sorted(float(r) for r in args.ratios.split(","))
    except ValueError:
        raise UsageError(f"--ratios must be comma-separated numbers, got {args.ratios!r}") from None
    if any(r < 1.0 for r in ratios):
        raise ConfigError("size ratios must be >= 1")
    base = _out_dir(args)
    rows = []
    for r in ratios:
        args.size_ratio = r
        model_cfg, train_cfg, data = _resolve(cfg, args, os.path.dirname(os.path.abspath(args.config)))
        res = _run(model_cfg, train_cfg, data, os.path.join(base, f"ratio-{r:g}"))
        rows.append((r, res.final.mean_loss, res.param_count))
    text = report.sweep_csv(rows)
    os.makedirs(base, exist_ok=True)
    with open(os.path.join(base, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _emit(text, args.output)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="paramdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", help=f"default: ${OUT_DIR_ENV} or ./runs")
        sp.add_argument("--granularity", choices=[g.value for g in Granularity])
        sp.add_argument("--sampling", help="uniform or temp:<tau>")
        sp.add_argument("--baseline", choices=["none", "random", "shared"])

    t = sub.add_parser("train", help="train one model")
    run_flags(t)
    t.add_argument("--size-ratio", type=float)
    t.set_defaults(func=cmd_train)

    for name, func, need_events in (("report-layers", cmd_report_layers, True),
                                    ("report-sharing", cmd_report_sharing, False)):
        r = sub.add_parser(name)
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--events", required=need_events,
                       help="event log; checked against the checkpoint")
        r.add_argument("--output")
        r.set_defaults(func=func)

    lin = sub.add_parser("report-lineage")
    lin.add_argument("--events", required=True)
    lin.add_argument("--unit", action="append")
    lin.add_argument("--checkpoint")
    lin.add_argument("--tasks", help="comma-separated task ids")
    lin.add_argument("--manifest", help="config, data manifest or run.json with family labels")
    lin.add_argument("--output")
    lin.set_defaults(func=cmd_report_lineage)

    sw = sub.add_parser("sweep-size")
    run_flags(sw)
    sw.add_argument("--ratios", required=True, help="comma-separated, e.g. 1,1.5,2")
    sw.add_argument("--output")
    sw.set_defaults(func=cmd_sweep_size, size_ratio=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"paramdiff: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"paramdiff: error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, CorpusFormatError, report.LogParseError,
            KeyError, ValueError) as exc:
        print(f"paramdiff: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
