"""Criterion-based splitting against the two baselines, one seed at a time.

Each variant trains the same desk model on the same data for the same number
of steps; only the use of the size budget differs.  Prints final held-out
loss, size and leaf purity, then the split tree of the most divided unit.

    python3 demos/desk_experiment.py [seed] [steps]
"""

import sys
import tempfile

from paramdiff import report
from paramdiff.experiment import VARIANTS, desk_data, run_conflict

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 20000

out = tempfile.mkdtemp(prefix="paramdiff-desk-")
print(f"{'variant':<8}{'loss':>10}{'params':>10}{'events':>8}{'purity':>8}{'secs':>7}")
for variant in VARIANTS:
    r = run_conflict(seed, variant, f"{out}/{variant}", total_steps=steps)
    print(f"{variant:<8}{r.loss:>10.4f}{r.param_count:>10}{r.events:>8}{r.purity:>8.3f}"
          f"{r.seconds:>7.0f}")

data = desk_data(seed)
events = report.read_event_log(f"{out}/none/events.jsonl")
if events:
    counts = {}
    for ev in events:
        counts[ev.unit_id] = counts.get(ev.unit_id, 0) + 1
    unit = max(sorted(counts), key=counts.get)
    print()
    print(report.render_lineage(unit, report.lineage(unit, events, data.tasks), data.families))
print(f"logs and checkpoints under {out}")
