"""Where do the four synthetic tasks disagree?

Trains a fully shared model for a few hundred steps, probes every task's
gradient on the aligned validation sentences, and prints, for the most
conflicted units, the task cosine matrix and the split the criterion picks.

    python3 demos/probe_conflict.py [steps]
"""

import sys

import numpy as np

from paramdiff import criterion
from paramdiff.experiment import desk_data
from paramdiff.model import ModelConfig
from paramdiff.train import TrainConfig, Trainer

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
data = desk_data(seed=0)
tr = Trainer(ModelConfig(), TrainConfig(total_steps=steps, diff_interval=steps, baseline="shared",
                                        batch_tokens=64), data)
tr.run()
print(f"held-out loss after {steps} shared steps: {tr.evaluate().mean_loss:.3f}")

probe = criterion.probe_gradients(tr.store, tr.probe_batches, tr.step)
rows = sorted(criterion.report(probe, tr.store), key=lambda r: -r.interference)

np.set_printoptions(precision=2, suppress=True)
for r in rows[:4]:
    tasks, vecs = probe.vectors(tr.store.replicas[r.replica_id])
    print(f"\n{r.unit_id}  interference {r.interference:.3f}  worst pair {r.worst_pair}")
    print("  " + "  ".join(f"{t:>12}" for t in tasks))
    for t, row in zip(tasks, criterion.cosine_matrix(vecs)):
        print(f"  {t:>12}" + "".join(f"{c:14.2f}" for c in row))
    a, b = r.best_partition
    print(f"  split: {{{', '.join(a)}}} | {{{', '.join(b)}}}")

same = [r.best_partition for r in rows]
by_family = sum(all(len({data.families[t] for t in side}) == 1 for side in p) for p in same)
print(f"\n{by_family} of {len(same)} units would split along the designed families")
