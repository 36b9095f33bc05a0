"""Three trainers on the same task stream: plain SGD forgets, projection holds.

Run:  python3 demos/05_continual_run.py   (about a minute)
"""

import numpy as np

from robustcl import datasets as D
from robustcl import model as M
from robustcl import trainer as TR
from robustcl.losses import LossParams
from robustcl.perturb import PerturbConfig

SEED = 1
stream = D.split_rings(3, 2, 16, 150, 20, 200, seed=SEED,
                       scale_growth=1.6, center_range=0.0, outlier_fraction=0.25)
print("tasks:", [(t.task_id, t.class_ids) for t in stream])

records = {}
for method in ("naive", "gpm", "rcl"):
    cfg = TR.TrainConfig(
        method=method, epochs=40, batch_size=32, lr=0.05, seed=SEED, eps_th=0.97,
        loss=LossParams(tau=2.0, align_exponent=2.0, lam=0.1, kappa=0.05),
        perturb=PerturbConfig(rho_data=0.05, rho_weight=0.1, mixup_alpha=20.0,
                              phi_range=1e-2, phi_epochs=5))
    net = M.make_mlp(16, [64, 64], seed=SEED)
    record, memory = TR.run_sequence(cfg, stream, net)
    records[method] = record
    print(f"\n=== {method} ===")
    for row in record.accuracy_matrix:
        print("  " + "  ".join(f"{v:5.1f}" for v in row))
    bwt = "n/a" if record.bwt is None else f"{record.bwt:+.2f}"
    print(f"  ACC {record.acc:.2f}   BWT {bwt}")
    if record.gpm_ranks:
        print("  memory ranks:", record.gpm_ranks[-1]["ranks"])

print("\nsummary (accuracy on task 0 after each stage):")
for method, record in records.items():
    first = [row[0] for row in record.accuracy_matrix]
    print(f"  {method:5s}: " + " -> ".join(f"{v:.1f}" for v in first))
