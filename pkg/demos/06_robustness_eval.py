"""Robustness diagnostics on trained models: attacks, flatness, features.

Run:  python3 demos/06_robustness_eval.py   (about a minute)
"""

import numpy as np

from robustcl import datasets as D
from robustcl import evalsuite as E
from robustcl import model as M
from robustcl import trainer as TR
from robustcl.losses import LossParams
from robustcl.perturb import PerturbConfig

SEED = 1
stream = D.split_rings(3, 2, 16, 150, 20, 200, seed=SEED,
                       scale_growth=1.6, center_range=0.0, outlier_fraction=0.25)


def train(method):
    cfg = TR.TrainConfig(
        method=method, epochs=40, batch_size=32, lr=0.05, seed=SEED, eps_th=0.97,
        loss=LossParams(tau=2.0, align_exponent=2.0, lam=0.1, kappa=0.05),
        perturb=PerturbConfig(rho_data=0.05, rho_weight=0.1, mixup_alpha=20.0,
                              phi_range=1e-2, phi_epochs=5))
    net = M.make_mlp(16, [64, 64], seed=SEED)
    TR.run_sequence(cfg, stream, net)
    return net


nets = {m: train(m) for m in ("gpm", "rcl")}

print("adversarial accuracy sweep (mean over tasks):")
print(f"{'mu':>8} {'gpm':>8} {'rcl':>8}")
for mu in (0.0, 1e-3, 1e-2, 3e-2, 5e-2):
    accs = [E.fgsm_sweep(nets[m], stream, [mu])[0]["accuracy"] for m in ("gpm", "rcl")]
    print(f"{mu:8.3f} {accs[0]:8.2f} {accs[1]:8.2f}")

print("\nworst-case flatness at xi=0.05 on the first task (clean validation split):")
for m, net in nets.items():
    value = E.worst_case_flatness(net, stream[0], xi=0.05, split="val").value
    print(f"  {m}: {value:.4f}   (smaller = flatter)")

print("\nrandom landscape slice, mean loss over 10 directions:")
probe = E.FlatnessProbe(mode="random_slice", directions=10,
                        spans=(-1.0, -0.5, 0.0, 0.5, 1.0))
for m, net in nets.items():
    rows = E.landscape_slice(net, stream[0], probe, seed=0)
    by_span = {}
    for row in rows:
        by_span.setdefault(row["span"], []).append(row["loss"])
    curve = "  ".join(f"{s:+.1f}:{np.mean(v):.3f}" for s, v in sorted(by_span.items()))
    print(f"  {m}: {curve}")

print("\ninput-perturbation gradient probe on task 2 (past heads exist):")
x, y = stream[2].test
probe_result = E.abnormal_gradient_probe(
    nets["gpm"], x[:32], stream[2].local_labels(y)[:32], 0.05, 2)
print(f"  grad norm clean {probe_result.grad_norm_clean:.3f} -> "
      f"perturbed {probe_result.grad_norm_perturbed:.3f}")
print(f"  past-head logit delta {probe_result.past_logit_delta:+.4f}, "
      f"true-class logit delta {probe_result.current_logit_delta:+.4f}")

print("\n2-D hypersphere feature export (first 3 rows per method):")
for m, net in nets.items():
    rows, meta = E.export_features(net, x[:200], y[:200], 2)
    head = ", ".join(f"({r['x']:+.2f},{r['y']:+.2f},{r['angle']:+.2f})" for r in rows[:3])
    print(f"  {m} [{meta['projection']}]: {head}")
