"""Worst-case mixing coefficients and weight perturbations, step by step.

Run:  python3 demos/03_worst_case_perturbations.py
"""

import numpy as np

from robustcl import model as M
from robustcl import perturb as P
from robustcl.losses import LossParams, one_hot

rng = np.random.default_rng(2)

net = M.make_mlp(4, [16], seed=0)
net.add_head(0, 2)
net.params["layer0.bias"] += 0.3  # keep every relu row alive for the demo

x = rng.normal(size=(8, 4))
y = one_hot(rng.integers(0, 2, size=8), 2)
perm = rng.permutation(8)
params = LossParams(tau=2.0, align_exponent=2.0, lam=0.1, kappa=0.5)
cfg = P.PerturbConfig(rho_data=0.05, rho_weight=0.05, mixup_alpha=20.0,
                      phi_range=1e-3, phi_epochs=3)

# --- mixup draws a coefficient near 1/2 for alpha = 20 ------------------------
gamma = P.sample_gamma(cfg.mixup_alpha, rng)
pair = P.mixup(x, y, x[perm], y[perm], gamma)
print(f"drawn mixing coefficient: {gamma:.4f}")

# --- both perturbations from one forward pass ---------------------------------
data_pert, weight_pert = P.worst_case_pair(net, 0, pair, params, cfg)
print(f"coefficient step: {data_pert.epsilon_hat:+.3f} -> perturbed gamma "
      f"{data_pert.gamma_hat:.4f} (clamped into [0,1])")
norm = np.sqrt(sum(float((v * v).sum()) for v in weight_pert.upsilon.values()))
print(f"weight perturbation norm: {norm:.6f} (radius {cfg.rho_weight})")

# --- the perturbed loss really is worse ---------------------------------------
base = P.combined_loss(net, 0, pair, params)
at = {n: net.params[n] + weight_pert.upsilon[n] for n in weight_pert.upsilon}
print(f"loss at W:        {base:.6f}")
print(f"loss at W + ups:  {P.combined_loss(net, 0, pair, params, at=at):.6f}")

# --- the robust gradient is taken at the perturbed weights ---------------------
remixed = P.mixup(x, y, x[perm], y[perm], data_pert.gamma_hat)
grads = P.robust_gradient(net, weight_pert.upsilon, 0, remixed, params)
gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
print(f"robust gradient norm: {gnorm:.4f}")

# --- pretraining the random weight perturbation --------------------------------
pre = P.robust_pretrain_phi(net, cfg, tau=2.0, lr=0.05, seed=7)
shift = max(float(np.abs(pre.params[n] - net.params[n]).max()) for n in net.params)
print(f"largest coordinate shift after pretraining: {shift:.2e} "
      f"(bounded by |eps| * {cfg.phi_range})")
