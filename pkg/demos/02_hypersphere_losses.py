"""Uniformity and alignment on the unit sphere, and what they reward.

Run:  python3 demos/02_hypersphere_losses.py
"""

import numpy as np

from robustcl.losses import LossParams, alignment, l_ua, parameter_uniformity, uniformity

rng = np.random.default_rng(1)


def ring(n, jitter=0.0):
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False) + jitter * rng.normal(size=n)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


# --- uniformity prefers spread-out features ----------------------------------
collapsed = np.tile([[1.0, 0.0]], (8, 1))
spread = ring(8)
print(f"uniformity, all features collapsed:  {uniformity(collapsed, 2.0).item():8.4f}")
print(f"uniformity, evenly spread features:  {uniformity(spread, 2.0).item():8.4f}")
print("(lower is more uniform; 0 is the worst possible)")

# --- alignment pulls positive pairs together ---------------------------------
views_a = ring(8)
views_b = ring(8, jitter=0.05)
print(f"alignment of two nearby views:       {alignment(views_a, views_b, 2.0).item():8.4f}")
print(f"alignment of antipodal views:        {alignment(views_a, -views_a, 2.0).item():8.4f}")

# --- the combined mixed-batch objective ---------------------------------------
params = LossParams(tau=2.0, align_exponent=2.0)
f_i = ring(8)
f_j = ring(8, jitter=0.3)
f_mix = f_i + 0.5 * (f_j - f_i)
f_mix /= np.linalg.norm(f_mix, axis=1, keepdims=True)
print(f"mixed-batch uniformity/alignment:    {l_ua(f_i, f_j, f_mix, params).item():8.4f}")

# --- the same idea in parameter space ------------------------------------------
theta = rng.normal(size=(6, 6))
tiny = theta + 1e-4 * rng.standard_normal(theta.shape)
wide = theta + 0.5 * rng.standard_normal(theta.shape)
print(f"parameter uniformity, tiny perturbation: {parameter_uniformity(theta, tiny, 2.0).item():9.6f}")
print(f"parameter uniformity, wide perturbation: {parameter_uniformity(theta, wide, 2.0).item():9.6f}")
print("(pretraining pushes this down, then clips the perturbation scale)")
