#!/usr/bin/env python
# coding: utf-8

# # Learning a linear embedding of a planar attractor
#
# The system below has a slow direction and a fast one, and the fast coordinate
# is pulled toward a parabola. Two observables evolve exactly linearly along its
# flow: the first coordinate itself, and the distance from that parabola. We
# train an encoder/decoder pair with a stable generator and compare what it
# finds against those two observables.

import numpy as np

from stablekoopman import (analytic_reference_fixed_point, eigenfunctions, fixed_point_system,
                           koopman_spectrum, lhs_sample, make_diff_dataset, predict_map, train_map)

EPOCHS = 1000

# ## Data
#
# Derivatives are known in closed form, so a space-filling sample of states is
# enough. No trajectories are integrated.

X = lhs_sample([(-0.5, 0.5), (-0.5, 0.5)], 1600, seed=0)
data = make_diff_dataset(fixed_point_system(), X)
print(f"{len(data)} states, derivative range {np.ptp(data.Xdot, axis=0)}")

# ## Training
#
# The generator starts from a DMD fit on an SVD basis of the states, so the
# networks only have to learn the nonlinear correction.

model, losses = train_map({"layers": "2-8-16-16-8-2-8-16-16-8-2", "epochs": EPOCHS, "learning_rate": 1e-3},
                          data)
print(f"loss {losses[0]:.3e} -> {losses[-1]:.3e}")
print("learned eigenvalues:", np.round(np.sort(koopman_spectrum(model).real), 4))

# ## Eigenfunctions
#
# Learned eigenfunctions are only defined up to scale, so we compare them by
# correlation on a grid.

g = np.linspace(-0.5, 0.5, 50)
P = np.stack([a.ravel() for a in np.meshgrid(g, g)], axis=1)
lam, vals = eigenfunctions(model, P)
_, reference = analytic_reference_fixed_point(-0.05, -1.0)
for target, f in reference.items():
    k = int(np.argmin(np.abs(lam - target)))
    r = np.corrcoef(vals[:, k].real, f(P))[0, 1]
    print(f"eigenvalue near {target:+.2f}: learned {lam[k].real:+.4f}, |corr| {abs(r):.4f}")

# ## Rollout
#
# Prediction is a matrix exponential in the latent space followed by decoding.

times = np.linspace(0, 40, 9)
path = predict_map(model, [0.4, -0.4], times)
for t, x in zip(times, path):
    print(f"t={t:5.1f}  x=({x[0]:+.4f}, {x[1]:+.4f})")
