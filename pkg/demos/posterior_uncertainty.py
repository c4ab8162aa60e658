#!/usr/bin/env python
# coding: utf-8

# # Posterior uncertainty inside and outside the training domain
#
# Mean-field variational inference over the generator, the skip maps and the
# network weights gives an ensemble of models. Under the differential form,
# latent noise turns each model into an Ornstein-Uhlenbeck process, so the
# predictive spread combines parameter and process uncertainty.

import numpy as np

from stablekoopman import (duffing_system, eigenfunctions, fixed_point_system, lhs_sample, make_diff_dataset,
                           predict_posterior_diff, sample_posterior, summarize, train_vi)

# ## More data, less spread
#
# We train on growing samples of the planar attractor and report the average
# predictive standard deviation along one trajectory.

for n in (800, 1600, 10000):
    data = make_diff_dataset(fixed_point_system(), lhs_sample([(-0.5, 0.5), (-0.5, 0.5)], n, seed=0))
    post, elbo = train_vi({"layers": "2-6-2-6-2", "epochs": 200}, data)
    ens = predict_posterior_diff(post, [0.4, -0.4], np.linspace(0, 40, 41), n_mc=100, m_mc=10, seed=0)
    _, std = summarize(ens)
    print(f"n={n:5d}: final ELBO {elbo[-1]:.4g}, mean predictive std {std.mean():.5f}")

# ## Away from the data
#
# The Duffing oscillator is trained on the square of half-width 2 and its
# eigenfunctions are evaluated on a square twice as wide. The spread of the
# posterior draws grows where there was no data.

data = make_diff_dataset(duffing_system(), lhs_sample([(-2, 2), (-2, 2)], 1600, seed=0))
post, _ = train_vi({"layers": "2-16-16-24-16-16-3-16-16-24-16-16-2", "epochs": 200}, data)
g = np.linspace(-4, 4, 41)
P = np.stack([a.ravel() for a in np.meshgrid(g, g)], axis=1)
inside = np.all(np.abs(P) <= 2, axis=1)
mags = np.array([np.abs(eigenfunctions(d.model, P)[1]) for d in sample_posterior(post, 100, seed=0)])
spread = mags.std(axis=0)
print(f"eigenfunction spread inside {spread[inside].mean():.5f}, outside {spread[~inside].mean():.5f}")
