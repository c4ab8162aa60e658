"""Deterministic rollouts and posterior-predictive ensembles."""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, DomainError, NumericError
from .linalg import matexp, ou_covariance
from .model import decode, encode, koopman_matrix
from .vi import sample_posterior

JITTER_START = 1e-12
JITTER_MAX = 1e-6


@dataclass
class PredictiveEnsemble:
    """``samples`` is ``n_total x T x N`` in physical units."""

    times: np.ndarray
    samples: np.ndarray
    n_mc: int
    m_mc: int = 1

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[1] != len(self.times):
            raise DimensionError("samples must be n_total x T x N")
        if self.samples.shape[0] != self.n_mc * self.m_mc:
            raise DimensionError("sample count must equal n_mc * m_mc")
        if not np.all(np.isfinite(self.samples)):
            raise NumericError("ensemble contains non-finite values")


def check_times(times):
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0 or np.any(t < 0) or np.any(np.diff(t) < 0):
        raise DomainError("times must be nonnegative and ascending")
    return t


def _initial_latent(model, x0):
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != model.N:
        raise DimensionError(f"initial state has {x0.size} components, model expects {model.N}")
    return encode(model, model.normalizer.normalize(x0[None, :]))[0]


def latent_rollout(model, phi0, times):
    """``phi0 exp(t K)`` for every ``t``; ``T x D``."""
    K = ad.value(koopman_matrix(model))
    return np.array([phi0 @ matexp(K, t) for t in times])


def predict_map(model, x0, times):
    """Deterministic trajectory ``T x N`` in physical units."""
    t = check_times(times)
    latent = latent_rollout(model, _initial_latent(model, x0), t)
    return model.normalizer.denormalize(decode(model, latent))


def _noise(rng, lam, shape):
    return rng.standard_normal(shape) * np.sqrt(lam)


def predict_posterior_recurrent(posterior, x0, times, n_mc=100, seed=0, with_noise=False):
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    t = check_times(times)
    draw_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(noise_seed)
    out = []
    for d in sample_posterior(posterior, n_mc, draw_seed):
        m = d.model
        z = decode(m, latent_rollout(m, _initial_latent(m, x0), t))
        if with_noise:
            z = z + _noise(rng, d.lam_rec, z.shape)
        out.append(m.normalizer.denormalize(z))
    return PredictiveEnsemble(t, np.array(out), n_mc, 1)


def psd_cholesky(S):
    """Lower Cholesky factor, adding ``jitter * I`` from 1e-12 up to 1e-6."""
    S = np.asarray(S, dtype=float)
    if not np.any(S):
        return np.zeros_like(S)
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(S + jitter * np.eye(len(S)))
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise NumericError("covariance is not positive semidefinite within jitter limits") from None


def sample_ou(K, lam_lin, phi0, times, m, rng):
    """``m`` paths of ``d phi = phi K dt + dW`` with diffusion ``diag(lam_lin)``,
    sampled exactly on ``times`` (starting from ``phi0`` at ``t = 0``).
    Returns ``m x T x D``."""
    K = np.asarray(K, dtype=float)
    t = check_times(times)
    D = K.shape[0]
    paths = np.empty((m, len(t), D))
    cur = np.tile(np.asarray(phi0, dtype=float), (m, 1))
    prev = 0.0
    cache = {}
    for i, ti in enumerate(t):
        dt = ti - prev
        if dt > 0:
            key = round(dt, 12)
            if key not in cache:
                cache[key] = (matexp(K, dt), psd_cholesky(ou_covariance(K, lam_lin, dt)))
            E, L = cache[key]
            cur = cur @ E + rng.standard_normal((m, D)) @ L.T
        paths[:, i] = cur
        prev = ti
    return paths


def predict_posterior_diff(posterior, x0, times, n_mc=100, m_mc=10, seed=0, with_noise=True):
    """Parameter draws times OU process draws, decoded to physical units."""
    if n_mc < 1 or m_mc < 1:
        raise DomainError("n_mc and m_mc must be >= 1")
    t = check_times(times)
    draw_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(noise_seed)
    out = []
    for d in sample_posterior(posterior, n_mc, draw_seed):
        m = d.model
        K = ad.value(koopman_matrix(m))
        paths = sample_ou(K, d.lam_lin, _initial_latent(m, x0), t, m_mc, rng)
        z = decode(m, paths.reshape(-1, m.D)).reshape(m_mc, len(t), m.N)
        if with_noise:
            z = z + _noise(rng, d.lam_rec, z.shape)
        out.append(m.normalizer.denormalize(z))
    return PredictiveEnsemble(t, np.concatenate(out), n_mc, m_mc)


def summarize(ensemble):
    """Per-time mean and uncorrected standard deviation, each ``T x N``."""
    s = ensemble.samples
    mean = s.mean(axis=0)
    std = np.sqrt(np.mean(np.square(s - mean), axis=0))
    return mean, std


# CSV output


def _fmt(v):
    return repr(float(v))


def write_summary_csv(path, times, mean, std):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "component", "mean", "std"])
        for i, t in enumerate(times):
            for k in range(mean.shape[1]):
                w.writerow([_fmt(t), k, _fmt(mean[i, k]), _fmt(std[i, k])])


def write_samples_csv(path, ensemble):
    n = ensemble.samples.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "time"] + [f"x_{k}" for k in range(n)])
        for s, traj in enumerate(ensemble.samples):
            for t, row in zip(ensemble.times, traj):
                w.writerow([s, _fmt(t)] + [_fmt(v) for v in row])


def write_prediction_csv(path, times, X):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"x_{k}" for k in range(X.shape[1])])
        for t, row in zip(times, X):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row])
