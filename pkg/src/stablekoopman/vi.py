"""Mean-field variational inference over the Koopman model parameters.

Every parameter gets an independent Gaussian on an unconstrained coordinate.
Positive quantities (prior scales, ``sigma^2``, Gamma shapes, noise
variances) live on the log scale, so their factors are log-normal.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, DomainError, FormatError, NumericError, TrainingError
from .model import (FORMAT_VERSION, _get, decode, dumps, encode_tangent, koopman_matrix, load_json,
                    model_from_dict, model_to_dict)
from .nn import ParameterVector
from .training import (AdamState, DiffBatch, TrainConfig, TrajBatch, _group_windows, adam_step,
                       make_batches, minibatches, recurrent_residuals, train_map)

LOG_2PI = math.log(2 * math.pi)


# log densities


def half_cauchy_logpdf(x, scale=1.0):
    return math.log(2.0 / (math.pi * scale)) - ad.log1p(ad.square(x / scale))


def gaussian_logpdf(x, var):
    """Sum of independent ``N(0, var)`` log densities with one shared ``var``."""
    n = np.size(ad.value(x))
    return -0.5 * n * (LOG_2PI + ad.log(var)) - 0.5 * ad.sum(ad.square(x)) / var


def gamma_logpdf(x, shape, rate):
    return shape * math.log(rate) - ad.gammaln(shape) + (shape - 1.0) * ad.log(x) - rate * x


def gaussian_entropy(log_std):
    return float(np.sum(np.asarray(log_std) + 0.5 * (LOG_2PI + 1.0)))


def lognormal_entropy(mean, log_std):
    return gaussian_entropy(log_std) + float(np.sum(mean))


# generic mean-field family


@dataclass
class MeanFieldGaussian:
    """Independent Gaussians on a flat unconstrained vector.

    Names listed in ``positive`` are log-coordinates of positive quantities.
    """

    names: list
    shapes: list
    mean: np.ndarray
    log_std: np.ndarray
    positive: frozenset = frozenset()

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        self.positive = frozenset(self.positive)
        layout = ParameterVector(self.names, self.shapes, self.mean)
        if self.log_std.shape != self.mean.shape:
            raise DomainError("mean and log_std must have equal length")
        if not set(self.positive) <= set(self.names):
            raise DomainError("positive names must be parameter names")
        self._layout = layout

    @classmethod
    def from_dict(cls, means, log_std, positive=()):
        """``means`` maps names to arrays in their natural coordinate;
        positive entries are log-transformed."""
        positive = frozenset(positive)
        u = {}
        for n, v in means.items():
            v = np.asarray(v, dtype=float)
            if n in positive:
                if np.any(v <= 0):
                    raise DomainError(f"{n}: positive parameter has nonpositive mean")
                v = np.log(v)
            u[n] = v
        pv = ParameterVector.from_dict(u)
        return cls(pv.names, pv.shapes, pv.flat, np.full(pv.flat.size, float(log_std)), positive)

    def __len__(self):
        return self.mean.size

    def split(self, flat):
        return self._layout.with_flat(flat).to_dict()

    def constrain(self, u):
        """Natural-coordinate dict from an unconstrained flat vector (or a
        dict of tensors)."""
        if not isinstance(u, dict):
            u = self.split(u)
        return {n: (ad.exp(v) if n in self.positive else v) for n, v in u.items()}

    def mean_values(self):
        return self.constrain(self.mean)

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((n, len(self)))
        return [self.constrain(self.mean + np.exp(self.log_std) * e) for e in eps]

    def entropy(self):
        """Entropy in natural coordinates (log-normal factors add their log-mean)."""
        pos = np.zeros(len(self), dtype=bool)
        for n in self.positive:
            off, shape = self._layout.index[n]
            pos[off:off + int(np.prod(shape, dtype=int))] = True
        return gaussian_entropy(self.log_std) + float(np.sum(self.mean[pos]))

    def with_values(self, mean, log_std):
        return replace(self, mean=np.asarray(mean, dtype=float), log_std=np.asarray(log_std, dtype=float))


def elbo(q, log_joint, n_samples=1, seed=0):
    """Reparameterized ELBO estimate and its gradients.

    ``log_joint`` maps a dict of natural-coordinate tensors to a taped scalar.
    Returns ``(value, grad_mean, grad_log_std)``.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, len(q)))
    value = 0.0
    g_mean = np.zeros(len(q))
    g_rho = np.zeros(len(q))
    for e in eps:
        tape = ad.Tape()
        mu = tape.variable(q.mean)
        rho = tape.variable(q.log_std)
        u_flat = mu + ad.exp(rho) * e
        u = {}
        jac = 0.0
        for n in q.names:
            off, shape = q._layout.index[n]
            size = int(np.prod(shape, dtype=int))
            piece = ad.reshape(u_flat[off:off + size], shape)
            u[n] = piece
            if n in q.positive:
                jac = jac + ad.sum(piece)
        lj = log_joint(q.constrain(u))
        entropy = ad.sum(rho) + len(q) * 0.5 * (LOG_2PI + 1.0)
        total = lj + jac + entropy
        v = float(ad.value(total))
        if not math.isfinite(v):
            raise NumericError(f"non-finite ELBO estimate {v}")
        gm, gr = tape.gradient(total, [mu, rho])
        value += v / n_samples
        g_mean += gm / n_samples
        g_rho += gr / n_samples
    return value, g_mean, g_rho


# the hierarchical Koopman model


@dataclass
class PriorSpec:
    scale_hyper: float = 1.0
    shape_hyper: float = 1.0
    gamma_rate: float = 0.5
    noise_hyper: float = 1.0

    def __post_init__(self):
        if min(self.scale_hyper, self.shape_hyper, self.gamma_rate, self.noise_hyper) <= 0:
            raise DomainError("prior hyperparameters must be positive")


@dataclass
class KoopmanPosterior:
    """Variational posterior together with the fixed model structure.

    ``base`` supplies the normalizer, SVD basis and any parameters held
    fixed (frozen networks). ``q`` covers the rest plus ``sigma2``, Gamma
    shapes ``shape``, per-group prior scales ``scale.<name>`` and the noise
    variances ``lam_rec``/``lam_lin``.
    """

    q: MeanFieldGaussian
    base: object
    form: str
    priors: PriorSpec = field(default_factory=PriorSpec)

    def gaussian_names(self):
        return [n for n in self.q.names if not n.startswith(("scale.", "lam_", "shape", "sigma2"))]


def model_params(theta):
    """Model parameter dict from natural-coordinate posterior values."""
    out = {n: v for n, v in theta.items()
           if not n.startswith(("scale.", "lam_", "shape", "sigma2"))}
    out["sigma"] = ad.sqrt(theta["sigma2"])
    return out


def log_prior(post, theta):
    p = post.priors
    lp = 0.0
    for n in post.gaussian_names():
        s = theta["scale." + n]
        lp = lp + gaussian_logpdf(theta[n], ad.square(s)) + ad.sum(half_cauchy_logpdf(s, p.scale_hyper))
    k = theta["shape"]
    lp = lp + ad.sum(gamma_logpdf(theta["sigma2"], k, p.gamma_rate))
    lp = lp + ad.sum(half_cauchy_logpdf(k, p.shape_hyper))
    for n in ("lam_rec", "lam_lin"):
        lp = lp + ad.sum(half_cauchy_logpdf(theta[n], p.noise_hyper))
    return lp


def residual_loglik(r, lam):
    """Independent Gaussian log density of residual rows ``r`` (last axis
    aligned with the diagonal variances ``lam``)."""
    if np.any(ad.value(lam) <= 0):
        raise DomainError("noise variances must be positive")
    rows = int(np.prod(np.shape(ad.value(r))[:-1], dtype=int))
    return -0.5 * rows * (LOG_2PI * np.size(ad.value(lam)) + ad.sum(ad.log(lam))) \
        - 0.5 * ad.sum(ad.square(r) / lam)


def log_likelihood(model, batch, lam_rec, lam_lin):
    if isinstance(batch, DiffBatch):
        phi, dphi = encode_tangent(model, batch.Z, batch.Zdot)
        rec = decode(model, phi) - batch.Z
        lin = dphi - phi @ koopman_matrix(model)
        return residual_loglik(rec, lam_rec) + residual_loglik(lin, lam_lin)
    if isinstance(batch, TrajBatch):
        ll = 0.0
        for t, Z in _group_windows(batch):
            pred, lin = recurrent_residuals(model, t, Z)
            ll = ll + residual_loglik(pred, lam_rec)
            if len(t) > 1:
                ll = ll + residual_loglik(lin, lam_lin)
        return ll
    raise DataError(f"unsupported batch type {type(batch).__name__}")


def log_joint(post, theta, batch, scale=1.0):
    """Log prior plus ``scale`` times the batch log likelihood."""
    for n in ("sigma2", "shape", "lam_rec", "lam_lin"):
        if np.any(ad.value(theta[n]) <= 0):
            raise DomainError(f"{n} must be positive")
    model = post.base.with_parameters(model_params(theta))
    return log_prior(post, theta) + scale * log_likelihood(model, batch, theta["lam_rec"], theta["lam_lin"])


def elbo_estimate(post, batch, n_samples=1, seed=0, scale=1.0):
    return elbo(post.q, lambda th: log_joint(post, th, batch, scale), n_samples, seed)


def _mean_sq(r):
    return np.mean(np.square(r).reshape(-1, r.shape[-1]), axis=0)


def init_posterior(model, form, batch, trainable, init_log_std=-5.0, priors=None):
    """Posterior centred on ``model``'s parameters.

    Prior scales start at the RMS of their group, noise variances at the
    mean squared residuals of ``model`` on ``batch``.
    """
    params = model.parameters()
    means = {}
    for n in trainable:
        if n == "sigma":
            continue
        means[n] = np.asarray(params[n], dtype=float)
    sigma2 = np.maximum(np.square(params["sigma"]), 1e-8)
    means["sigma2"] = sigma2
    means["shape"] = np.ones_like(sigma2)
    for n in [k for k in means if k not in ("sigma2", "shape")]:
        rms = math.sqrt(float(np.mean(np.square(means[n])))) if np.size(means[n]) else 1.0
        means["scale." + n] = np.array(max(rms, 1e-3))
    if isinstance(batch, DiffBatch):
        phi, dphi = encode_tangent(model, batch.Z, batch.Zdot)
        rec = decode(model, phi) - batch.Z
        lin = dphi - phi @ koopman_matrix(model)
    else:
        recs, lins = [], []
        for t, Z in _group_windows(batch):
            p, l = recurrent_residuals(model, t, Z)
            recs.append(p.reshape(-1, model.N))
            lins.append(l.reshape(-1, model.D))
        rec, lin = np.concatenate(recs), np.concatenate(lins)
    means["lam_rec"] = np.maximum(_mean_sq(rec), 1e-6)
    means["lam_lin"] = np.maximum(_mean_sq(lin) if len(lin) else np.ones(model.D), 1e-6)
    positive = {"sigma2", "shape", "lam_rec", "lam_lin"} | {k for k in means if k.startswith("scale.")}
    q = MeanFieldGaussian.from_dict(means, init_log_std, positive)
    return KoopmanPosterior(q, model, form, priors or PriorSpec())


def train_vi(config, dataset, callback=None):
    """MAP warm start followed by stochastic-gradient ELBO ascent.

    Returns ``(posterior, elbo_history)``; one entry per epoch, each the
    mean of the minibatch ELBO estimates.
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    warm = int(round(config.vi_warmup_fraction * config.epochs))
    model, _ = train_map(replace(config, epochs=warm, mode="map"), dataset)
    data = make_batches(dataset, model.normalizer, config)
    names = list(model.parameters())
    if config.freeze_networks:
        frozen = set(model.network_parameter_names())
        names = [n for n in names if n not in frozen]
    post = init_posterior(model, config.form, data, names, config.init_log_std)
    q = post.q
    flat = np.concatenate([q.mean, q.log_std])
    state = AdamState.create(flat.size, config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    history = []
    n_total = len(data)
    step = 0
    for epoch in range(config.epochs - warm):
        values = []
        for idx in minibatches(n_total, config.batch_size, rng):
            seed = np.random.SeedSequence([config.seed, 3, step])
            try:
                v, gm, gr = elbo_estimate(post, data.subset(idx), 1, seed, n_total / len(idx))
            except (NumericError, FloatingPointError, DomainError) as exc:
                raise TrainingError(f"divergence in epoch {epoch}: {exc}", epoch) from None
            grad = -np.concatenate([gm, gr])
            flat, state = adam_step(state, flat, grad)
            post = replace(post, q=q.with_values(flat[:len(q)], flat[len(q):]))
            values.append(v)
            step += 1
        history.append(float(np.mean(values)))
        if callback is not None:
            callback(epoch, history[-1], post)
    return post, np.array(history)


@dataclass
class PosteriorDraw:
    model: object
    lam_rec: np.ndarray
    lam_lin: np.ndarray


def _draw(post, theta):
    model = post.base.with_parameters({k: np.asarray(v) for k, v in model_params(theta).items()})
    return PosteriorDraw(model, np.asarray(theta["lam_rec"]), np.asarray(theta["lam_lin"]))


def sample_posterior(post, n, seed):
    if n < 1:
        raise DomainError("n must be >= 1")
    return [_draw(post, th) for th in post.q.sample(n, seed)]


def posterior_mean_draw(post):
    """Parameters at the variational means (positives at ``exp(mean)``)."""
    return _draw(post, post.q.mean_values())


# checkpoints


def posterior_to_dict(post):
    q = post.q
    means, stds = q.split(q.mean), q.split(q.log_std)
    return {
        "format": "koopman-posterior",
        "format_version": FORMAT_VERSION,
        "form": post.form,
        "model": model_to_dict(posterior_mean_draw(post).model),
        "base": model_to_dict(post.base),
        "priors": {"scale_hyper": post.priors.scale_hyper, "shape_hyper": post.priors.shape_hyper,
                   "gamma_rate": post.priors.gamma_rate, "noise_hyper": post.priors.noise_hyper},
        "variational": {n: {"shape": list(q.shapes[i]), "mean": np.asarray(means[n]).ravel().tolist(),
                            "log_std": np.asarray(stds[n]).ravel().tolist(),
                            "positive": n in q.positive}
                        for i, n in enumerate(q.names)},
        "order": list(q.names),
    }


def posterior_from_dict(d):
    if _get(d, "format", "") != "koopman-posterior":
        raise FormatError(f"not a posterior checkpoint ({d.get('format')!r})", "format")
    version = _get(d, "format_version", "")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version!r}", "format_version")
    base = model_from_dict(_get(d, "base", ""))
    var = _get(d, "variational", "")
    order = _get(d, "order", "")
    names, shapes, means, stds, positive = [], [], [], [], set()
    for n in order:
        entry = _get(var, n, "variational")
        where = f"variational.{n}"
        try:
            shape = tuple(int(s) for s in _get(entry, "shape", where))
            m = np.array(_get(entry, "mean", where), dtype=float)
            s = np.array(_get(entry, "log_std", where), dtype=float)
        except (TypeError, ValueError):
            raise FormatError("not numeric", where) from None
        size = int(np.prod(shape, dtype=int))
        if m.shape != (size,) or s.shape != (size,):
            raise FormatError(f"expected {size} entries", where)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise FormatError("non-finite values", where)
        names.append(n)
        shapes.append(shape)
        means.append(m)
        stds.append(s)
        if _get(entry, "positive", where):
            positive.add(n)
    for required in ("sigma2", "shape", "lam_rec", "lam_lin"):
        if required not in names:
            raise FormatError("missing variational factor", f"variational.{required}")
    form = _get(d, "form", "")
    if form not in ("diff", "recurrent"):
        raise FormatError(f"unknown form {form!r}", "form")
    try:
        priors = PriorSpec(**_get(d, "priors", ""))
    except (TypeError, DomainError) as exc:
        raise FormatError(str(exc), "priors") from None
    q = MeanFieldGaussian(names, shapes, np.concatenate(means), np.concatenate(stds), positive)
    return KoopmanPosterior(q, base, form, priors)


def save_posterior(path, post):
    Path(path).write_text(dumps(posterior_to_dict(post)))


def load_posterior(path):
    return posterior_from_dict(load_json(path))
