"""Differential and recurrent objectives, Adam, and the MAP training loop."""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DerivativeDataset, TrajectoryDataset
from .errors import DataError, DimensionError, DomainError, NumericError, TrainingError
from .linalg import eigenvalues
from .model import decode, encode, encode_tangent, fit_normalizer, init_from_dmd, koopman_matrix
from .nn import ParameterVector

STABILITY_TOL = 1e-9


@dataclass
class DiffBatch:
    Z: np.ndarray
    Zdot: np.ndarray

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.Zdot = np.atleast_2d(np.asarray(self.Zdot, dtype=float))
        if self.Z.shape != self.Zdot.shape:
            raise DimensionError(f"states {self.Z.shape} and rates {self.Zdot.shape} differ")
        if not (np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.Zdot))):
            raise DataError("batch contains non-finite values")

    def __len__(self):
        return self.Z.shape[0]

    def subset(self, idx):
        return DiffBatch(self.Z[idx], self.Zdot[idx])


@dataclass
class TrajBatch:
    """Windows ``(t, Z)`` with ``t[0] == 0`` and strictly increasing times."""

    windows: list

    def __post_init__(self):
        out = []
        for i, (t, Z) in enumerate(self.windows):
            t = np.asarray(t, dtype=float)
            Z = np.atleast_2d(np.asarray(Z, dtype=float))
            if t.ndim != 1 or len(t) != Z.shape[0] or len(t) == 0:
                raise DimensionError(f"window {i}: {len(t)} times for {Z.shape[0]} states")
            if t[0] != 0.0 or np.any(np.diff(t) <= 0):
                raise DataError(f"window {i}: times must start at 0 and increase")
            out.append((t, Z))
        self.windows = out

    def __len__(self):
        return len(self.windows)

    def subset(self, idx):
        return TrajBatch([self.windows[i] for i in idx])


def hankelize(trajectory, T, stride=1):
    """Slice one long trajectory ``(t, Z)`` into windows of ``T`` snapshots."""
    t, Z = trajectory
    t = np.asarray(t, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if T < 2 or stride < 1:
        raise DomainError("window length must be >= 2 and stride >= 1")
    if len(t) < T:
        raise DataError(f"trajectory has {len(t)} snapshots, window needs {T}")
    starts = range(0, len(t) - T + 1, stride)
    return TrajBatch([(t[s:s + T] - t[s], Z[s:s + T]) for s in starts])


# objectives


@dataclass
class LossWeights:
    linear: float = 1.0
    reconstruction: float = 1.0

    @classmethod
    def from_value(cls, v):
        if v is None:
            return cls()
        if isinstance(v, LossWeights):
            return v
        unknown = set(v) - {"linear", "reconstruction"}
        if unknown:
            raise DomainError(f"unknown loss weight keys {sorted(unknown)}")
        return cls(**{k: float(x) for k, x in v.items()})


@dataclass
class LossValue:
    total: float
    parts: dict
    grads: dict = None


def weight_decay_term(model, coefficient):
    if coefficient == 0:
        return 0.0
    params = model.parameters()
    return coefficient * sum(ad.sum(ad.square(params[n])) for n in model.network_parameter_names())


def diff_terms(model, batch):
    """Batch-mean linear-consistency and reconstruction errors."""
    if batch.Z.shape[1] != model.N:
        raise DimensionError(f"batch width {batch.Z.shape[1]} does not match model width {model.N}")
    phi, dphi = encode_tangent(model, batch.Z, batch.Zdot)
    K = koopman_matrix(model)
    lin = ad.sum(ad.square(phi @ K - dphi)) / len(batch)
    rec = ad.sum(ad.square(decode(model, phi) - batch.Z)) / len(batch)
    return lin, rec


def _group_windows(batch):
    groups = {}
    for t, Z in batch.windows:
        groups.setdefault(t.tobytes(), (t, []))[1].append(Z)
    return [(t, np.stack(Zs)) for t, Zs in groups.values()]


def recurrent_residuals(model, t, Z):
    """Prediction and linear residuals for windows sharing the time grid ``t``.

    ``Z`` is ``B x T x N``. Returns ``(pred, lin)`` of shapes ``T x B x N``
    and ``(T-1) x B x D``.
    """
    B, T, N = Z.shape
    if N != model.N:
        raise DimensionError(f"window width {N} does not match model width {model.N}")
    D = model.D
    K = koopman_matrix(model)
    E = ad.expm(t[:, None, None] * K)
    phi = ad.reshape(encode(model, Z.reshape(B * T, N)), (B, T, D))
    phi0 = ad.reshape(phi[:, 0, :], (1, B, D))
    latent = phi0 @ E
    pred = ad.reshape(decode(model, ad.reshape(latent, (T * B, D))), (T, B, N))
    pred = pred - np.swapaxes(Z, 0, 1)
    lin = latent[1:] - ad.swapaxes(phi, 0, 1)[1:]
    return pred, lin


def recurrent_terms(model, batch):
    """Window-averaged ``(1/T_m)`` sums of linear and prediction errors."""
    lin_total, rec_total = 0.0, 0.0
    for t, Z in _group_windows(batch):
        pred, lin = recurrent_residuals(model, t, Z)
        T = len(t)
        rec_total = rec_total + ad.sum(ad.square(pred)) / T
        if T > 1:
            lin_total = lin_total + ad.sum(ad.square(lin)) / T
    return lin_total / len(batch), rec_total / len(batch)


def _terms(model, batch):
    if isinstance(batch, DiffBatch):
        return diff_terms(model, batch)
    if isinstance(batch, TrajBatch):
        return recurrent_terms(model, batch)
    raise DataError(f"unsupported batch type {type(batch).__name__}")


def objective(model, batch, weight_decay=0.0, loss_weights=None, trainable=None, with_grad=True):
    """Weighted loss with gradients for the ``trainable`` parameter names."""
    w = LossWeights.from_value(loss_weights)
    params = model.parameters()
    names = list(params) if trainable is None else list(trainable)
    if not with_grad:
        lin, rec = _terms(model, batch)
        reg = weight_decay_term(model, weight_decay)
        total = w.linear * lin + w.reconstruction * rec + reg
        return LossValue(float(total), {"linear": float(lin), "reconstruction": float(rec),
                                        "decay": float(reg)})
    tape = ad.Tape()
    watched = {n: tape.variable(params[n]) for n in names}
    m = model.with_parameters(watched)
    lin, rec = _terms(m, batch)
    reg = weight_decay_term(m, weight_decay)
    total = w.linear * lin + w.reconstruction * rec + reg
    parts = {"linear": float(ad.value(lin)), "reconstruction": float(ad.value(rec)),
             "decay": float(ad.value(reg))}
    value = float(ad.value(total))
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    if not ad.is_tensor(total):
        return LossValue(value, parts, {n: np.zeros_like(params[n]) for n in names})
    return LossValue(value, parts, tape.gradient(total, watched))


def diff_loss(model, batch, weight_decay=0.0, loss_weights=None, trainable=None):
    if not isinstance(batch, DiffBatch):
        raise DataError("diff_loss needs a DiffBatch")
    return objective(model, batch, weight_decay, loss_weights, trainable)


def recurrent_loss(model, batch, weight_decay=0.0, loss_weights=None, trainable=None):
    if not isinstance(batch, TrajBatch):
        raise DataError("recurrent_loss needs a TrajBatch")
    return objective(model, batch, weight_decay, loss_weights, trainable)


# optimizer


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n, lr, **kw):
        return cls(lr, np.zeros(n), np.zeros(n), **kw)


def adam_step(state, params, grads):
    """One bias-corrected Adam update. ``params`` is a ParameterVector or a
    flat array; ``grads`` is aligned with it."""
    flat = params.flat if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    g = grads.flat if isinstance(grads, ParameterVector) else np.asarray(grads, dtype=float)
    if g.shape != flat.shape or state.m.shape != flat.shape:
        raise DimensionError("parameters, gradients and moments must align")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** step)
    vhat = v / (1 - state.beta2 ** step)
    new = flat - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(state.lr, m, v, step, state.beta1, state.beta2, state.eps)
    if isinstance(params, ParameterVector):
        return params.with_flat(new), new_state
    return new, new_state


# configuration


def parse_layers(layers):
    """``"2-8-16-8-2"`` or a list of ints; the middle entry is the latent size."""
    if isinstance(layers, str):
        try:
            widths = [int(p) for p in layers.split("-")]
        except ValueError:
            raise DomainError(f"bad layer string {layers!r}") from None
    else:
        widths = [int(p) for p in layers]
    if len(widths) < 3 or len(widths) % 2 == 0 or min(widths) < 1:
        raise DomainError(f"layer structure {layers!r} needs an odd number (>= 3) of positive widths")
    if widths[0] != widths[-1]:
        raise DomainError(f"layer structure {layers!r} must start and end with the state width")
    mid = len(widths) // 2
    return widths[:mid + 1], widths[mid:]


@dataclass
class TrainConfig:
    form: str = "diff"
    mode: str = "map"
    layers: str = "2-8-16-16-8-2-8-16-16-8-2"
    latent_dim: int = None
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    weight_decay: float = 1e-6
    window_length: int = 100
    stride: int = 1
    seed: int = 0
    normalization_mode: str = "per-component"
    loss_weights: dict = field(default_factory=lambda: {"linear": 1.0, "reconstruction": 1.0})
    svd_embedding: bool = True
    freeze_networks: bool = False
    vi_warmup_fraction: float = 0.1
    init_log_std: float = -5.0

    def __post_init__(self):
        if self.form not in ("diff", "recurrent"):
            raise DomainError(f"form must be 'diff' or 'recurrent', got {self.form!r}")
        if self.mode not in ("map", "vi"):
            raise DomainError(f"mode must be 'map' or 'vi', got {self.mode!r}")
        enc, _ = parse_layers(self.layers)
        if self.latent_dim is None:
            self.latent_dim = enc[-1]
        elif int(self.latent_dim) != enc[-1]:
            raise DomainError(f"latent_dim {self.latent_dim} disagrees with layers {self.layers!r}")
        self.latent_dim = int(self.latent_dim)
        for name in ("epochs", "batch_size", "window_length", "stride", "seed"):
            setattr(self, name, int(getattr(self, name)))
        if self.epochs < 0 or self.batch_size < 1 or self.stride < 1 or self.window_length < 1:
            raise DomainError("epochs must be >= 0; batch_size, stride and window_length >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise DomainError("learning_rate must be positive and weight_decay nonnegative")
        if not 0 <= self.vi_warmup_fraction <= 1:
            raise DomainError("vi_warmup_fraction must lie in [0, 1]")
        LossWeights.from_value(self.loss_weights)

    @property
    def widths(self):
        return parse_layers(self.layers)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise DomainError(f"config {path} is not valid JSON ({exc})") from None

    def to_dict(self):
        return asdict(self)


# training loop


def make_batches(dataset, normalizer, config):
    """Normalized full training set as a DiffBatch or TrajBatch."""
    if config.form == "diff":
        if not isinstance(dataset, DerivativeDataset):
            raise DataError("the differential form needs a derivative dataset")
        return DiffBatch(normalizer.normalize(dataset.X), normalizer.normalize_rate(dataset.Xdot))
    if not isinstance(dataset, TrajectoryDataset):
        raise DataError("the recurrent form needs a trajectory dataset")
    windows = []
    for tr in dataset.trajectories:
        T = min(config.window_length, len(tr.t))
        if T < 2:
            raise DataError("trajectories need at least two snapshots")
        windows += hankelize((tr.t, normalizer.normalize(tr.X)), T, config.stride).windows
    return TrajBatch(windows)


def initial_model(config, dataset):
    normalizer = fit_normalizer(dataset.states, config.normalization_mode)
    return init_from_dmd(dataset, config.latent_dim, normalizer, config.widths, config.seed,
                         svd_embedding=config.svd_embedding, zero_networks=config.freeze_networks)


def trainable_names(model, config):
    names = list(model.parameters())
    if config.freeze_networks:
        frozen = set(model.network_parameter_names())
        names = [n for n in names if n not in frozen]
    return names


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def check_stable(model):
    lam = eigenvalues(ad.value(koopman_matrix(model)))
    worst = float(np.max(lam.real))
    if worst > STABILITY_TOL:
        raise NumericError(f"generator lost stability (max real part {worst})")


def train_map(config, dataset, model=None, callback=None):
    """Minimize the configured objective with Adam.

    Returns ``(model, history)`` where ``history`` holds the mean minibatch
    loss of each epoch. ``model`` overrides the DMD initialization.
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    if model is None:
        model = initial_model(config, dataset)
    data = make_batches(dataset, model.normalizer, config)
    names = trainable_names(model, config)
    params = ParameterVector.from_dict({n: model.parameters()[n] for n in names})
    state = AdamState.create(len(params), config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    history = []
    last_good = 0
    for epoch in range(config.epochs):
        losses = []
        for idx in minibatches(len(data), config.batch_size, rng):
            try:
                res = objective(model, data.subset(idx), config.weight_decay, config.loss_weights, names)
            except (NumericError, FloatingPointError) as exc:
                raise TrainingError(f"divergence in epoch {epoch}: {exc}", last_good) from None
            grads = ParameterVector.from_dict(res.grads)
            if not np.all(np.isfinite(grads.flat)):
                raise TrainingError(f"non-finite gradient in epoch {epoch}", last_good)
            params, state = adam_step(state, params, grads)
            model = model.with_parameters(params.to_dict())
            losses.append(res.total * len(idx))
        history.append(sum(losses) / len(data))
        check_stable(model)
        last_good = epoch + 1
        if callback is not None:
            callback(epoch, history[-1], model)
    return model, np.array(history)


def windowed_median(history, window):
    """Medians of the first and last ``window`` entries."""
    h = np.asarray(history, dtype=float)
    w = min(window, len(h))
    return float(np.median(h[:w])), float(np.median(h[-w:]))
