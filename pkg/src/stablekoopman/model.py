"""Normalization, the stable Koopman generator and the SVD-DMD residual
encoder/decoder pair.

States and observables are row vectors; latent dynamics are
``d phi / dt = phi K``.
"""

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DerivativeDataset, TrajectoryDataset
from .errors import DataError, DegenerateScaleError, DimensionError, DomainError, FormatError
from .linalg import eigenvalues, thin_svd
from .nn import FeedForwardNet, forward, forward_tangent, init_truncated_normal, zeros_net

FORMAT_VERSION = 1
MODES = ("per-component", "global-max")


@dataclass(frozen=True)
class Normalizer:
    """``z = (x - mean) / scale`` with a diagonal scale."""

    mean: np.ndarray
    scale: np.ndarray
    mode: str = "per-component"

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.scale) or np.ndim(self.mean) != 1:
            raise DimensionError("mean and scale must be vectors of equal length")
        if np.any(np.asarray(self.scale) <= 0):
            raise DegenerateScaleError("all scale entries must be positive")

    @property
    def dim(self):
        return len(self.mean)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def denormalize(self, z):
        return np.asarray(z) * self.scale + self.mean

    def normalize_rate(self, xdot):
        return np.asarray(xdot, dtype=float) / self.scale


def fit_normalizer(X, mode="per-component"):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("need at least two snapshots to fit a normalizer")
    if mode not in MODES:
        raise DomainError(f"unknown normalization mode {mode!r}")
    mean = X.mean(axis=0)
    d = X.std(axis=0)
    if mode == "per-component":
        if np.any(d == 0):
            bad = np.flatnonzero(d == 0).tolist()
            raise DegenerateScaleError(f"zero-variance components {bad}; use global-max mode")
        scale = d
    else:
        if d.max() == 0:
            raise DegenerateScaleError("all components are constant")
        scale = np.full_like(d, d.max())
    return Normalizer(mean, scale, mode)


@dataclass
class StableKoopman:
    """``K`` tridiagonal: ``-sigma_i^2`` on the diagonal, ``zeta_i`` above and
    ``-zeta_i`` below. Its symmetric part is ``-diag(sigma^2)``, so every
    eigenvalue has a nonpositive real part."""

    zeta: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self):
        return np.shape(ad.value(self.sigma))[0]

    @property
    def n_params(self):
        return 2 * self.dim - 1


def assemble_K(k):
    return ad.tridiag(-ad.square(k.sigma), k.zeta)


def _pair_spectrum(target, tol):
    """Split a conjugate-closed spectrum into ``(re, im>0)`` pairs and reals."""
    lam = np.asarray(target, dtype=complex).ravel()
    scale = 1.0 + np.max(np.abs(lam), initial=0.0)
    is_real = np.abs(lam.imag) <= tol * scale
    reals = [float(v.real) for v in lam[is_real]]
    upper = sorted((v for v in lam[~is_real] if v.imag > 0), key=lambda v: (v.real, v.imag))
    lower = [v for v in lam[~is_real] if v.imag < 0]
    if len(upper) != len(lower):
        raise DomainError("spectrum is not closed under conjugation")
    pairs = []
    for v in upper:
        j = int(np.argmin([abs(w - v.conjugate()) for w in lower]))
        if abs(lower[j] - v.conjugate()) > 1e-9 * scale:
            raise DomainError("spectrum is not closed under conjugation")
        lower.pop(j)
        pairs.append((float(v.real), float(v.imag)))
    return pairs, reals


def stable_from_spectrum(target, tol=1e-9):
    """Parameters whose assembled ``K`` has exactly the ``target`` spectrum.

    Each pair ``r +- i m`` becomes a decoupled 2x2 block with
    ``sigma^2 = -r`` and ``zeta = m``; real eigenvalues go on the remaining
    diagonal. Blocks come first, in ascending real part.
    """
    lam = np.asarray(target, dtype=complex).ravel()
    if lam.size == 0:
        raise DimensionError("empty spectrum")
    if np.any(lam.real > 1e-12):
        raise DomainError("spectrum has eigenvalues with positive real part")
    pairs, reals = _pair_spectrum(lam, tol)
    return block_parameters(pairs, sorted(reals))


def block_parameters(pairs, reals):
    """Parameters for 2x2 blocks ``(re, im)`` followed by real eigenvalues."""
    diag, couplings = [], []
    for r, m in pairs:
        diag += [r, r]
        couplings += [m, 0.0]
    diag += list(reals)
    couplings += [0.0] * len(reals)
    sigma = np.sqrt(np.maximum(-np.array(diag), 0.0))
    zeta = np.array(couplings[: len(diag) - 1])
    return StableKoopman(zeta, sigma)


def real_block_basis(G, spectrum=None, tol=1e-9):
    """Real matrix ``S`` with ``S^{-1} G S`` in the block layout used by
    :func:`stable_from_spectrum`.

    ``spectrum`` optionally replaces ``G``'s eigenvalues (same ordering as
    ``numpy.linalg.eig``), e.g. a continuous-time spectrum computed from a
    discrete-time operator. Returns ``(S, spectrum_in_block_order)``.
    """
    w, V = np.linalg.eig(G)
    lam = w if spectrum is None else np.asarray(spectrum, dtype=complex)
    scale = 1.0 + np.max(np.abs(lam), initial=0.0)
    cols, spec_pairs, spec_reals, real_cols = [], [], [], []
    used = np.zeros(len(lam), dtype=bool)
    order = sorted(range(len(lam)), key=lambda i: (lam[i].real, lam[i].imag))
    for i in order:
        if used[i]:
            continue
        if abs(lam[i].imag) <= tol * scale:
            used[i] = True
            u = np.real(V[:, i])
            spec_reals.append((lam[i].real, u / np.linalg.norm(u)))
            continue
        if lam[i].imag < 0:
            continue
        cand = [j for j in range(len(lam)) if not used[j] and j != i and lam[j].imag < 0]
        if not cand:
            raise DomainError("spectrum is not closed under conjugation")
        j = min(cand, key=lambda j: abs(lam[j] - lam[i].conjugate()))
        used[i] = used[j] = True
        v = V[:, i] / np.linalg.norm(V[:, i])
        # rotate the phase so the real and imaginary parts are orthogonal
        v = v * np.exp(-0.5j * np.angle(v @ v))
        cols += [v.real, v.imag]
        spec_pairs += [lam[i], lam[i].conjugate()]
    spec_reals.sort(key=lambda p: p[0])
    real_cols = [c for _, c in spec_reals]
    S = np.column_stack(cols + real_cols)
    spectrum_out = np.array(spec_pairs + [complex(r) for r, _ in spec_reals])
    return S, spectrum_out


@dataclass
class KoopmanModel:
    """Encoder ``Phi`` (N -> D), decoder ``Psi`` (D -> N) and generator ``K``.

    ``Phi(z) = enc_net(z) + (z Lam V_D) S_enc`` and
    ``Psi(phi) = dec_net(phi) + (phi S_dec) V_D^T Lam^{-1}``, where ``Lam``
    is the normalizer scale and ``V_D`` the SVD basis of centered snapshots.
    The ``D x D`` maps ``S_enc``/``S_dec`` start as a real similarity pair so
    that the linear path carries the DMD operator in stable block form.
    """

    normalizer: Normalizer
    basis: np.ndarray
    encoder: FeedForwardNet
    decoder: FeedForwardNet
    koopman: StableKoopman
    enc_skip: np.ndarray
    dec_skip: np.ndarray

    def __post_init__(self):
        N, D = np.shape(self.basis)
        if N != self.normalizer.dim:
            raise DimensionError(f"basis has {N} rows, normalizer has {self.normalizer.dim} components")
        if self.encoder.n_in != N or self.encoder.n_out != D:
            raise DimensionError(f"encoder widths {self.encoder.widths} do not map {N} -> {D}")
        if self.decoder.n_in != D or self.decoder.n_out != N:
            raise DimensionError(f"decoder widths {self.decoder.widths} do not map {D} -> {N}")
        if self.koopman.dim != D:
            raise DimensionError(f"K has dimension {self.koopman.dim}, latent dimension is {D}")
        for name in ("enc_skip", "dec_skip"):
            if np.shape(ad.value(getattr(self, name))) != (D, D):
                raise DimensionError(f"{name} must be {D}x{D}")

    @property
    def N(self):
        return self.basis.shape[0]

    @property
    def D(self):
        return self.basis.shape[1]

    def parameters(self):
        out = {}
        out.update(self.encoder.parameters("encoder."))
        out.update(self.decoder.parameters("decoder."))
        out["enc_skip"] = self.enc_skip
        out["dec_skip"] = self.dec_skip
        out["zeta"] = self.koopman.zeta
        out["sigma"] = self.koopman.sigma
        return out

    def with_parameters(self, params):
        p = dict(self.parameters())
        p.update(params)
        return replace(
            self,
            encoder=FeedForwardNet.from_parameters(p, "encoder."),
            decoder=FeedForwardNet.from_parameters(p, "decoder."),
            koopman=StableKoopman(p["zeta"], p["sigma"]),
            enc_skip=p["enc_skip"],
            dec_skip=p["dec_skip"],
        )

    def network_parameter_names(self):
        return [k for k in self.parameters() if k.startswith(("encoder.", "decoder."))]


def koopman_matrix(model):
    return assemble_K(model.koopman)


def _rows(x, width):
    arr = ad.value(x)
    single = np.ndim(arr) == 1
    if np.shape(arr)[-1] != width:
        raise DimensionError(f"expected width {width}, got {np.shape(arr)[-1]}")
    return (ad.reshape(x, (1, width)) if single else x), single


def encode(model, z):
    z, single = _rows(z, model.N)
    lin = ((z * model.normalizer.scale) @ model.basis) @ model.enc_skip
    phi = forward(model.encoder, z) + lin
    return phi[0] if single else phi


def encode_tangent(model, z, zdot):
    """``(Phi(z), zdot . grad_z Phi(z))`` for a batch of rows."""
    z, _ = _rows(z, model.N)
    zdot, _ = _rows(zdot, model.N)
    scale = model.normalizer.scale
    phi, dphi = forward_tangent(model.encoder, z, zdot)
    phi = phi + ((z * scale) @ model.basis) @ model.enc_skip
    dphi = dphi + ((zdot * scale) @ model.basis) @ model.enc_skip
    return phi, dphi


def decode(model, phi):
    phi, single = _rows(phi, model.D)
    lin = ((phi @ model.dec_skip) @ model.basis.T) / model.normalizer.scale
    z = forward(model.decoder, phi) + lin
    return z[0] if single else z


def svd_basis(X, normalizer, D):
    """First ``D`` right singular vectors of the centered snapshots, padded
    with zero columns when fewer exist."""
    Xc = np.asarray(X, dtype=float) - normalizer.mean
    _, _, V = thin_svd(Xc)
    N = Xc.shape[1]
    basis = np.zeros((N, D))
    k = min(D, V.shape[1])
    basis[:, :k] = V[:, :k]
    return basis


def _clamp(spectrum):
    spectrum = np.asarray(spectrum, dtype=complex)
    return np.where(spectrum.real > 0, 1j * spectrum.imag, spectrum)


def dmd_generator(dataset, normalizer, basis, rcond=1e-10):
    """Continuous-time DMD estimate in projected coordinates ``q = z Lam V_D``.

    Returns ``(S, spectrum)`` from :func:`real_block_basis` before clamping.
    Derivative data: least squares ``q G ~ qdot``. Trajectory data: one-step
    operator ``q_{k+1} ~ q_k A`` on a uniform grid, spectrum ``log(mu)/dt``.
    """
    if isinstance(dataset, DerivativeDataset):
        if len(dataset) < 2:
            raise DataError("need at least two samples")
        Q = (dataset.X - normalizer.mean) @ basis
        Qdot = dataset.Xdot @ basis
        G = np.linalg.lstsq(Q, Qdot, rcond=rcond)[0]
        return real_block_basis(G)
    if isinstance(dataset, TrajectoryDataset):
        Q0, Q1, dts = [], [], []
        for tr in dataset.trajectories:
            if len(tr.t) < 2:
                continue
            dt = np.diff(tr.t)
            dts.append(dt)
            Q = (tr.X - normalizer.mean) @ basis
            Q0.append(Q[:-1])
            Q1.append(Q[1:])
        if not Q0:
            raise DataError("need at least two snapshots along a trajectory")
        dts = np.concatenate(dts)
        step = float(np.median(dts))
        if np.max(np.abs(dts - step)) > 1e-6 * step:
            raise DataError("DMD initialization needs a uniform sampling interval")
        A = np.linalg.lstsq(np.concatenate(Q0), np.concatenate(Q1), rcond=rcond)[0]
        mu = np.linalg.eigvals(A)
        lam = np.empty(len(mu), dtype=complex)
        for i, m in enumerate(mu):
            if abs(m) <= 1e-14:
                lam[i] = 0.0
            elif abs(m.imag) <= 1e-12 * (1 + abs(m)):
                lam[i] = math.log(abs(m.real)) / step
            else:
                lam[i] = np.log(m) / step
        return real_block_basis(A, lam)
    raise DataError(f"unsupported dataset type {type(dataset).__name__}")


def init_from_dmd(dataset, D, normalizer, widths, seed, svd_embedding=True, zero_networks=False):
    """Build a model whose linear path reproduces SVD-DMD on ``dataset``.

    ``widths`` is ``(encoder_widths, decoder_widths)``. Eigenvalues with a
    positive real part are moved onto the imaginary axis.
    """
    enc_w, dec_w = [list(map(int, w)) for w in widths]
    N = normalizer.dim
    if dataset.dim != N:
        raise DimensionError(f"dataset has {dataset.dim} components, normalizer {N}")
    if len(dataset.states) < 2:
        raise DataError("need at least two snapshots")
    if enc_w[0] != N or enc_w[-1] != D or dec_w[0] != D or dec_w[-1] != N:
        raise DimensionError(f"widths {enc_w} / {dec_w} inconsistent with N={N}, D={D}")
    basis = svd_basis(dataset.states, normalizer, D)
    S, spectrum = dmd_generator(dataset, normalizer, basis)
    spectrum = _clamp(spectrum)
    n_pairs = int(np.sum(spectrum.imag > 0))
    pairs = [(spectrum[2 * i].real, spectrum[2 * i].imag) for i in range(n_pairs)]
    koopman = block_parameters(pairs, spectrum[2 * n_pairs:].real)
    if np.linalg.cond(S) > 1e12:
        S = np.eye(D)
    enc_seed, dec_seed = np.random.SeedSequence(seed).spawn(2)
    if zero_networks:
        encoder, decoder = zeros_net(enc_w), zeros_net(dec_w)
    else:
        encoder = init_truncated_normal(enc_w, enc_seed)
        decoder = init_truncated_normal(dec_w, dec_seed)
    if not svd_embedding:
        basis = np.zeros_like(basis)
    return KoopmanModel(normalizer, basis, encoder, decoder, koopman, S, np.linalg.inv(S))


def koopman_spectrum(model):
    return eigenvalues(ad.value(koopman_matrix(model)))


def eigenfunctions(model, X):
    """Koopman eigenvalues and eigenfunction values ``Phi(z) w_k`` on raw
    states ``X``, with ``K w_k = lambda_k w_k`` and unit-norm ``w_k``."""
    K = koopman_matrix(model)
    lam, W = np.linalg.eig(K)
    order = np.lexsort((-lam.imag, -lam.real))
    lam, W = lam[order], W[:, order]
    W = W / np.linalg.norm(W, axis=0)
    phi = encode(model, model.normalizer.normalize(np.atleast_2d(X)))
    return lam, phi @ W


def modal_amplitudes(model, X):
    """Eigenvalues with the RMS size of each mode's share of the latent
    state over the raw states ``X``, largest first."""
    K = ad.value(koopman_matrix(model))
    lam, W = np.linalg.eig(K)
    phi = encode(model, model.normalizer.normalize(np.atleast_2d(X)))
    coords = phi @ W
    # latent = coords @ inv(W); mode k contributes coords[:, k] * inv(W)[k]
    amp = np.sqrt(np.mean(np.abs(coords) ** 2, axis=0)) * np.linalg.norm(np.linalg.inv(W), axis=1)
    order = np.argsort(-amp, kind="stable")
    return lam[order], amp[order]


# checkpoints


def model_to_dict(model):
    def net(n):
        return {"widths": n.widths,
                "weights": [np.asarray(W).tolist() for W in n.weights],
                "biases": [np.asarray(b).tolist() for b in n.biases]}

    return {
        "format": "koopman-model",
        "format_version": FORMAT_VERSION,
        "N": model.N,
        "D": model.D,
        "normalizer": {"mean": model.normalizer.mean.tolist(),
                       "scale": model.normalizer.scale.tolist(),
                       "mode": model.normalizer.mode},
        "svd_basis": model.basis.tolist(),
        "encoder": net(model.encoder),
        "decoder": net(model.decoder),
        "enc_skip": np.asarray(model.enc_skip).tolist(),
        "dec_skip": np.asarray(model.dec_skip).tolist(),
        "koopman": {"zeta": np.asarray(model.koopman.zeta).tolist(),
                    "sigma": np.asarray(model.koopman.sigma).tolist()},
    }


def _get(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise FormatError("missing field", f"{path}.{key}" if path else key)
    return d[key]


def _array(d, key, path, ndim):
    where = f"{path}.{key}" if path else key
    try:
        arr = np.array(_get(d, key, path), dtype=float)
    except (TypeError, ValueError):
        raise FormatError("not a numeric array", where) from None
    if arr.ndim != ndim and not (arr.size == 0 and ndim == 1):
        raise FormatError(f"expected {ndim}-D array, got {arr.ndim}-D", where)
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite values", where)
    return arr.reshape(-1) if ndim == 1 else arr


def model_from_dict(d):
    version = _get(d, "format_version", "")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version!r}", "format_version")

    def net(key):
        n = _get(d, key, "")
        Ws = _get(n, "weights", key)
        bs = _get(n, "biases", key)
        if not isinstance(Ws, list) or not isinstance(bs, list) or len(Ws) != len(bs):
            raise FormatError("weights/biases must be equal-length lists", key)
        weights = [_array({"w": W}, "w", f"{key}.weights[{i}]", 2) for i, W in enumerate(Ws)]
        biases = [_array({"b": b}, "b", f"{key}.biases[{i}]", 1) for i, b in enumerate(bs)]
        try:
            return FeedForwardNet(weights, biases)
        except DimensionError as exc:
            raise FormatError(str(exc), key) from None

    nd = _get(d, "normalizer", "")
    try:
        normalizer = Normalizer(_array(nd, "mean", "normalizer", 1), _array(nd, "scale", "normalizer", 1),
                                _get(nd, "mode", "normalizer"))
    except (DimensionError, DomainError) as exc:
        raise FormatError(str(exc), "normalizer") from None
    kd = _get(d, "koopman", "")
    koopman = StableKoopman(_array(kd, "zeta", "koopman", 1), _array(kd, "sigma", "koopman", 1))
    try:
        return KoopmanModel(normalizer, _array(d, "svd_basis", "", 2), net("encoder"), net("decoder"),
                            koopman, _array(d, "enc_skip", "", 2), _array(d, "dec_skip", "", 2))
    except DimensionError as exc:
        raise FormatError(str(exc), "model") from None


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_checkpoint(path, model):
    Path(path).write_text(dumps(model_to_dict(model)))


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc})", str(path)) from None


def load_checkpoint(path):
    d = load_json(path)
    if _get(d, "format", "") != "koopman-model":
        raise FormatError(f"not a model checkpoint ({d.get('format')!r})", "format")
    return model_from_dict(d)
