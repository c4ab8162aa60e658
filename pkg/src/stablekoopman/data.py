"""Benchmark systems, sampling, datasets, POD and noise injection."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, DomainError, FormatError, NumericError
from .linalg import thin_svd


@dataclass
class SystemDef:
    """An autonomous vector field ``F`` acting on row-vector states.

    ``field`` maps an ``(M, N)`` array of states to their time derivatives.
    """

    name: str
    dim: int
    field: object
    params: dict = field(default_factory=dict)
    reference: object = None

    def __call__(self, x):
        return self.field(np.asarray(x, dtype=float))


def fixed_point_system(mu=-0.05, lam=-1.0):
    def F(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([mu * x1, lam * (x2 - x1 ** 2)], axis=-1)

    ref = analytic_reference_fixed_point(mu, lam) if lam != 2 * mu else None
    return SystemDef("fixed-point", 2, F, {"mu": mu, "lam": lam}, ref)


def duffing_system(delta=0.5, beta=-1.0, alpha=1.0):
    def F(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -delta * x2 - x1 * (beta + alpha * x1 ** 2)], axis=-1)

    return SystemDef("duffing", 2, F, {"delta": delta, "beta": beta, "alpha": alpha})


def linear_system(A):
    """``xdot = x A`` (row-vector convention)."""
    A = np.asarray(A, dtype=float)
    return SystemDef("linear", A.shape[0], lambda x: x @ A, {"A": A.tolist()})


def hopf_system(omega=0.5, radius=1.0):
    """Stable limit cycle of the given radius with angular frequency ``omega``."""
    mu = radius ** 2

    def F(x):
        x1, x2 = x[..., 0], x[..., 1]
        g = mu - x1 ** 2 - x2 ** 2
        return np.stack([g * x1 - omega * x2, g * x2 + omega * x1], axis=-1)

    return SystemDef("hopf", 2, F, {"omega": omega, "radius": radius})


SYSTEMS = {
    "fixed-point": fixed_point_system,
    "duffing": duffing_system,
    "hopf": hopf_system,
}


def get_system(name, **params):
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise DomainError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return factory(**params)


def integrate_rk4(system, x0, dt, steps):
    """Classical fixed-step RK4. ``x0`` may be one state or a batch of states;
    the result has a leading time axis of length ``steps + 1``."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    x = np.array(x0, dtype=float)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for i in range(steps):
        # overflow is reported below as a blow-up, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = system(x)
            k2 = system(x + 0.5 * dt * k1)
            k3 = system(x + 0.5 * dt * k2)
            k4 = system(x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"state blew up at step {i + 1}")
        out[i + 1] = x
    return out


def lhs_sample(bounds, n, seed):
    """Latin hypercube: one point per stratum along every axis."""
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise DimensionError("bounds must be a list of (low, high) pairs")
    if n < 1:
        raise DomainError("n must be at least 1")
    if not np.all(np.isfinite(bounds)) or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise DomainError("bounds must be finite with low < high")
    rng = np.random.default_rng(seed)
    d = bounds.shape[0]
    u = np.empty((n, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


@dataclass
class DerivativeDataset:
    """Pairs of states and exact time derivatives."""

    X: np.ndarray
    Xdot: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Xdot = np.asarray(self.Xdot, dtype=float)
        if self.X.ndim != 2 or self.X.shape != self.Xdot.shape:
            raise DimensionError("X and Xdot must be equal-shaped 2-D arrays")

    @property
    def states(self):
        return self.X

    @property
    def dim(self):
        return self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]


@dataclass
class Trajectory:
    t: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.t.shape != (self.X.shape[0],):
            raise DimensionError("trajectory needs t of shape (T,) and X of shape (T, N)")
        if np.any(np.diff(self.t) <= 0):
            raise DataError("trajectory times must be strictly increasing")


@dataclass
class TrajectoryDataset:
    trajectories: list

    @property
    def states(self):
        return np.concatenate([tr.X for tr in self.trajectories], axis=0)

    @property
    def dim(self):
        return self.trajectories[0].X.shape[1]

    def __len__(self):
        return len(self.trajectories)


def make_diff_dataset(system, points):
    points = np.asarray(points, dtype=float)
    return DerivativeDataset(points, system(points))


def simulate_trajectories(system, x0s, dt, n_samples, substeps=10):
    """Sample trajectories at interval ``dt``, integrating with ``dt / substeps``."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    path = integrate_rk4(system, x0s, dt / substeps, (n_samples - 1) * substeps)
    path = path[::substeps]
    t = dt * np.arange(n_samples)
    return TrajectoryDataset([Trajectory(t, path[:, i, :]) for i in range(x0s.shape[0])])


@dataclass
class PodBasis:
    mean: np.ndarray
    modes: np.ndarray
    singular_values: np.ndarray
    energy_ratio: float

    def project(self, snapshots):
        return (np.asarray(snapshots, dtype=float) - self.mean) @ self.modes

    def reconstruct(self, coeffs):
        return np.asarray(coeffs) @ self.modes.T + self.mean

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "modes": self.modes.tolist(),
            "singular_values": self.singular_values.tolist(),
            "energy_ratio": self.energy_ratio,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["modes"]),
                   np.asarray(d["singular_values"]), float(d["energy_ratio"]))


def pod_project(snapshots, r):
    """Centered POD. Returns the basis and the ``M x r`` coefficient series."""
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2:
        raise DimensionError("snapshots must be a 2-D array")
    if not 1 <= r <= min(X.shape):
        raise DimensionError(f"rank {r} must lie in [1, {min(X.shape)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, V = thin_svd(Xc)
    total = float(np.sum(s ** 2))
    ratio = float(np.sum(s[:r] ** 2) / total) if total > 0 else 1.0
    basis = PodBasis(mean, V[:, :r], s, ratio)
    return basis, Xc @ basis.modes


def add_noise(coeffs, ratio, seed):
    """Gaussian noise with per-component stddev ``ratio * std_j`` (uncorrected)."""
    C = np.asarray(coeffs, dtype=float)
    if ratio < 0:
        raise DomainError("noise ratio must be nonnegative")
    if ratio == 0:
        return C.copy()
    rng = np.random.default_rng(seed)
    scale = ratio * C.std(axis=0)
    return C + rng.standard_normal(C.shape) * scale


def analytic_reference_fixed_point(mu, lam):
    """Koopman eigenvalues and eigenfunctions of the fixed-point attractor.

    Returns ``(eigenvalues, {eigenvalue: evaluator})`` where each evaluator
    maps ``(M, 2)`` states to ``(M,)`` values.
    """
    if lam == 2 * mu:
        raise DomainError("resonant parameters: lam == 2 mu")
    c = lam / (lam - 2.0 * mu)
    funcs = {
        mu: lambda x: np.asarray(x)[..., 0],
        lam: lambda x: np.asarray(x)[..., 1] - c * np.asarray(x)[..., 0] ** 2,
    }
    return np.array([mu, lam]), funcs


def limit_cycle_surrogate(n_full=50, n_snapshots=1245, dt=0.1, omega=0.5,
                          harmonics=3, r0=0.05, seed=0):
    """High-dimensional snapshots of a transient onto a stable limit cycle.

    The 2-D Hopf oscillator is started near its unstable equilibrium and
    lifted to ``n_full`` dimensions by a fixed random linear map applied to
    its first ``harmonics`` complex harmonics (amplitudes decaying as
    ``1/k``), mimicking a wake that develops into periodic shedding.
    Returns ``(times, snapshots)``.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi)
    traj = simulate_trajectories(hopf_system(omega), [[r0 * math.cos(phase), r0 * math.sin(phase)]],
                                 dt, n_snapshots)
    x = traj.trajectories[0].X
    zc = x[:, 0] + 1j * x[:, 1]
    feats = []
    for k in range(1, harmonics + 1):
        zk = zc ** k / k
        feats += [zk.real, zk.imag]
    F = np.stack(feats, axis=1)
    lift = rng.standard_normal((F.shape[1], n_full)) / math.sqrt(F.shape[1])
    offset = rng.standard_normal(n_full)
    return traj.trajectories[0].t, F @ lift + offset


# CSV formats


def _fmt(v):
    return repr(float(v))


def write_derivative_csv(path, data):
    N = data.dim
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(N)] + [f"xdot_{i + 1}" for i in range(N)])
        for x, xd in zip(data.X, data.Xdot):
            w.writerow([_fmt(v) for v in x] + [_fmt(v) for v in xd])


def write_trajectory_csv(path, data):
    N = data.dim
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", "t"] + [f"x_{i + 1}" for i in range(N)])
        for k, tr in enumerate(data.trajectories):
            for t, x in zip(tr.t, tr.X):
                w.writerow([k, _fmt(t)] + [_fmt(v) for v in x])


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError("empty file", str(path))
    return rows[0], rows[1:]


def read_dataset_csv(path):
    """Read a derivative or trajectory CSV, detected from its header."""
    header, rows = _read_rows(path)
    try:
        body = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise FormatError(f"non-numeric entry ({exc})", str(path)) from None
    if header[:2] == ["traj_id", "t"]:
        N = len(header) - 2
        if N < 1 or body.ndim != 2 or body.shape[1] != N + 2:
            raise FormatError("malformed trajectory table", str(path))
        trajs = []
        ids = body[:, 0]
        for k in dict.fromkeys(ids.tolist()):
            sel = body[ids == k]
            trajs.append(Trajectory(sel[:, 1], sel[:, 2:]))
        return TrajectoryDataset(trajs)
    N = len(header) // 2
    expected = [f"x_{i + 1}" for i in range(N)] + [f"xdot_{i + 1}" for i in range(N)]
    if header != expected:
        raise FormatError("header is neither x_*/xdot_* nor traj_id,t,x_*", str(path))
    if body.ndim != 2 or body.shape[1] != 2 * N:
        raise FormatError("malformed derivative table", str(path))
    return DerivativeDataset(body[:, :N], body[:, N:])


def write_snapshot_csv(path, snapshots, dt, reference_scales=None):
    """One snapshot per row plus ``<path>.meta.json`` holding ``dt``."""
    snapshots = np.asarray(snapshots, dtype=float)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in snapshots:
            w.writerow([_fmt(v) for v in row])
    meta = {"dt": float(dt), "reference_scales": reference_scales or {}}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_snapshot_csv(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as f:
        try:
            X = np.array([[float(v) for v in r] for r in csv.reader(f) if r], dtype=float)
        except ValueError as exc:
            raise FormatError(f"non-numeric entry ({exc})", str(path)) from None
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if "dt" not in meta:
        raise FormatError("metadata file missing or lacks 'dt'", str(meta_path))
    return X, meta
