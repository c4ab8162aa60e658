"""Feedforward networks with Swish hidden layers and a linear output layer."""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .errors import DimensionError

INIT_STDDEV = 0.1
INIT_TRUNCATION = 2.0


def swish(x):
    return ad.swish(x)


@dataclass
class FeedForwardNet:
    """Weights ``W_l`` are ``n_{l-1} x n_l``; inputs are row vectors.

    Entries may be numpy arrays or autodiff tensors; every function in this
    module accepts either.
    """

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("a network needs matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            ws, bs = np.shape(ad.value(W)), np.shape(ad.value(b))
            if len(ws) != 2 or bs != (ws[1],):
                raise DimensionError(f"layer {i}: weight {ws} and bias {bs} are inconsistent")
            if i and ws[0] != np.shape(ad.value(self.weights[i - 1]))[1]:
                raise DimensionError(f"layer {i}: input width {ws[0]} does not match previous layer")

    @property
    def widths(self):
        shapes = [np.shape(ad.value(W)) for W in self.weights]
        return [shapes[0][0]] + [s[1] for s in shapes]

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def parameters(self, prefix=""):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = W
            out[f"{prefix}b{i}"] = b
        return out

    @classmethod
    def from_parameters(cls, params, prefix=""):
        n = sum(1 for k in params if k.startswith(prefix + "W"))
        return cls([params[f"{prefix}W{i}"] for i in range(n)],
                   [params[f"{prefix}b{i}"] for i in range(n)])


def zeros_net(widths):
    return FeedForwardNet([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                          [np.zeros(b) for b in widths[1:]])


def _check_input(net, x):
    if np.shape(ad.value(x))[-1] != net.n_in:
        raise DimensionError(f"network expects input width {net.n_in}, got {np.shape(ad.value(x))[-1]}")


def forward(net, x):
    """Evaluate the network on a row vector or a batch of rows."""
    _check_input(net, x)
    h = x
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W + b
        h = a if i == last else ad.swish(a)
    return h


def forward_tangent(net, x, dx):
    """Output and its directional derivative ``dx . grad_x net(x)``.

    Forward-mode propagation expressed in taped ops, so the result can be
    differentiated again with respect to the weights.
    """
    _check_input(net, x)
    h, dh = x, dx
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W + b
        da = dh @ W
        if i == last:
            h, dh = a, da
        else:
            h, dh = ad.swish(a), ad.swish_prime(a) * da
    return h, dh


def input_jacobian(net, x):
    """``n_in x n_out`` matrix ``d out_k / d x_i`` by one reverse sweep per output."""
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_input(net, x)
    J = np.empty((net.n_in, net.n_out))
    for k in range(net.n_out):
        tape = ad.Tape()
        xt = tape.variable(x[None, :])
        y = forward(net, xt)
        J[:, k] = tape.gradient(ad.sum(y[:, k]), xt)[0]
    return J


def watch(tape, net):
    """Copy of ``net`` whose parameters are leaves on ``tape``."""
    return FeedForwardNet([tape.variable(W) for W in net.weights],
                          [tape.variable(b) for b in net.biases])


def grad_params(tape, loss, watched):
    """Gradient of ``loss`` w.r.t. the parameters of a watched network."""
    params = watched.parameters()
    grads = tape.gradient(loss, params)
    return ParameterVector.from_dict(grads)


def init_truncated_normal(widths, seed, stddev=INIT_STDDEV):
    """Weights i.i.d. normal(0, stddev) truncated at +-2 stddev; zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise DimensionError(f"invalid layer widths {widths}")
    rng = np.random.default_rng(seed)
    dist = stats.truncnorm(-INIT_TRUNCATION, INIT_TRUNCATION, loc=0.0, scale=stddev)
    weights = [dist.rvs(size=(a, b), random_state=rng) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return FeedForwardNet(weights, biases)


def truncated_normal_std(stddev=INIT_STDDEV):
    return float(stats.truncnorm(-INIT_TRUNCATION, INIT_TRUNCATION, scale=stddev).std())


class ParameterVector:
    """Ordered named arrays with a flat view.

    ``index[name]`` gives ``(offset, shape)`` into :attr:`flat`.
    """

    def __init__(self, names, shapes, flat):
        self.names = list(names)
        self.shapes = [tuple(s) for s in shapes]
        self.flat = np.asarray(flat, dtype=float)
        self.index = {}
        offset = 0
        for n, s in zip(self.names, self.shapes):
            self.index[n] = (offset, s)
            offset += int(np.prod(s, dtype=int))
        if offset != self.flat.size:
            raise DimensionError(f"flat vector has {self.flat.size} entries, layout needs {offset}")

    @classmethod
    def from_dict(cls, arrays):
        names = list(arrays)
        vals = [np.asarray(arrays[n], dtype=float) for n in names]
        flat = np.concatenate([v.ravel() for v in vals]) if vals else np.zeros(0)
        return cls(names, [v.shape for v in vals], flat)

    def to_dict(self):
        out = {}
        for n in self.names:
            offset, shape = self.index[n]
            size = int(np.prod(shape, dtype=int))
            out[n] = self.flat[offset:offset + size].reshape(shape).copy()
        return out

    def with_flat(self, flat):
        return ParameterVector(self.names, self.shapes, flat)

    def locate(self, i):
        """``(name, position)`` of flat coordinate ``i``."""
        for n in self.names:
            offset, shape = self.index[n]
            size = int(np.prod(shape, dtype=int))
            if offset <= i < offset + size:
                return n, np.unravel_index(i - offset, shape)
        raise IndexError(i)

    def __len__(self):
        return self.flat.size
