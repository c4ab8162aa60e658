"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` owns the recording. Leaves are created with
:meth:`Tape.variable`; every op applied to a :class:`Tensor` appends one node
to that tensor's tape. Ops given only plain arrays return plain arrays, so
model code written against this module runs untaped at numpy speed.

    tape = Tape()
    w = tape.variable(np.ones(3))
    loss = ad.sum(ad.square(w * x))
    (gw,) = tape.gradient(loss, [w])

A tape is single-use: :meth:`Tape.gradient` consumes it.
"""

import numpy as np
from scipy import special

from . import linalg
from .errors import DimensionError, TapeError


class Tape:
    def __init__(self):
        self._nodes = []
        self.consumed = False

    def _check(self):
        if self.consumed:
            raise TapeError("tape already consumed by a gradient sweep")

    def variable(self, value):
        self._check()
        return self._push(np.array(value, dtype=float), (), ())

    def _push(self, value, parents, vjps):
        node = Tensor(value, self, parents, vjps, len(self._nodes))
        self._nodes.append(node)
        return node

    def gradient(self, target, sources):
        """Gradients of scalar ``target`` w.r.t. ``sources``.

        ``sources`` may be a Tensor, a list/tuple of Tensors or a dict of
        Tensors; the result has the same structure. Sources the target does
        not depend on get zero gradients.
        """
        self._check()
        if not isinstance(target, Tensor) or target.tape is not self:
            raise TapeError("target was not recorded on this tape")
        if target.value.size != 1:
            raise DimensionError("gradient target must be a scalar")
        grads = {target.index: np.ones_like(target.value)}
        for node in reversed(self._nodes[: target.index + 1]):
            g = grads.get(node.index)
            if g is None or not node.parents:
                continue
            del grads[node.index]
            for parent, vjp in zip(node.parents, node.vjps):
                pg = vjp(g)
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        self.consumed = True
        self._nodes = []

        def pick(s):
            g = grads.get(s.index)
            return np.zeros_like(s.value) if g is None else g

        if isinstance(sources, Tensor):
            return pick(sources)
        if isinstance(sources, dict):
            return {k: pick(v) for k, v in sources.items()}
        return [pick(s) for s in sources]


class Tensor:
    __slots__ = ("value", "tape", "parents", "vjps", "index")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape, parents, vjps, index):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjps = vjps
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return swapaxes(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def value(x):
    return x.value if isinstance(x, Tensor) else x


def is_tensor(x):
    return isinstance(x, Tensor)


def _record(out, inputs, vjps):
    """Attach ``out`` to the tape of whichever inputs are tensors."""
    parents, fns, tape = [], [], None
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            parents.append(x)
            fns.append(fn)
    if tape is None:
        return out
    tape._check()
    return tape._push(out, tuple(parents), tuple(fns))


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# elementwise arithmetic


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not (is_tensor(a) or is_tensor(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), (lambda g: unbroadcast(g, sa), lambda g: unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not (is_tensor(a) or is_tensor(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), (lambda g: unbroadcast(g, sa), lambda g: -unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not (is_tensor(a) or is_tensor(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), (lambda g: unbroadcast(g * bv, sa), lambda g: unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    if not (is_tensor(a) or is_tensor(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        out,
        (a, b),
        (lambda g: unbroadcast(g / bv, sa), lambda g: unbroadcast(-g * out / bv, sb)),
    )


def neg(a):
    if not is_tensor(a):
        return -a
    return _record(-a.value, (a,), (lambda g: -g,))


def power(a, k):
    """``a ** k`` for a constant exponent ``k``."""
    av = value(a)
    out = av ** k
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g * k * av ** (k - 1),))


def square(a):
    av = value(a)
    if not is_tensor(a):
        return av * av
    return _record(av * av, (a,), (lambda g: 2.0 * g * av,))


def exp(a):
    out = np.exp(value(a))
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g * out,))


def log(a):
    av = value(a)
    out = np.log(av)
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g / av,))


def log1p(a):
    av = value(a)
    out = np.log1p(av)
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g / (1.0 + av),))


def sqrt(a):
    out = np.sqrt(value(a))
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: 0.5 * g / out,))


def gammaln(a):
    av = value(a)
    out = special.gammaln(av)
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g * special.digamma(av),))


def sigmoid(a):
    out = special.expit(value(a))
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g * out * (1.0 - out),))


def _swish_d1(x, s):
    return s * (1.0 + x * (1.0 - s))


def _swish_d2(x, s):
    ds = s * (1.0 - s)
    return ds * (1.0 + x * (1.0 - s)) + s * (1.0 - s - x * ds)


def swish(a):
    """``x * sigmoid(x)``."""
    av = value(a)
    s = special.expit(av)
    out = av * s
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g * _swish_d1(av, s),))


def swish_prime(a):
    """Derivative of swish, itself differentiable (needed for Jacobian losses)."""
    av = value(a)
    s = special.expit(av)
    out = _swish_d1(av, s)
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: g * _swish_d2(av, s),))


# reductions and shape manipulation


def sum(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not is_tensor(a):
        return out
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _record(out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    n = np.size(value(a)) if axis is None else np.prod([np.shape(value(a))[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    av = value(a)
    out = np.reshape(av, shape)
    if not is_tensor(a):
        return out
    orig = av.shape
    return _record(out, (a,), (lambda g: np.reshape(g, orig),))


def swapaxes(a, ax1=-1, ax2=-2):
    out = np.swapaxes(value(a), ax1, ax2)
    if not is_tensor(a):
        return out
    return _record(out, (a,), (lambda g: np.swapaxes(g, ax1, ax2),))


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    if not is_tensor(a):
        return out
    shape = av.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _record(out, (a,), (vjp,))


def concatenate(items, axis=0):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    if not any(is_tensor(x) for x in items):
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(out, items, [make(i) for i in range(len(items))])


def stack(items, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    if not any(is_tensor(x) for x in items):
        return out

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return _record(out, items, [make(i) for i in range(len(items))])


# linear algebra


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    if not (is_tensor(a) or is_tensor(b)):
        return out
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError("taped matmul requires operands with ndim >= 2")
    sa, sb = av.shape, bv.shape
    return _record(
        out,
        (a, b),
        (
            lambda g: unbroadcast(g @ np.swapaxes(bv, -1, -2), sa),
            lambda g: unbroadcast(np.swapaxes(av, -1, -2) @ g, sb),
        ),
    )


def solve(a, b):
    """``a^{-1} b`` for (batched) square ``a`` and matrix ``b``."""
    av, bv = value(a), value(b)
    out = np.linalg.solve(av, bv)
    if not (is_tensor(a) or is_tensor(b)):
        return out
    sa, sb = av.shape, bv.shape
    cache = {}

    def gb(g):
        if "gb" not in cache:
            cache["gb"] = np.linalg.solve(np.swapaxes(av, -1, -2), g)
        return cache["gb"]

    return _record(
        out,
        (a, b),
        (
            lambda g: unbroadcast(-gb(g) @ np.swapaxes(out, -1, -2), sa),
            lambda g: unbroadcast(gb(g), sb),
        ),
    )


def tridiag(diag, upper):
    """Matrix with ``diag`` on the diagonal, ``upper`` above it and ``-upper`` below."""
    d, u = value(diag), value(upper)
    n = d.shape[0]
    if u.shape != (max(n - 1, 0),):
        raise DimensionError(f"tridiag needs {n - 1} couplings, got {u.shape}")
    out = np.diag(d)
    if n > 1:
        out = out + np.diag(u, 1) - np.diag(u, -1)
    if not (is_tensor(diag) or is_tensor(upper)):
        return out
    return _record(
        out,
        (diag, upper),
        (lambda g: np.diagonal(g).copy(), lambda g: np.diagonal(g, 1) - np.diagonal(g, -1)),
    )


def expm(A):
    """Matrix exponential over the last two axes, differentiable through the
    unrolled scaling-and-squaring steps. One squaring count is shared across
    a batch, chosen from its largest 1-norm."""
    s = linalg.scaling_exponent(linalg.norm1(value(A)))
    return linalg.pade13_expm(A, s, matmul, solve)
