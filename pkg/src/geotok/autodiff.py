"""Reverse-mode automatic differentiation over dense float64 arrays.

Each operation returns a new :class:`Tensor` that remembers its parents and
a closure propagating the output gradient back to them. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in
reverse topological order.
"""

import contextlib

import numpy as np
from scipy import sparse
from scipy.special import erf

from .errors import DomainError, TapeError, TrainingError

_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


class Tensor:
    """A float64 array with an optional gradient and a link into the tape."""

    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self._parents = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.value.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        # gradient arrays may be shared between tape nodes, so they are never updated in place
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Fill ``.grad`` of every requires-grad leaf with d(self)/d(leaf)."""
        if self.value.size != 1:
            raise DomainError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise TapeError("backward was already called on this graph; rebuild it before differentiating again")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate results are released so a second sweep cannot silently reuse them
        for node in order:
            if not node.is_leaf:
                node.grad = None
                node._parents = ()
                node._backward = None
                node._spent = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name=None):
    return Tensor(value, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward):
    """Create an op output; the tape link is kept only when a parent needs gradients."""
    out = Tensor(value)
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DomainError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), backward)


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * av, b.shape))

    return _node(av * bv, (a, b), backward)


def scale(a, c):
    """Multiply by a plain (non-differentiable) scalar."""
    c = float(c)

    def backward(g):
        a._accumulate(c * g)

    return _node(a.value * c, (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ bv.T)
        if b.requires_grad:
            b._accumulate(av.T @ g)

    return _node(av @ bv, (a, b), backward)


def transpose(a):
    def backward(g):
        a._accumulate(g.T)

    return _node(a.value.T.copy(), (a,), backward)


def exp(a):
    y = np.exp(a.value)

    def backward(g):
        a._accumulate(g * y)

    return _node(y, (a,), backward)


def relu(a):
    on = a.value > 0

    def backward(g):
        a._accumulate(g * on)

    return _node(a.value * on, (a,), backward)


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)

    def backward(g):
        a._accumulate(g * (cdf + x * pdf))

    return _node(x * cdf, (a,), backward)


def softplus(a):
    x = a.value
    y = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(g):
        a._accumulate(g * sig)

    return _node(y, (a,), backward)


def total(a):
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape

    def backward(g):
        a._accumulate(np.broadcast_to(g, shape).copy())

    return _node(a.value.sum(), (a,), backward)


def mean_rows(a):
    """Column means as a ``1 x D`` row."""
    n = a.shape[0]

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape).copy())

    return _node(a.value.mean(axis=0, keepdims=True), (a,), backward)


# --------------------------------------------------------------------------
# normalization and regularization


def softmax_rows(a, mask=None):
    """Row-wise softmax of ``a + mask``; ``mask`` is a constant additive array."""
    z = a.value if mask is None else a.value + np.asarray(mask, dtype=np.float64)
    if z.ndim != 2:
        raise DomainError(f"softmax_rows expects a matrix, got shape {a.shape}")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _node(y, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each row to zero mean and unit variance, then apply ``gamma * . + beta``."""
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    sigma = np.sqrt(xv.var(axis=1, keepdims=True) + eps)
    xhat = (xv - mu) / sigma
    gv = gamma.value

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            d = g * gv
            x._accumulate((d - d.mean(axis=1, keepdims=True)
                           - xhat * (d * xhat).mean(axis=1, keepdims=True)) / sigma)

    return _node(xhat * gv + beta.value, (x, gamma, beta), backward)


def dropout(a, p, rng, training):
    """Inverted dropout: zero entries with probability ``p``, rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)

    def backward(g):
        a._accumulate(g * keep)

    return _node(a.value * keep, (a,), backward)


# --------------------------------------------------------------------------
# structural


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DomainError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _node(value, tensors, backward)


def slice_cols(a, start, stop):
    def backward(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        a._accumulate(full)

    return _node(a.value[:, start:stop].copy(), (a,), backward)


def _grouping(index, n_groups):
    """Sparse ``n_groups x len(index)`` matrix summing rows that share a group."""
    m = len(index)
    return sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_groups, m))


def gather_rows(a, index):
    """``a[index]``; gradients of repeated rows are summed."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise DomainError(f"gather_rows: index out of range for {n} rows")

    def backward(g):
        a._accumulate(_grouping(index, n) @ g)

    return _node(a.value[index], (a,), backward)


def _check_segments(op, a, segments, n_segments):
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (a.shape[0],):
        raise DomainError(f"{op}: {len(segments)} segment ids for {a.shape[0]} rows")
    if segments.min() < 0 or segments.max() >= n_segments:
        raise DomainError(f"{op}: segment ids must lie in [0, {n_segments})")
    return segments


def segment_sum(a, segments, n_segments):
    """Row ``s`` of the result sums the rows of ``a`` whose segment id is ``s``."""
    segments = _check_segments("segment_sum", a, segments, n_segments)
    S = _grouping(segments, n_segments)

    def backward(g):
        a._accumulate(g[segments])

    return _node(S @ a.value, (a,), backward)


def segment_softmax(a, segments, n_segments):
    """Softmax over the rows of each segment, independently per column."""
    segments = _check_segments("segment_softmax", a, segments, n_segments)
    counts = np.bincount(segments, minlength=n_segments)
    if counts.min() == 0:
        raise DomainError("segment_softmax: every segment needs at least one row")
    order = np.argsort(segments, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    peak = np.maximum.reduceat(a.value[order], starts, axis=0)
    e = np.exp(a.value - peak[segments])
    S = _grouping(segments, n_segments)
    y = e / (S @ e)[segments]

    def backward(g):
        a._accumulate(y * (g - (S @ (g * y))[segments]))

    return _node(y, (a,), backward)


def spectral_diffuse(x, t, eigenvalues, eigenvectors, mass):
    """Heat diffusion of each column of ``x`` for its own time ``t[d]`` in a truncated eigenbasis.

    ``out = Phi (exp(-lam t) * Phi^T W x)``; differentiable in both ``x``
    and ``t``.
    """
    if x.shape[0] != eigenvectors.shape[0]:
        raise DomainError(f"spectral_diffuse: x has {x.shape[0]} rows, basis has {eigenvectors.shape[0]}")
    if t.shape != (x.shape[1],):
        raise DomainError(f"spectral_diffuse: need one time per channel, got {t.shape} for {x.shape[1]} channels")
    phi = eigenvectors
    coeff = phi.T @ (mass[:, None] * x.value)
    decay = np.exp(-np.outer(eigenvalues, t.value))

    def backward(g):
        proj = phi.T @ g
        if x.requires_grad:
            x._accumulate(mass[:, None] * (phi @ (decay * proj)))
        if t.requires_grad:
            t._accumulate(-(proj * coeff * decay * eigenvalues[:, None]).sum(axis=0))

    return _node(phi @ (decay * coeff), (x, t), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DomainError(f"cross_entropy: {len(labels)} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        logits._accumulate(g * d / n)

    return _node(-logp[rows, labels].mean(), (logits,), backward)


# --------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction and a step learning-rate schedule.

    The learning rate is ``lr * decay_factor ** (epoch // decay_every)``.
    ``weight_decay`` adds a plain L2 term to the gradient and is off by
    default.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, decay_every=50, decay_factor=0.5,
                 weight_decay=0.0):
        self.params = dict(params)
        self.base_lr = float(lr)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.decay_every = int(decay_every)
        self.decay_factor = float(decay_factor)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def set_epoch(self, epoch):
        self.lr = self.base_lr * self.decay_factor ** (epoch // self.decay_every) if self.decay_every > 0 \
            else self.base_lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {}
        for k, p in self.params.items():
            g = np.zeros_like(p.value) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {k!r}")
            grads[k] = g + self.weight_decay * p.value if self.weight_decay else g
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.value -= (self.lr / c1) * m / denom


# --------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(fn, tensor, h=1e-6):
    """Central-difference gradient of scalar ``fn()`` with respect to ``tensor.value``."""
    grad = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(fn().value)
            flat[i] = old - h
            down = float(fn().value)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_check(fn, tensors, h=1e-6):
    """Largest relative error between backprop and central differences over ``tensors``.

    The error for each tensor is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-12)``
    in the Frobenius norm.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        auto = np.zeros_like(t.value) if t.grad is None else t.grad
        fd = numerical_gradient(fn, t, h)
        denom = max(np.linalg.norm(auto), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(auto - fd) / denom))
    return worst
