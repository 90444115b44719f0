"""Dense float tensors with define-by-run reverse-mode autodiff.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a closure computing the vector-Jacobian product. Node ids are
handed out in creation order, which is a valid topological order of the
graph; :class:`GradTape` uses that to replay the backward pass.

Leading batch dimensions are allowed everywhere so a minibatch of sequences
can be pushed through the model as one ``(B, d, L)`` array.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradTape",
    "ContractError",
    "DimensionError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "concat",
    "broadcast_to",
    "activation",
    "layer_norm",
    "masked_softmax",
    "cross_entropy",
    "embedding",
    "dropout",
    "backward",
    "ACTIVATIONS",
]

_ids = itertools.count()
_grad_enabled = True


class ContractError(RuntimeError):
    """Raised when an operation is used outside its stated preconditions."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, landscape scans)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float array that participates in the gradient graph.

    Data is stored as float64 unless it arrives as a float32 array, which is
    kept as is so that whole models can run in single precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# graph replay


class GradTape:
    """Ordered record of the operations reachable from a root tensor.

    ``nodes`` lists every recorded tensor feeding the root, parents before
    children. :meth:`replay` walks it in reverse exactly once per node.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in seen or not node.requires_grad:
                continue
            seen[node.node_id] = node
            stack.extend(node._parents)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {root.node_id: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf feeding ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = GradTape.from_root(loss)
    tape.replay(loss, np.ones_like(loss.data))


# ----------------------------------------------------------------------------
# linear algebra and elementwise


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 2 or A.ndim >= B.ndim:
                ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
            else:
                ga = _batched_outer(g, B, A.shape, left=True)
        if b.requires_grad:
            if A.ndim == 2 and B.ndim > 2:
                gb = np.swapaxes(A, -1, -2) @ g
            elif B.ndim == 2 and A.ndim > 2:
                gb = _batched_outer(A, g, B.shape, left=False)
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _make(A @ B, (a, b), bw)


def _batched_outer(x: np.ndarray, y: np.ndarray, shape, left: bool) -> np.ndarray:
    # Gradient of a 2-D operand broadcast against a batched one.
    if left:
        # dA = sum_b g_b @ B_b^T
        prod = x @ np.swapaxes(y, -1, -2)
        return prod.reshape((-1,) + tuple(shape)).sum(axis=0)
    # dB = sum_b A_b^T @ g_b, stacking the rows of every batch item
    ax = x.reshape(-1, x.shape[-1])
    gy = y.reshape(-1, y.shape[-1])
    return (ax.T @ gy).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


# ----------------------------------------------------------------------------
# nonlinearities

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _relu(x):
    return np.maximum(x, 0.0), lambda: (x > 0).astype(x.dtype)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, lambda: cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _mish(x):
    sp = np.logaddexp(0.0, x)
    t = np.tanh(sp)
    # d/dx softplus = sigmoid(x)
    return x * t, lambda: t + x * (1.0 - t * t) * (0.5 * (1.0 + np.tanh(0.5 * x)))


ACTIVATIONS = {"relu": _relu, "gelu": _gelu, "mish": _mish}

# Lipschitz constants of the three activations on the real line.
ACTIVATION_LIPSCHITZ = {"relu": 1.0, "gelu": 1.1289, "mish": 1.0885}


def activation(x: Tensor, kind: str = "relu") -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    y, deriv = fn(x.data)
    return _make(y, (x,), lambda g: (g * deriv(),))


def layer_norm(x: Tensor, eps: float = 1e-5, axis: int = -2) -> Tensor:
    """Parameter-free LayerNorm ``(x - mean) / sqrt(eps + var)`` along ``axis``.

    The default axis normalizes each token column of a ``(..., d, L)`` array.
    """
    X = x.data
    fast = X.ndim >= 2 and axis in (-2, X.ndim - 2)
    avg = np.full((1, X.shape[-2]), 1.0 / X.shape[-2], dtype=X.dtype) if fast else None

    def mean(a):
        # reductions over the middle axis run much faster as a GEMV
        return avg @ a if fast else a.mean(axis=axis, keepdims=True)

    xc = X - mean(X)
    var = mean(xc * xc)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        return (inv * (g - mean(g) - y * mean(g * y)),)

    return _make(y, (x,), bw)


# additive penalty for masked scores, by float width in bytes
_MASKED = {4: -1e37, 8: -1e300}


def masked_softmax(d: Tensor, mask: np.ndarray | None = None, axis: int = -2) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is one.

    ``mask=None`` means every entry is kept. The maximum is taken over the
    unmasked entries only before exponentiating.
    """
    D = d.data
    if mask is None:
        z = D - D.max(axis=axis, keepdims=True)
    else:
        m = np.asarray(mask, dtype=bool)
        if not m.any(axis=axis).all():
            raise ContractError("mask has a column with no unmasked entries")
        # masked entries are pushed far below any finite score, so both the
        # max and exp() ignore them
        z = D + (~m) * D.dtype.type(_MASKED[D.dtype.itemsize])
        z -= z.max(axis=axis, keepdims=True)
    # terms below the smallest normal float would only come out subnormal,
    # which is slow on most CPUs and far below rounding of the column sum
    np.putmask(z, z < np.log(np.finfo(z.dtype).tiny), -np.inf)
    e = np.exp(z)
    a = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (a * (g - (g * a).sum(axis=axis, keepdims=True)),)

    return _make(a, (d,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading batch axis.

    Accepts a single logit vector ``(Y,)`` with an integer label, or a batch
    ``(B, Y)`` with a length-``B`` label array.
    """
    Z = logits.data
    single = Z.ndim == 1
    Z2 = Z[None, :] if single else Z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = Z2.shape
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if (y < 0).any() or (y >= k).any():
        raise IndexError(f"label out of range [0, {k})")
    zmax = Z2.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z2 - zmax).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - Z2[rows, y]))

    def bw(g):
        p = np.exp(Z2 - lse[:, None])
        p[rows, y] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _make(np.asarray(loss), (logits,), bw)


def embedding(table: Tensor, tokens: np.ndarray) -> Tensor:
    """Column lookup: ``table`` is ``(d, V)``, ``tokens`` ``(..., L)`` -> ``(..., d, L)``."""
    tok = np.asarray(tokens, dtype=np.int64)
    V = table.shape[1]
    if tok.size and (tok.min() < 0 or tok.max() >= V):
        raise IndexError(f"token id outside vocabulary of size {V}")
    out = np.moveaxis(table.data[:, tok], 0, -2)

    def bw(g):
        gt = np.moveaxis(g, -2, 0).reshape(table.shape[0], -1)
        onehot = np.zeros((tok.size, V), dtype=g.dtype)
        onehot[np.arange(tok.size), tok.ravel()] = 1.0
        return (gt @ onehot,)

    return _make(np.ascontiguousarray(out), (table,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = _dropout_keep(x.shape, rate, rng, x.data.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def _dropout_keep(shape, rate: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    # i.i.d. Bernoulli drops placed by geometric gaps, which needs only about
    # rate * size draws instead of one per element
    n = int(np.prod(shape))
    keep = np.full(n, 1.0 / (1.0 - rate), dtype=dtype)
    chunk = int(n * rate * 1.2) + 16
    pos = np.cumsum(rng.geometric(rate, size=chunk)) - 1
    while pos[-1] < n - 1:
        pos = np.concatenate([pos, pos[-1] + np.cumsum(rng.geometric(rate, size=chunk))])
    keep[pos[pos < n]] = 0.0
    return keep.reshape(shape)
