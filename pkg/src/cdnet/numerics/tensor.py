"""Dense arrays with reverse-mode differentiation.

Every op builds a node holding its value, its parents and a closure that
pushes the output gradient back to the parents.  ``backward`` walks the
graph in reverse topological order, so a tensor consumed k times receives
the sum of its k partial gradients.

Arrays are batched along the leading axis where that makes sense: a
``(B, d)`` tensor is B feature vectors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor that collects gradients. Rejects non-finite input."""
    arr = np.array(data, dtype=getattr(data, "dtype", DEFAULT_DTYPE), copy=True)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    _require_finite(arr, name or "parameter")
    return Tensor(arr, requires_grad=True, name=name)


def as_tensor(x, name: str | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    _require_finite(arr, name or "input")
    return Tensor(arr, name=name)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{what} contains NaN or Inf")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward_fn if needs else None)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor requiring grad."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    _require_finite(loss.data, "loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed once propagated
            if node._parents:
                node.grad = None


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` with respect to each named leaf (zeros if unused)."""
    for p in params.values():
        p.zero_grad()
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), _bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        a._accumulate(c * g)

    return _node(c * a.data, (a,), _bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def _bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(out > 0, 0.5 / out, 0.0)
        a._accumulate(g * local)

    return _node(out, (a,), _bw)


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0

    def _bw(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), _bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))), np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def _bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _node(out, (x,), _bw)


def prelu(x, slope) -> Tensor:
    """max(x, 0) + slope * min(x, 0) with one shared scalar slope.

    At exactly 0 the positive branch is used, so d/dx = 1 there.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.data.size != 1:
        raise ContractViolation(f"prelu slope must be a scalar, got shape {slope.shape}")
    a = slope.data.reshape(())
    pos = x.data >= 0
    neg_part = np.where(pos, 0.0, x.data)

    def _bw(g):
        if x.requires_grad:
            x._accumulate(np.where(pos, g, a * g))
        if slope.requires_grad:
            slope._accumulate(np.sum(g * neg_part).reshape(slope.shape))

    return _node(np.where(pos, x.data, a * x.data), (x, slope), _bw)


# ------------------------------------------------------------------ structure


def linear(x, M, b=None) -> Tensor:
    """x @ M.T (+ b). ``x`` may be a single vector or a batch of row vectors."""
    x, M = as_tensor(x), as_tensor(M)
    if M.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != M.shape[1]:
        raise ContractViolation(f"linear: cannot apply matrix {M.shape} to input {x.shape}")
    out = x.data @ M.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (M.shape[0],):
            raise ContractViolation(f"linear: bias shape {b.shape} does not match output width {M.shape[0]}")
        out = out + b.data
        parents = (x, M, b)
    else:
        parents = (x, M)

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g @ M.data)
        if M.requires_grad:
            M._accumulate(np.outer(g, x.data) if x.data.ndim == 1 else g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    return _node(out, parents, _bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def _bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out, tuple(ts), _bw)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _node(np.array(out, copy=True), (x,), _bw)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), _bw)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def _bw(g):
        x._accumulate(np.broadcast_to(g if axis is None else np.expand_dims(g, axis), x.shape))

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), _bw)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def weighted_sum(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    total = None
    for w, t in terms:
        part = t if w == 1.0 else scale(t, w)
        total = part if total is None else add(total, part)
    return total


# ---------------------------------------------------------------- reductions


def softmax_cross_entropy(logits, labels) -> Tensor:
    """-log softmax(logits)[label], averaged over rows for batched logits.

    Uses max-subtraction so logits of any finite magnitude are safe.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    n, C = z.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ContractViolation(f"cross-entropy: need {n} integer labels, got {labels!r}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractViolation(f"cross-entropy: label out of range [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = log_norm - shifted[rows, labels]
    out = np.asarray(losses.mean())

    def _bw(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        probs *= g / n
        logits._accumulate(probs[0] if single else probs)

    return _node(out, (logits,), _bw)


def squared_l2(u, v) -> Tensor:
    """Sum of squared differences over all entries."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ContractViolation(f"squared_l2: shape mismatch {u.shape} vs {v.shape}")
    diff = u.data - v.data

    def _bw(g):
        if u.requires_grad:
            u._accumulate(2.0 * g * diff)
        if v.requires_grad:
            v._accumulate(-2.0 * g * diff)

    return _node(np.asarray(np.sum(diff * diff)), (u, v), _bw)


def pairwise_sq_dists(q, c) -> Tensor:
    """(M, N) matrix of squared Euclidean distances between rows of q and c."""
    q, c = as_tensor(q), as_tensor(c)
    if q.data.ndim != 2 or c.data.ndim != 2 or q.shape[1] != c.shape[1]:
        raise ContractViolation(f"pairwise_sq_dists: incompatible shapes {q.shape}, {c.shape}")
    diff = q.data[:, None, :] - c.data[None, :, :]
    out = np.einsum("mnd,mnd->mn", diff, diff)

    def _bw(g):
        w = 2.0 * g[:, :, None] * diff
        if q.requires_grad:
            q._accumulate(w.sum(axis=1))
        if c.requires_grad:
            c._accumulate(-w.sum(axis=0))

    return _node(out, (q, c), _bw)
