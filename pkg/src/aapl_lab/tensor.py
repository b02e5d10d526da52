"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of operations the prompt-learning objective needs are
provided. Operations record themselves on the thread's active
:class:`GradientTape` whenever at least one operand has ``requires_grad``;
outside a tape they are plain numpy computations.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradientTape():
    ...     y = tsum(scale(x, 3.0))
    >>> backward(y)[x].data
    array([3., 3.])
"""
from __future__ import annotations

import math
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

_local = threading.local()


def _active_tape() -> GradientTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array that may take part in a gradient tape.

    Tensors hash by identity so they can key :class:`Gradients`.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: GradientTape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def node_id(self) -> int | None:
        return self._node

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __mul__(self, s: float) -> Tensor:
        return scale(self, s)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class GradientTape:
    """Append-only record of differentiable operations.

    Use as a context manager around a forward pass; the tape stays
    readable after the block exits so :func:`backward` can run on it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # smallest distance of any recorded input to a non-differentiable point
        self.kink_margin = float("inf")

    def __enter__(self) -> GradientTape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def note_kink(self, distance: float) -> None:
        self.kink_margin = min(self.kink_margin, float(distance))

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, parents, vjp))

    def gradient(self, loss: Tensor) -> Gradients:
        return backward(loss)


class Gradients(Mapping):
    """Mapping from tensor (by identity) to its gradient tensor."""

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, Tensor]] = {}

    def _set(self, t: Tensor, g: np.ndarray) -> None:
        self._grads[id(t)] = (t, Tensor(g))

    def __getitem__(self, t: Tensor) -> Tensor:
        try:
            return self._grads[id(t)][1]
        except KeyError:
            raise KeyError(f"no gradient recorded for {t!r}") from None

    def __contains__(self, t) -> bool:
        return id(t) in self._grads

    def __iter__(self) -> Iterator[Tensor]:
        return (t for t, _ in self._grads.values())

    def __len__(self) -> int:
        return len(self._grads)


def _all_finite(arr: np.ndarray) -> bool:
    # any nan/inf element makes the sum non-finite, so a finite sum settles it cheaply
    return math.isfinite(arr.sum()) or bool(np.isfinite(arr).all())


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not _all_finite(arr):
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _note_kink(a: Tensor, distance: float, *others: Tensor) -> None:
    tape = _active_tape()
    if tape is not None and (a.requires_grad or any(o.requires_grad for o in others)):
        tape.note_kink(distance)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
    out.requires_grad = False
    out.name = None
    out._tape = None
    out._node = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape._record(out, parents, vjp)
    return out


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss`` over the tape that produced it.

    Nodes are visited once each, in reverse recording order (a valid reverse
    topological order for an append-only tape). Tensors the loss does not
    depend on get no entry at all.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            grads._set(loss, np.ones_like(loss.data))
            return grads
        raise ContractError("loss was not produced on an active gradient tape")

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes[: loss._node + 1]):
        g = adj.get(id(node.out))
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
                holders[key] = parent
    for key, g in adj.items():
        grads._set(holders[key], g)
    return grads


# --- operations -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for ``[m, k] @ [k, n]``; a 1-D ``a`` is treated as a row."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        return g @ B.T, A.T @ g

    return _result(A @ B, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. A 1-D ``b`` may be added to every row of a 2-D ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    rowwise = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not rowwise:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def vjp(g):
        return g, (g.sum(axis=0) if rowwise else g)

    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _result(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    mask = a.data > 0
    _note_kink(a, np.min(np.abs(a.data)) if a.size else np.inf)
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name to add, sub, scale or relu."""
    table = {"add": add, "sub": sub, "scale": scale, "relu": relu}
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _result(np.sum(a.data), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors end to end."""
    parts = [_as_tensor(p) for p in parts]
    if any(p.data.ndim != 1 for p in parts):
        raise DimensionError("concat expects 1-D tensors")
    bounds = np.cumsum([0] + [p.size for p in parts])

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts]), "concat", tuple(parts), vjp)


def row(a: Tensor, i: int) -> Tensor:
    """Row ``i`` of a 2-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row expects a 2-D tensor")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _result(a.data[i].copy(), "row", (a,), vjp)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    parts = [_as_tensor(p) for p in parts]
    if len({p.shape for p in parts}) != 1:
        raise DimensionError("stack expects equal shapes")
    return _result(
        np.stack([p.data for p in parts]),
        "stack",
        tuple(parts),
        lambda g: tuple(g[i] for i in range(len(parts))),
    )


def l2_normalize(a: Tensor, min_norm: float = 1e-9) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    a = _as_tensor(a)
    x = a.data
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < min_norm):
        raise DegenerateInputError("cannot normalize a (near) zero vector")
    y = x / norms

    def vjp(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norms,)

    return _result(y, "l2_normalize", (a,), vjp)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between ``u`` and ``v``.

    ``u`` may also be a ``[K, d]`` matrix, giving one similarity per row.
    """
    u, v = _as_tensor(u), _as_tensor(v)
    if v.data.ndim != 1 or u.shape[-1] != v.shape[0] or u.data.ndim > 2:
        raise DimensionError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    U, V = u.data, v.data
    nu = np.linalg.norm(U, axis=-1)
    nv = np.linalg.norm(V)
    if np.any(nu == 0) or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    s = (U @ V) / (nu * nv)

    def vjp(g):
        g_arr = np.asarray(g)
        if U.ndim == 1:
            gu = g_arr * (V / (nu * nv) - s * U / nu**2)
            gv = g_arr * (U / (nu * nv) - s * V / nv**2)
        else:
            gu = g_arr[:, None] * (V[None, :] / (nu * nv)[:, None] - (s / nu**2)[:, None] * U)
            gv = np.sum(g_arr[:, None] * (U / (nu * nv)[:, None] - (s / nv**2)[:, None] * V[None, :]), axis=0)
        return gu, gv

    return _result(s, "cosine_similarity", (u, v), vjp)


def euclidean_distance(u: Tensor, v: Tensor) -> Tensor:
    """||u - v||_2, with gradient defined as 0 where u == v."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"euclidean_distance shape mismatch: {u.shape} vs {v.shape}")
    diff = u.data - v.data
    d = float(np.sqrt(np.sum(diff * diff)))
    _note_kink(u, d, v)

    def vjp(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return z, z.copy()
        gu = g * diff / d
        return gu, -gu

    return _result(np.array(d), "euclidean_distance", (u, v), vjp)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed with max subtraction."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise DimensionError("softmax_cross_entropy expects 1-D logits")
    k = logits.shape[0]
    if not 0 <= int(label) < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    z = logits.data - np.max(logits.data)
    lse = np.log(np.sum(np.exp(z)))
    p = np.exp(z - lse)

    def vjp(g):
        onehot = np.zeros(k)
        onehot[label] = 1.0
        return (g * (p - onehot),)

    return _result(np.array(lse - z[label]), "softmax_cross_entropy", (logits,), vjp)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# --- finite-difference checking ----------------------------------------------


def grad_check_many(
    f: Callable[..., Tensor], points: Sequence[Tensor], eps: float = 1e-5
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives ``points`` as positional arguments and must return a
    scalar tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    params = [Tensor(p.data, requires_grad=True) for p in points]
    with GradientTape():
        y = f(*params)
    if y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    grads = backward(y)

    worst = 0.0
    for i, p in enumerate(params):
        analytic = grads[p].data if p in grads else np.zeros_like(p.data)
        base = p.data.copy()
        for idx in np.ndindex(base.shape):
            probe = [q.data for q in params]
            hi, lo = base.copy(), base.copy()
            hi[idx] += eps
            lo[idx] -= eps
            probe[i] = hi
            f_hi = _eval_plain(f, probe)
            probe[i] = lo
            f_lo = _eval_plain(f, probe)
            numeric = (f_hi - f_lo) / (2 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def kink_margin(f: Callable[..., Tensor], points: Sequence[Tensor]) -> float:
    """Distance from ``points`` to the nearest kink (relu at 0, coincident distance) that ``f`` passes through."""
    params = [Tensor(p.data, requires_grad=True) for p in points]
    with GradientTape() as tape:
        f(*params)
    return tape.kink_margin


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Single-input form of :func:`grad_check_many`."""
    return grad_check_many(f, [point], eps)


def _eval_plain(f, arrays) -> float:
    try:
        val = f(*[Tensor(a) for a in arrays])
    except NumericError as exc:
        raise NumericError(f"function not finite at probe point: {exc}") from None
    out = float(val.data)
    if not np.isfinite(out):
        raise NumericError("function not finite at probe point")
    return out
