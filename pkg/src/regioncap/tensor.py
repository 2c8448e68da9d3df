"""Dense 0/1/2-d float tensors with reverse-mode automatic differentiation.

Every trainable computation in this package is built from the primitives
here.  A fresh tape is built on each forward pass: ops record their parent
tensors and a gradient closure on the output, and `backward` walks that
graph once.  Tensors default to float32; wrap gradient checks in
``precision("float64")`` for a float64 tape.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_node_ids = itertools.count(1)


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A numpy-backed tensor participating in a single-use gradient tape.

    `requires_grad=True` leaves (parameters) and any op output reachable
    from one carry a `node_id` tape handle; detached tensors have none and
    never accumulate gradients.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def set_trainable(self, flag: bool) -> None:
        """Flip gradient participation in place (new tapes only see the new flag)."""
        self.requires_grad = bool(flag)
        if self.requires_grad and self.node_id is None:
            self.node_id = next(_node_ids)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # Operator sugar; the functional forms below are the primitives.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


GradientMap = dict[str, Tensor]


def _from_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), dtype=data.dtype)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"{name}: expected a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m, k] and b [k, n]."""
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} x {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _from_op(out, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports adding a [d] row vector to every row of [n, d]."""
    if a.shape == b.shape:
        broadcast = False
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        broadcast = True
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out = a.data + b.data

    def grad_fn(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        else:
            gb = g.sum(axis=0) if broadcast else g
        return ga, gb

    return _from_op(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = a.data * b.data

    def grad_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _from_op(out, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    out = a.data * c

    def grad_fn(g):
        return (g * c if a.requires_grad else None,)

    return _from_op(out, (a,), grad_fn)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    out = a.data.T.copy()

    def grad_fn(g):
        return (g.T if a.requires_grad else None,)

    return _from_op(out, (a,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis` (0 = token axis)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if not p.requires_grad:
                grads.append(None)
            elif axis == 0:
                grads.append(g[lo:hi])
            else:
                grads.append(g[:, lo:hi])
        return tuple(grads)

    return _from_op(out, parts, grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis` of a 2-d tensor."""
    _check_2d("narrow", a)
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}, {start + length}) outside axis {axis} of {a.shape}")
    out = (a.data[start:start + length] if axis == 0 else a.data[:, start:start + length]).copy()

    def grad_fn(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        if axis == 0:
            full[start:start + length] = g
        else:
            full[:, start:start + length] = g
        return (full,)

    return _from_op(out, (a,), grad_fn)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup: table [V, d] gathered at integer ids -> [len(ids), d]."""
    _check_2d("embedding", table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: ids must be a flat sequence, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id outside [0, {table.shape[0]})")
    out = table.data[idx].copy()

    def grad_fn(g):
        if not table.requires_grad:
            return (None,)
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _from_op(out, (table,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be [{d}], got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _from_op(out, (x, gain, bias), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return _from_op(out.astype(x.data.dtype, copy=False), (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along the last axis; each slice sums to 1."""
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("softmax: only the last axis is supported")
    if x.shape[-1] < 1:
        raise ShapeError("softmax: empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _from_op(s, (x,), grad_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_id: int) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-softmaxed logits.

    Positions whose target equals `ignore_id` contribute nothing; their
    target entries are never read, so they may hold any value.
    """
    _check_2d("cross_entropy", logits)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: got {t.shape[0] if t.ndim else 0} targets for {logits.shape[0]} rows")
    keep = t != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("cross_entropy: no supervised positions")
    v = logits.shape[1]
    kept_targets = t[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= v:
        raise ValueError(f"cross_entropy: target id outside [0, {v})")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - lse
    rows = np.nonzero(keep)[0]
    loss = -log_probs[rows, kept_targets].mean()

    def grad_fn(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(log_probs)
        grad = np.zeros_like(logits.data)
        grad[rows] = p[rows]
        grad[rows, kept_targets] -= 1.0
        grad[rows] /= n_kept
        return (grad * g,)

    return _from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype) if x.requires_grad else None,)

    return _from_op(out, (x,), grad_fn)


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),)

    return _from_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> GradientMap:
    """Run the reverse pass from a scalar loss.

    Returns gradients for every `requires_grad` parameter in `params`;
    parameters not reachable from the loss map to zero tensors.  Detached
    parameters are skipped entirely.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node_id is None:
        raise ValueError("backward: loss is detached from the tape")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(topo):
        if node._grad_fn is None:
            continue  # leaf: its gradient stays for collection below
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg if acc is None else acc + pg

    out: GradientMap = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(p.node_id)
        if g is None:
            g = np.zeros_like(p.data)
        out[name] = Tensor(np.array(g, dtype=p.data.dtype), requires_grad=False, dtype=p.data.dtype)
    return out


def init_normal(rng: np.random.Generator, shape: Iterable[int], std: float,
                trainable: bool = True) -> Tensor:
    """Seeded Gaussian leaf tensor (always drawn in float64, then cast)."""
    data = rng.normal(0.0, std, size=tuple(shape))
    return Tensor(data, requires_grad=trainable)


def init_zeros(shape: Iterable[int], trainable: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=trainable)


def init_ones(shape: Iterable[int], trainable: bool = True) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=trainable)
