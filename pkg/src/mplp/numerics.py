"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``backward`` walks the recorded graph once in reverse
topological order. A root may only be differentiated once; leaves accumulate
into ``.grad`` until the caller zeroes them (see ``zero_grad``).

Shapes are strict: elementwise ops need identical shapes, except that a 1-D
right operand matching the last axis is accepted as a bias. ``matmul`` follows
the usual batched rule where the right operand may be a plain 2-D matrix.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


class NumericInputError(ValueError):
    """Raised when an op receives NaN or infinite input."""


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _raise_item():
    raise ContractError("item() needs a single-element tensor")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericInputError(f"{op}: input contains NaN or Inf")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a`` (masks, dropout)."""
    c = np.asarray(c, dtype=DTYPE)
    out = a.data * c
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would broadcast {a.shape} to {out.shape}")
    return _node(out, (a,), lambda g: (g * c,))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    _check_finite(x, "gelu")
    inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), back)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back into place."""
    orig = a.shape
    out = a.data[index]

    def back(g):
        full = np.zeros(orig, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (a,), back)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    nrows = weight.shape[0]

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= nrows):
        raise IndexError("embedding: id out of range")
    return _node(weight.data[ids], (weight,), back)


def set_rows(a: Tensor, index, values: Tensor) -> Tensor:
    """Copy of ``a`` whose rows at ``index`` are replaced by ``values``."""
    out = a.data.copy()
    out[index] = values.data

    def back(g):
        ga = g.copy()
        ga[index] = 0.0
        return ga, g[index]

    return _node(out, (a, values), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _node(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(out, dtype=DTYPE), (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, bool) hides entries."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ContractError("softmax of an empty vector")
    _check_finite(a.data, "softmax")
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    _check_finite(x, "log_softmax")
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), back)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx_hat = g * gd
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (a, gamma, beta), back)


def cross_entropy(logits, gold, weights: np.ndarray | None = None) -> Tensor:
    """Negative log-likelihood of ``gold`` under softmax(logits).

    A 1-D ``logits`` gives the plain loss for one example. A 2-D batch gives
    the mean, or the ``weights``-weighted sum when weights are supplied.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    x = logits.data[None, :] if single else logits.data
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    if gold.shape[0] != x.shape[0]:
        raise ShapeError("cross_entropy: one gold index per row required")
    if gold.min() < 0 or gold.max() >= x.shape[1]:
        raise IndexError(f"cross_entropy: gold index out of range for {x.shape[1]} classes")
    _check_finite(x, "cross_entropy")
    if weights is None:
        w = np.full(x.shape[0], 1.0 / x.shape[0])
    else:
        w = np.asarray(weights, dtype=DTYPE)
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(x.shape[0])
    nll = -logp[rows, gold]
    loss = np.asarray((w * nll).sum(), dtype=DTYPE)

    def back(g):
        p = np.exp(logp)
        p[rows, gold] -= 1.0
        grad = p * (w * g)[:, None]
        return (grad[0] if single else grad,)

    return _node(loss, (logits,), back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul_const(a, keep)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Leaves in ``params`` that the loss does not reach get a zero gradient.
    Differentiating the same root twice raises ``ContractError``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this root; rebuild the graph")
    loss._consumed = True
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    # drop references so intermediate buffers can be freed
    loss._parents = ()
    loss._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# initialisation and verification


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator, name: str | None = None) -> Tensor:
    """uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=name)


def zeros(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


def ones(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True, name=name)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
    atol: float = 1e-9,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Per coordinate the gap is |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    A coordinate counts as agreeing when both values are below ``atol``, or
    when they differ by less than the round-off floor of the difference
    quotient, 8 * machine-eps * |f| / eps. Below that floor the quotient
    cannot resolve the gradient and the ratio only measures cancellation.

    ``f`` must rebuild its graph on every call from the current ``params``
    data. At most ``max_coords`` coordinates per tensor are probed (all of
    them when ``None``).
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    if isinstance(params, Tensor):
        params = [params]
    rng = rng or np.random.default_rng(0)
    zero_grad(params)
    loss = f()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    floor = 8.0 * np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / eps
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            an = ga.reshape(-1)[i]
            if (abs(an) < atol and abs(num) < atol) or abs(an - num) <= floor:
                continue
            rel = abs(an - num) / (abs(an) + abs(num) + 1e-12)
            worst = max(worst, rel)
    zero_grad(params)
    return worst
