"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds its output through :meth:`Tensor._make`, which records the
parents and a closure mapping the output adjoint to parent adjoints.  Nodes
carry a monotonically increasing id, so sorting the reachable graph by id
recovers execution order; :func:`backward` replays it in reverse.

A global MAC counter (see :func:`count_macs`) is incremented by the
contraction-type ops (matmul, depthwise conv, selective scan).  The cost
module uses it as the instrumented counterpart to its closed-form formulas.
"""

from __future__ import annotations

import contextlib
import itertools
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True
_mac_counter: list[int] | None = None


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._id = next(_ids)

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_ids)
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Count multiply-accumulates executed inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    global _mac_counter
    prev = _mac_counter
    box = [0]
    _mac_counter = box
    try:
        yield box
    finally:
        _mac_counter = prev
        if prev is not None:
            prev[0] += box[0]


def add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


# --- graph traversal ------------------------------------------------------


def graph_of(root: Tensor) -> list[Tensor]:
    """Return every differentiable node reachable from ``root``, in execution order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate across calls; callers reset them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any parameter")
    adj: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(graph_of(loss)):
        g = adj.pop(node._id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adj.get(parent._id)
            adj[parent._id] = pg if prev is None else prev + pg


# --- elementwise ----------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def bias_add(x, b) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: incompatible shapes {x.shape} and {b.shape}")

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return Tensor._make(x.data + b.data, (x, b), bw, "bias_add")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor._make(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return Tensor._make(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


# --- linear algebra -------------------------------------------------------


def matmul(x, w) -> Tensor:
    """``x[..., k] @ w[k, m]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data
    add_macs(x.data.size // x.shape[-1] * w.shape[0] * w.shape[1])

    def bw(g):
        gx = g @ w.data.T
        k, m = w.shape
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, m)
        return gx, gw

    return Tensor._make(out, (x, w), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else bias_add(y, b)


# --- shape ops ------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        idx = [slice(None)] * nd
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return Tensor._make(out, ts, bw, "concat")


def getitem(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.array(out)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return Tensor._make(out.copy(), (x,), bw, "slice")


def flip(x, axis: int = 1) -> Tensor:
    """Reverse ``x`` along ``axis`` (time by default for batch x L x d)."""
    x = as_tensor(x)
    out = np.flip(x.data, axis=axis).copy()
    return Tensor._make(out, (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(out, (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


# --- sequence ops ---------------------------------------------------------


def causal_conv1d(x, w, b=None) -> Tensor:
    """Depthwise causal convolution over time.

    ``x`` is batch x L x D, ``w`` is D x K.  Tap ``j`` multiplies the input
    ``j`` steps in the past, so ``w[:, 0]`` is the current step; the sequence
    is left zero-padded by ``K - 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ShapeError(f"causal_conv1d: incompatible shapes {x.shape} and {w.shape}")
    B, L, D = x.shape
    K = w.shape[1]
    xp = np.concatenate([np.zeros((B, K - 1, D)), x.data], axis=1)
    # window j holds x[t - j]
    shifted = np.stack([xp[:, K - 1 - j : K - 1 - j + L, :] for j in range(K)], axis=-1)
    out = np.einsum("bldk,dk->bld", shifted, w.data)
    add_macs(B * L * D * K)

    def bw(g):
        gw = np.einsum("bldk,bld->dk", shifted, g)
        gxp = np.zeros_like(xp)
        for j in range(K):
            gxp[:, K - 1 - j : K - 1 - j + L, :] += g * w.data[:, j]
        return gxp[:, K - 1 :, :], gw

    y = Tensor._make(out, (x, w), bw, "causal_conv1d")
    return y if b is None else bias_add(y, b)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def bw(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return Tensor._make(out, (pred, target), bw, "mse")


# --- optimizer ------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Decay is scaled by the learning rate, so ``lr=0`` leaves parameters
    untouched regardless of ``weight_decay``.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        items = params.items() if isinstance(params, Mapping) else params
        self.params: dict[str, Tensor] = dict(items)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"AdamW: parameter {name!r} has no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


# --- finite differences ---------------------------------------------------


def numeric_grad(
    fn: Callable[[], float],
    x: np.ndarray,
    h: float = 1e-4,
    order: int = 4,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``x``, perturbed in place.

    ``order=2`` is the three-point stencil; ``order=4`` the five-point one,
    whose O(h^4) truncation allows a larger ``h`` and so less roundoff.
    With ``indices`` only those flat entries are differenced; the rest stay 0.
    """
    if order not in (2, 4):
        raise ValueError("numeric_grad: order must be 2 or 4")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)

    def at(i, v):
        flat[i] = v
        return fn()

    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        d1 = at(i, orig + h) - at(i, orig - h)
        if order == 2:
            gf[i] = d1 / (2.0 * h)
        else:
            d2 = at(i, orig + 2 * h) - at(i, orig - 2 * h)
            gf[i] = (8.0 * d1 - d2) / (12.0 * h)
        flat[i] = orig
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    seed: int = 0,
    order: int = 4,
    per_input: int | None = None,
) -> float:
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` rebuilds the graph from ``inputs`` on every call.  Non-scalar
    outputs are reduced against a fixed random cotangent so every output
    element is exercised.  ``per_input`` limits the check to that many
    randomly chosen entries of each input (all entries by default), which
    keeps whole-model checks affordable; the error is still normalized by
    the largest analytic entry of the whole input.  Returns the largest
    per-input relative error.
    """
    out = fn()
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)

    def scalar() -> Tensor:
        o = fn()
        return o if o.data.size == 1 and not proj.shape else sum(mul(o, proj))

    for t in inputs:
        t.grad = None
    backward(scalar())
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            idx = None
            if per_input is not None and per_input < t.data.size:
                idx = np.sort(rng.choice(t.data.size, per_input, replace=False))
            numeric = numeric_grad(lambda: float(scalar().data), t.data, h, order, idx)
            if idx is None:
                worst = max(worst, relative_error(analytic, numeric))
            else:
                # same denominator as the full check, numerator over the sample
                a, n = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
                scale = max(np.max(np.abs(analytic)), np.max(np.abs(n)), 1e-10)
                worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst
