"""Reverse-mode automatic differentiation over float64 numpy arrays.

A tiny eager tape: every operation returns a :class:`Tensor` holding the
forward value plus closures that push gradients to its parents. Values are
always float64 and are required to stay finite; a NaN/Inf result raises
immediately instead of silently poisoning a training run.

Conventions baked in here and relied on elsewhere:
  * cosine similarity adds 1e-12 to each norm (zero vectors route to 0);
  * ReLU subgradient at 0 is 0;
  * softmax / log-softmax use max-subtraction;
  * ``stop_gradient`` passes values through and blocks all gradient flow.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

EPS_NORM = 1e-12

# Toggle for the finite-value check applied after every forward op.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _as_f64(x) -> np.ndarray:
    # note: ascontiguousarray would promote 0-d to 1-d; asarray keeps rank
    return np.asarray(x, dtype=np.float64, order="C")


class Tensor:
    """A node in the computation graph.

    ``value`` is the forward result, ``grad`` accumulates d(root)/d(self)
    during :func:`backward`. Leaves are created directly; interior nodes are
    produced by the ops below and carry one vjp closure per parent.
    """

    __slots__ = ("value", "grad", "op", "parents", "vjps", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), vjps: tuple = ()):
        self.value = _as_f64(value)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return self.value.item()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"

    # Operator sugar; keeps loss code readable.
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(value, requires_grad: bool = True) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def const(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _make(value: np.ndarray, op: str, parents: Sequence[Tensor],
          vjps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite result in op '{op}'")
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op,
                  parents=tuple(parents), vjps=tuple(vjps))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value
    return _make(out, "add", (a, b),
                 (lambda g: _unbroadcast(g, a.value.shape),
                  lambda g: _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value
    return _make(out, "sub", (a, b),
                 (lambda g: _unbroadcast(g, a.value.shape),
                  lambda g: _unbroadcast(-g, b.value.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value
    return _make(out, "mul", (a, b),
                 (lambda g: _unbroadcast(g * b.value, a.value.shape),
                  lambda g: _unbroadcast(g * a.value, b.value.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _make(out, "div", (a, b),
                 (lambda g: _unbroadcast(g / b.value, a.value.shape),
                  lambda g: _unbroadcast(-g * a.value / (b.value ** 2),
                                         b.value.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands, got "
                         f"{a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value
    return _make(out, "matmul", (a, b),
                 (lambda g: g @ b.value.T,
                  lambda g: a.value.T @ g))


def sparse_matmul(mat: sp.spmatrix, x) -> Tensor:
    """Left-multiply by a constant sparse operator: ``mat @ x``."""
    x = as_tensor(x)
    m = mat.tocsr()
    mt = m.T.tocsr()
    out = np.asarray(m @ x.value)
    return _make(out, "sparse_matmul", (x,), (lambda g: np.asarray(mt @ g),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0.0
    out = np.where(mask, a.value, 0.0)
    return _make(out, "relu", (a,), (lambda g: g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, "exp", (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.value)
    return _make(out, "log", (a,), (lambda g: g / a.value,))


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(a.value.shape, g, dtype=np.float64)
        return np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy()

    return _make(np.asarray(out), "sum", (a,), (vjp,))


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def variance(a) -> Tensor:
    """Population variance over all elements."""
    a = as_tensor(a)
    n = a.value.size
    m = a.value.mean()
    out = np.asarray(((a.value - m) ** 2).mean())
    return _make(out, "variance", (a,),
                 (lambda g: g * 2.0 * (a.value - m) / n,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    out = a.value.reshape(shape)
    return _make(out, "reshape", (a,), (lambda g: g.reshape(old),))


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na = a.value.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return _make(out, "concat_cols", (a, b),
                 (lambda g: g[:, :na], lambda g: g[:, na:]))


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------

def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.value[idx]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return full

    return _make(out, "take_rows", (a,), (vjp,))


def scatter_rows(piece, idx, num_rows: int) -> Tensor:
    """Place ``piece`` rows at positions ``idx`` of an otherwise-zero matrix."""
    piece = as_tensor(piece)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows, piece.value.shape[1]), dtype=np.float64)
    np.add.at(out, idx, piece.value)
    return _make(out, "scatter_rows", (piece,), (lambda g: g[idx],))


def take_per_row(a, cols) -> Tensor:
    """Pick one element per row: out[i] = a[i, cols[i]]."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.value.shape[0])
    out = a.value[rows, cols]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (rows, cols), g)
        return full

    return _make(out, "take_per_row", (a,), (vjp,))


# ---------------------------------------------------------------------------
# normalizations and similarities
# ---------------------------------------------------------------------------

def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, with max-subtraction."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _make(out, "softmax", (a,), (vjp,))


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    smax = np.exp(out)

    def vjp(g):
        return g - smax * g.sum(axis=-1, keepdims=True)

    return _make(out, "log_softmax", (a,), (vjp,))


def masked_row_softmax(scores, mask) -> Tensor:
    """Softmax over the masked-in entries of each row; exact zeros elsewhere.

    ``mask`` is a constant boolean array with at least one True per row.
    Gradients flow only through the selected entries.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.value.shape:
        raise ValueError("mask shape must match scores")
    if not mask.any(axis=-1).all():
        raise ValueError("each row needs at least one selected entry")
    neg = np.where(mask, scores.value, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)  # out is 0 off-mask, so no leakage

    return _make(out, "masked_row_softmax", (scores,), (vjp,))


def _norms_rows(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v * v).sum(axis=-1)) + EPS_NORM


def cosine(a, b) -> Tensor:
    """Cosine similarity of two vectors (eps-stabilized norms)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    # eps lives only in the denominators; the norm derivative uses true norms
    ra = np.sqrt((av * av).sum())
    rb = np.sqrt((bv * bv).sum())
    na, nb = ra + EPS_NORM, rb + EPS_NORM
    dot = float(av @ bv)
    out = np.asarray(dot / (na * nb))

    def vjp_a(g):
        unit = av / ra if ra > 0 else np.zeros_like(av)
        return g * (bv / (na * nb) - dot * unit / (na * na * nb))

    def vjp_b(g):
        unit = bv / rb if rb > 0 else np.zeros_like(bv)
        return g * (av / (na * nb) - dot * unit / (na * nb * nb))

    return _make(out, "cosine", (a, b), (vjp_a, vjp_b))


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows: out[i, j] = cos(a_i, b_j)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    ra = np.sqrt((av * av).sum(axis=1))          # true row norms
    rb = np.sqrt((bv * bv).sum(axis=1))
    na = ra + EPS_NORM
    nb = rb + EPS_NORM
    dots = av @ bv.T
    out = dots / np.outer(na, nb)

    unit_a = av / np.where(ra == 0.0, 1.0, ra)[:, None]
    unit_b = bv / np.where(rb == 0.0, 1.0, rb)[:, None]

    def vjp_a(g):
        term1 = (g / np.outer(na, nb)) @ bv          # n×d
        coef = (g * out).sum(axis=1) / na            # n
        return term1 - coef[:, None] * unit_a

    def vjp_b(g):
        term1 = (g / np.outer(na, nb)).T @ av        # m×d
        coef = (g * out).sum(axis=0) / nb            # m
        return term1 - coef[:, None] * unit_b

    return _make(out, "cosine_matrix", (a, b), (vjp_a, vjp_b))


def stop_gradient(a) -> Tensor:
    """Identity on values; blocks all gradient flow to ``a``."""
    a = as_tensor(a)
    return Tensor(a.value, requires_grad=False, op="stop_gradient")


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn once and folded in as a constant."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.value.shape) < keep) / keep
    return mul(a, const(mask))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children; backward walks it reversed


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    ``root`` must be scalar. Existing ``.grad`` buffers are overwritten for the
    nodes visited here; leaves that the graph never touches keep ``grad=None``.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or not node.parents:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + contrib


def grad_of(root: Tensor, x: Tensor) -> np.ndarray:
    """Convenience: backward(root) then return x's gradient (zeros if unused)."""
    backward(root)
    return np.zeros_like(x.value) if x.grad is None else x.grad


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
                      step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / (|analytic| + 1e-12).
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError("step must be in (0, 1e-3]")
    x = _as_f64(x)
    t = leaf(x.copy())
    out = f(t)
    if out.value.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    analytic = grad_of(out, t)

    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        probe = flat.copy()
        probe[i] = orig + step
        fp = f(const(probe.reshape(x.shape))).value.item()
        probe[i] = orig - step
        fm = f(const(probe.reshape(x.shape))).value.item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("function returned non-finite value at probe point")
        numeric = (fp - fm) / (2.0 * step)
        ana = analytic.reshape(-1)[i]
        rel = abs(ana - numeric) / (abs(ana) + 1e-12)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a list of leaf Tensors, with optional decoupled-style L2.

    ``weight_decay`` adds wd * value to the raw gradient (classic L2), which
    is the convention the teacher configs assume.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def reset_state(self) -> None:
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            p.value = p.value - self.lr * mh / (np.sqrt(vh) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
