"""Dense float64 tensors with a reverse-mode differentiation tape.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    grads = tape.backward(loss)
    grads[w]   # ndarray, same shape as w

Operations executed outside an active tape are evaluated eagerly and are
never recorded, so inference code pays no bookkeeping cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Gradients", "ShapeError", "TapeError",
    "tensor", "matmul", "add", "sub", "mul", "div", "neg", "transpose",
    "tsum", "mean", "mean_rows", "exp", "log", "sigmoid", "softplus", "gelu",
    "log_softmax", "masked_softmax", "layer_norm", "mlp_forward", "concat",
    "normalize_rows", "multi_head_attention", "backward", "grad_check",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Immutable float64 array; ``node_id`` is set once it sits on a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    def __matmul__(self, other):
        return matmul(self, other)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    backward: Callable | None
    output: Tensor


class Gradients:
    """Gradient map keyed by tensor identity."""

    def __init__(self, by_node: dict[int, np.ndarray], tape: "Tape"):
        self._by_node = by_node
        self._tape = tape

    def __getitem__(self, t: Tensor) -> np.ndarray:
        nid = t.node_id
        if nid is None or nid not in self._by_node or self._tape.nodes[nid].output is not t:
            raise KeyError(f"no gradient for {t!r}")
        return self._by_node[t.node_id]

    def get(self, t: Tensor, default=None):
        try:
            return self[t]
        except KeyError:
            return default

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id is not None and t.node_id in self._by_node

    def __len__(self):
        return len(self._by_node)


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    _leaves: dict = field(default_factory=dict)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def _register_leaf(self, t: Tensor) -> int:
        key = id(t)
        if key in self._leaves:
            return t.node_id
        t.node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t))
        self._leaves[key] = t
        return t.node_id

    def record(self, kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
        out = Tensor._wrap(np.asarray(out_data))
        tracked = [t for t in inputs if t.requires_grad]
        if not tracked:
            return out
        for t in tracked:
            if t.node_id is None or t.node_id >= len(self.nodes) or self.nodes[t.node_id].output is not t:
                self._register_leaf(t)
        out.requires_grad = True
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(inputs), bwd, out))
        return out

    def backward(self, root: Tensor) -> Gradients:
        if root.size != 1:
            raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
        if not root.requires_grad or root.node_id is None or root.node_id >= len(self.nodes) \
                or self.nodes[root.node_id].output is not root:
            raise TapeError("backward root is not tracked on this tape")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            in_grads = node.backward(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = ig if prev is None else prev + ig
        # leaves that were seen but never reached by the root stay absent
        return Gradients(grads, self)


def backward(root: Tensor) -> Gradients:
    tape = _active_tape()
    if tape is None:
        raise TapeError("backward() needs an active tape")
    return tape.backward(root)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return Tensor._wrap(np.asarray(out))
    return tape.record(kind, inputs, out, bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _emit("softplus", (a,), out, lambda g: (g * _sigmoid_np(x),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated Gaussian error linear unit."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", (a,), out, bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", (a,), out, bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean kept as a [1 x d] row."""
    n = a.shape[0]
    return matmul(Tensor._wrap(np.full((1, n), 1.0 / n)), a)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bwd(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("index", (a,), np.array(out, dtype=np.float64), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _emit("concat", tuple(parts), out, bwd)


# ---------------------------------------------------------------- softmax family

def _masked_softmax_np(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("masked_softmax: non-finite logits")
    x = np.where(mask, logits, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, logits, 0.0) - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)
    out[~np.broadcast_to(mask, out.shape)] = 0.0
    return out


def _softmax_bwd(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax restricted to ``mask``; rows with no support come out all zero."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs logits {logits.shape}")
    p = _masked_softmax_np(logits.data, mask)
    return _emit("masked_softmax", (logits,), p, lambda g: (_softmax_bwd(p, g),))


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _emit("log_softmax", (a,), out,
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------- blocks

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", (x, gain, bias), out, bwd)


def fan_in_scaled(w: Tensor) -> Tensor:
    """A weight stored at unit scale, applied with gain 1/sqrt(fan_in).

    With a fixed Adam step this keeps every matrix's relative update size
    independent of its width.
    """
    return w * (1.0 / math.sqrt(w.shape[0]))


def mlp_forward(x: Tensor, weights: Sequence[Tensor]) -> Tensor:
    """Two affine layers with GELU between: ``weights = (w1, b1, w2, b2)``."""
    w1, b1, w2, b2 = weights
    if x.shape[1] != w1.shape[0] or w1.shape[1] != b1.shape[0] \
            or w1.shape[1] != w2.shape[0] or w2.shape[1] != b2.shape[0]:
        raise ShapeError(
            f"mlp_forward: x {x.shape} through {w1.shape}/{b1.shape} -> {w2.shape}/{b2.shape}")
    return gelu(x @ w1 + b1) @ w2 + b2


def normalize_rows(a: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row to unit L2 norm; a zero row is an error."""
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise ZeroDivisionError("normalize_rows: zero-norm row")
    out = a.data / norms

    def bwd(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _emit("normalize_rows", (a,), out, bwd)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int) -> Tensor:
    """Scaled dot-product attention over ``heads`` column groups.

    ``q`` is [nq x d], ``k``/``v`` are [nk x d], ``mask`` is a boolean [nq x nk]
    matrix shared by every head. Masked pairs get exactly zero weight and
    rows without support produce zero output.
    """
    mask = np.asarray(mask, dtype=bool)
    nq, d = q.shape
    nk = k.shape[0]
    if k.shape != (nk, d) or v.shape != (nk, d) or mask.shape != (nq, nk):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, mask {mask.shape}")
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    p = _masked_softmax_np(s, np.broadcast_to(mask, s.shape))
    oh = np.matmul(p, vh)
    out = oh.transpose(1, 0, 2).reshape(nq, d)

    def bwd(g):
        gh = g.reshape(nq, heads, dh).transpose(1, 0, 2)
        dv = np.matmul(p.transpose(0, 2, 1), gh)
        dp = np.matmul(gh, vh.transpose(0, 2, 1))
        ds = _softmax_bwd(p, dp) * scale
        dq = np.matmul(ds, kh)
        dk = np.matmul(ds.transpose(0, 2, 1), qh)
        back = lambda x, n: x.transpose(1, 0, 2).reshape(n, d)
        return back(dq, nq), back(dk, nk), back(dv, nk)

    return _emit("attention", (q, k, v), out, bwd)


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central FD| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.array(x.data)
    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        grads = tape.backward(out)
    analytic = grads.get(probe)
    if analytic is None:
        analytic = np.zeros(base.shape)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("grad_check: non-finite analytic gradient")
    numeric = np.zeros(base.shape)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        hi = base.copy().reshape(-1)
        lo = base.copy().reshape(-1)
        hi[i] += step
        lo[i] -= step
        fp = f(Tensor(hi.reshape(base.shape))).item()
        fm = f(Tensor(lo.reshape(base.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError("grad_check: non-finite function value")
        flat[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
