"""Dense numpy arrays with a recorded reverse-mode graph, plus Adam.

Every op records its parents and a closure that maps the output gradient to
input gradients. ``Tensor.backward`` walks the graph once in reverse
topological order and then drops it. Only first-order derivatives.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, TrainingError, UsageError

KL_EPS = 1e-12
COS_EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind not in "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction --------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
        return Tensor(data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            # graph is single-use
            node._parents = ()
            node._backward = None

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise UsageError("only constant exponents are supported")
        x = self.data
        if exponent == 2:
            return Tensor._make(x * x, (self,), lambda g: (2.0 * x * g,))
        return Tensor._make(x ** exponent, (self,),
                            lambda g: (exponent * x ** (exponent - 1) * g,))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- reductions and reshaping --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(np.transpose(self.data, axes), (self,),
                            lambda g: (np.transpose(g, inverse),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype
        basic = _is_basic_index(index)

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back)

    # -- elementwise functions -------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.logaddexp(0.0, x)
        return Tensor._make(out.astype(x.dtype), (self,), lambda g: (g * _sigmoid(x),))

    def gelu(self) -> "Tensor":
        # tanh approximation
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return Tensor._make(out, (self,), back)

    def clamp_max(self, limit: float) -> "Tensor":
        x = self.data
        mask = x <= limit
        return Tensor._make(np.minimum(x, limit), (self,), lambda g: (g * mask,))

    def clamp_min(self, limit: float) -> "Tensor":
        x = self.data
        mask = x >= limit
        return Tensor._make(np.maximum(x, limit), (self,), lambda g: (g * mask,))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# -- structural ops -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a, None), _lift(b, None)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(np.matmul(x, y), (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t, None) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(data, tensors, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted) along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back)


softmax_lastdim = softmax


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    xc = data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data
    out = xhat * gam + beta.data
    n = data.shape[-1]

    def back(g):
        gxhat = g * gam
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggam = _unbroadcast(g * xhat, gam.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return gx, ggam, gbeta

    return Tensor._make(out, (x, gamma, beta), back)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, None), _lift(b, None)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(np.where(mask, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                                   _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# -- losses and similarities --------------------------------------------------

def mse(a: Tensor, b) -> Tensor:
    """Mean over all elements of (a - b)**2."""
    b = _lift(b, a.dtype)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).mean()


def kl_div(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """Row-averaged KL(p || q) over the last axis.

    Terms with p == 0 contribute 0 and q is clamped below at ``eps``. The
    gradient w.r.t. p is taken as 0 where p == 0.
    """
    p, q = _lift(p, None), _lift(q, None)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shapes differ: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    if (pd < 0).any() or (qd < 0).any():
        raise DomainError("kl_div needs nonnegative inputs")
    rows = pd.size // pd.shape[-1] if pd.ndim else 1
    qc = np.maximum(qd, eps)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    logq = np.log(qc)
    terms = np.where(pos, pd * (logp - logq), 0.0)
    value = np.asarray(terms.sum() / rows, dtype=pd.dtype)

    def back(g):
        scale = g / rows
        gp = np.where(pos, logp - logq + 1.0, 0.0) * scale
        gq = np.where(qd > eps, -pd / qc, 0.0) * scale
        return gp, gq

    return Tensor._make(value, (p, q), back)


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    """u.v / (|u||v|) along ``axis`` (broadcasting).

    When both norms fall below ``eps`` the similarity is 0. A single zero
    vector also yields 0 because its dot product vanishes.
    """
    u, v = _lift(u, None), _lift(v, None)
    if u.shape[axis] != v.shape[axis]:
        raise DimensionError(f"cosine_similarity dims differ: {u.shape} vs {v.shape}")
    dot = (u * v).sum(axis=axis)
    nu = np.sqrt(np.sum(u.data * u.data, axis=axis))
    nv = np.sqrt(np.sum(v.data * v.data, axis=axis))
    nu_t = _safe_norm(u, axis)
    nv_t = _safe_norm(v, axis)
    both_zero = (nu < eps) & (nv < eps)
    sim = dot / (nu_t * nv_t)
    if both_zero.any():
        sim = where(~both_zero, sim, np.zeros_like(sim.data))
    return sim


def _safe_norm(x: Tensor, axis: int) -> Tensor:
    sq = (x * x).sum(axis=axis)
    # floor keeps division finite for zero vectors
    return sq.clamp_min(COS_EPS * COS_EPS).sqrt()


# -- parameters and optimisation ------------------------------------------------

class ParamStore:
    """Named parameters plus Adam moment state."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(self.params[n].size for n in self.names(prefix))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad for n, p in self.params.items() if p.grad is not None}

    def reset_optimizer(self) -> None:
        self.m.clear()
        self.v.clear()
        self.counts.clear()
        self.step = 0

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self.names(prefix)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            if missing or extra:
                raise UsageError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in arrays.items():
            if name not in self.params:
                continue
            p = self.params[name]
            if p.shape != value.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=self.dtype)


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update of the parameters named in ``grads``."""
    if lr <= 0:
        raise UsageError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    for name, g in grads.items():
        p = store.params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if name not in store.m:
            store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
            store.counts[name] = 0
        store.counts[name] += 1
        k = store.counts[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** k)
        vhat = v / (1.0 - beta2 ** k)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(store.dtype, copy=False)
    return store


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def parameters_in(store: ParamStore, prefixes: Iterable[str]) -> list[str]:
    prefixes = tuple(prefixes)
    return [n for n in store if n.startswith(prefixes)]
