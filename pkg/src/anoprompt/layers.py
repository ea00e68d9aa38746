"""Parameterised building blocks on top of the engine."""
from __future__ import annotations

import math

import numpy as np

from .engine import ParamStore, Tensor, layer_norm, matmul, softmax
from .errors import DimensionError, NumericError


class Module:
    """Owns named parameters in a shared :class:`ParamStore`.

    A frozen module hands out detached copies of its parameters, so no
    gradient reaches them while values stay shared.
    """

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix
        self.frozen = False
        self._params: dict[str, Tensor] = {}
        self._children: list[Module] = []

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = self.store.add(f"{self.prefix}.{name}", value)
        self._params[name] = t
        return t

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def p(self, name: str) -> Tensor:
        t = self._params[name]
        return Tensor(t.data) if self.frozen else t

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        for c in self._children:
            c.set_frozen(flag)

    def param_names(self) -> list[str]:
        names = [t.name for t in self._params.values()]
        for c in self._children:
            names.extend(c.param_names())
        return names


def xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, store, prefix, n_in, n_out, rng, bias=True):
        super().__init__(store, prefix)
        self.n_in, self.n_out = n_in, n_out
        self.param("w", xavier(rng, n_in, n_out))
        self.bias = bias
        if bias:
            self.param("b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.prefix}: expected last dim {self.n_in}, got {x.shape}")
        y = matmul(x, self.p("w"))
        return y + self.p("b") if self.bias else y


class LayerNorm(Module):
    def __init__(self, store, prefix, dim):
        super().__init__(store, prefix)
        self.param("gamma", np.ones(dim))
        self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.p("gamma"), self.p("beta"))


class MultiHeadAttention(Module):
    def __init__(self, store, prefix, dim, heads, rng):
        super().__init__(store, prefix)
        if dim % heads:
            raise DimensionError(f"{prefix}: dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.wq = self.child(Linear(store, f"{prefix}.q", dim, dim, rng))
        self.wk = self.child(Linear(store, f"{prefix}.k", dim, dim, rng))
        self.wv = self.child(Linear(store, f"{prefix}.v", dim, dim, rng))
        self.wo = self.child(Linear(store, f"{prefix}.o", dim, dim, rng))

    def _split(self, x: Tensor) -> Tensor:
        B, S, _ = x.shape
        return x.reshape(B, S, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def attention(self, xq: Tensor, xkv: Tensor) -> Tensor:
        """Post-softmax attention probabilities ``[B, h, Sq, Skv]``."""
        q = self._split(self.wq(xq))
        k = self._split(self.wk(xkv))
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.dim // self.heads))
        return softmax(scores, axis=-1)

    def __call__(self, xq: Tensor, xkv: Tensor | None = None) -> tuple[Tensor, Tensor]:
        xkv = xq if xkv is None else xkv
        attn = self.attention(xq, xkv)
        v = self._split(self.wv(xkv))
        ctx = matmul(attn, v)                         # [B, h, Sq, dh]
        B, _, Sq, _ = ctx.shape
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Sq, self.dim)
        return self.wo(ctx), attn


class FeedForward(Module):
    def __init__(self, store, prefix, dim, hidden, rng):
        super().__init__(store, prefix)
        self.fc1 = self.child(Linear(store, f"{prefix}.fc1", dim, hidden, rng))
        self.fc2 = self.child(Linear(store, f"{prefix}.fc2", hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, store, prefix, dim, heads, rng):
        super().__init__(store, prefix)
        self.ln1 = self.child(LayerNorm(store, f"{prefix}.ln1", dim))
        self.attn = self.child(MultiHeadAttention(store, f"{prefix}.attn", dim, heads, rng))
        self.ln2 = self.child(LayerNorm(store, f"{prefix}.ln2", dim))
        self.ff = self.child(FeedForward(store, f"{prefix}.ff", dim, 4 * dim, rng))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.ln1(x)
        a, attn = self.attn(h)
        x = x + a
        x = x + self.ff(self.ln2(x))
        return x, attn

    def attention_map(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        return self.attn.attention(h, h)


class TransformerStack(Module):
    def __init__(self, store, prefix, dim, heads, n_layers, rng):
        super().__init__(store, prefix)
        self.dim = dim
        self.blocks = [self.child(TransformerBlock(store, f"{prefix}.{i}", dim, heads, rng))
                       for i in range(n_layers)]
        self.ln_f = self.child(LayerNorm(store, f"{prefix}.ln_f", dim))

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"{self.prefix}: token dim {tokens.shape[-1]} != {self.dim}")
        x = tokens
        first = None
        for block in self.blocks:
            x, attn = block(x)
            if first is None:
                first = attn
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activations after {block.prefix}")
        return self.ln_f(x), first

    def first_attention(self, tokens: Tensor) -> Tensor:
        return self.blocks[0].attention_map(tokens)


class Embedding(Module):
    """Affine per-step map C -> D plus a learnable positional table."""

    def __init__(self, store, prefix, channels, dim, max_len, rng):
        super().__init__(store, prefix)
        self.max_len = max_len
        self.proj = self.child(Linear(store, f"{prefix}.proj", channels, dim, rng))
        self.param("pos", 0.02 * rng.standard_normal((max_len, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        S = x.shape[-2]
        if S > self.max_len:
            raise DimensionError(f"{self.prefix}: length {S} exceeds positional table {self.max_len}")
        return self.proj(x) + self.p("pos")[:S]


class ForecastHead(Module):
    """Affine map over time (L_in -> L_out) per feature, then D -> C per step."""

    def __init__(self, store, prefix, l_in, l_out, dim, channels, rng):
        super().__init__(store, prefix)
        self.l_in, self.l_out = l_in, l_out
        bound = 1.0 / math.sqrt(l_in)
        self.param("time_w", rng.uniform(-bound, bound, size=(l_out, l_in)))
        self.param("time_b", np.zeros((l_out, 1)))
        self.proj = self.child(Linear(store, f"{prefix}.proj", dim, channels, rng))

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-2] != self.l_in:
            raise DimensionError(f"{self.prefix}: expected {self.l_in} steps, got {h.shape[-2]}")
        z = matmul(self.p("time_w"), h) + self.p("time_b")
        return self.proj(z)
