"""Anomaly-aware forecasting network: per-step anomaly probability of a future
window given the preceding window, via one cross-attention layer."""
from __future__ import annotations

import numpy as np

from .engine import Tensor, concat, no_grad
from .errors import DimensionError, DomainError, UsageError
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention

PROB_EPS = 1e-7


class LocalEmbedding(Module):
    """Kernel-3 token embedding (replicate padding) plus positional table."""

    def __init__(self, store, prefix, channels, dim, length, rng):
        super().__init__(store, prefix)
        self.length = length
        self.proj = self.child(Linear(store, f"{prefix}.proj", 3 * channels, dim, rng))
        self.param("pos", 0.02 * rng.standard_normal((length, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        S = x.shape[-2]
        if S != self.length:
            raise DimensionError(f"{self.prefix}: expected length {self.length}, got {S}")
        prev = concat([x[:, :1], x[:, :-1]], axis=1)
        nxt = concat([x[:, 1:], x[:, -1:]], axis=1)
        return self.proj(concat([prev, x, nxt], axis=-1)) + self.p("pos")


class AAFNetwork(Module):
    def __init__(self, store, prefix, channels, dim, l_in, l_out, heads, rng):
        super().__init__(store, prefix)
        self.channels, self.l_in, self.l_out = channels, l_in, l_out
        self.e_out = self.child(LocalEmbedding(store, f"{prefix}.e_out", channels, dim, l_out, rng))
        self.e_in = self.child(LocalEmbedding(store, f"{prefix}.e_in", channels, dim, l_in, rng))
        self.ln_q = self.child(LayerNorm(store, f"{prefix}.ln_q", dim))
        self.ln_kv = self.child(LayerNorm(store, f"{prefix}.ln_kv", dim))
        self.cross = self.child(MultiHeadAttention(store, f"{prefix}.cross", dim, heads, rng))
        self.ln_ff = self.child(LayerNorm(store, f"{prefix}.ln_ff", dim))
        self.ff = self.child(FeedForward(store, f"{prefix}.ff", dim, 2 * dim, rng))
        self.ln_out = self.child(LayerNorm(store, f"{prefix}.ln_out", dim))
        self.head = self.child(Linear(store, f"{prefix}.head", dim, 1, rng))

    def logits(self, x_out_like: Tensor, x_in_like: Tensor) -> Tensor:
        q = self.e_out(x_out_like)
        kv = self.e_in(x_in_like)
        h = q + self.cross(self.ln_q(q), self.ln_kv(kv))[0]
        h = h + self.ff(self.ln_ff(h))
        return self.head(self.ln_out(h))[..., 0]


def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 2:
        return t.reshape(1, *t.shape), True
    return t, False


def aafn_forward(net: AAFNetwork, x_out_like, x_in_like) -> Tensor:
    """Sigmoid anomaly probabilities ``[B, L_out]`` (or ``[L_out]`` for unbatched input)."""
    xo, squeeze = _as_batch(x_out_like)
    xi, _ = _as_batch(x_in_like)
    if xo.shape[1:] != (net.l_out, net.channels) or xi.shape[1:] != (net.l_in, net.channels):
        raise DimensionError(
            f"aafn expects [{net.l_out}x{net.channels}] and [{net.l_in}x{net.channels}], "
            f"got {xo.shape} and {xi.shape}")
    if xo.shape[0] != xi.shape[0]:
        raise DimensionError("aafn inputs have different batch sizes")
    probs = net.logits(xo, xi).sigmoid()
    return probs[0] if squeeze else probs


def aafn_loss(probs: Tensor, y_z, loss_type: str = "mse") -> Tensor:
    y = np.asarray(y_z.data if isinstance(y_z, Tensor) else y_z)
    if y.shape != probs.shape:
        raise DimensionError(f"label shape {y.shape} != probability shape {probs.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DomainError("aafn labels must be 0 or 1")
    target = Tensor(y.astype(probs.dtype))
    if loss_type == "mse":
        diff = probs - target
        return (diff * diff).mean()
    if loss_type == "bce":
        p = probs.clamp_min(PROB_EPS).clamp_max(1.0 - PROB_EPS)
        return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()
    raise DomainError(f"unknown loss type {loss_type!r}")


def anomaly_weights(bundle, x_in, x_hat_out) -> Tensor:
    """Frozen-network probabilities used to weight forecast errors.

    Computed without recording a graph: neither the network nor the forecast
    receives gradient through the weights.
    """
    if not bundle.aafn_trained:
        raise UsageError("anomaly weights need a pre-trained AAFN")
    xh = x_hat_out.data if isinstance(x_hat_out, Tensor) else np.asarray(x_hat_out)
    xi = x_in.data if isinstance(x_in, Tensor) else np.asarray(x_in)
    with no_grad():
        return Tensor(aafn_forward(bundle.aafn, Tensor(xh), Tensor(xi)).data)
