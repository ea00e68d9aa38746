"""Anomaly prompt pool: key/prompt pairs, top-N retrieval by cosine
similarity, prompt attachment at the embedding level and the divergence loss."""
from __future__ import annotations

import math

import numpy as np

from .engine import Tensor, concat, cosine_similarity, kl_div, no_grad
from .errors import ConfigError, DimensionError, UsageError
from .layers import Module


class PromptPool(Module):
    def __init__(self, store, prefix, pool_size, prompt_len, dim, rng):
        super().__init__(store, prefix)
        self.pool_size, self.prompt_len, self.dim = pool_size, prompt_len, dim
        bound = 1.0 / math.sqrt(dim)
        self.param("keys", rng.uniform(-bound, bound, size=(pool_size, dim)))
        self.param("prompts", rng.uniform(-bound, bound, size=(pool_size, prompt_len, dim)))

    @property
    def keys(self) -> Tensor:
        return self.p("keys")

    @property
    def prompts(self) -> Tensor:
        return self.p("prompts")


def key_scores(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Cosine similarity of each query row against every key: ``[..., M]``."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    with no_grad():
        return cosine_similarity(Tensor(q[..., None, :]), Tensor(k), axis=-1).data


def select_top_n(query, pool: PromptPool | np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` keys most similar to ``query`` (descending, lower index on ties).

    ``query`` may be ``[D]`` (returns ``[n]``) or ``[B, D]`` (returns ``[B, n]``).
    """
    keys = pool.keys.data if isinstance(pool, PromptPool) else np.asarray(pool)
    M = len(keys)
    if n > M:
        raise ConfigError(f"cannot select {n} prompts from a pool of {M}")
    if n < 0:
        raise ConfigError("n must be >= 0")
    q = query.data if isinstance(query, Tensor) else np.asarray(query)
    scores = key_scores(q, keys)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :n]


def attach_prompts(tokens: Tensor, pool: PromptPool, selected) -> Tensor:
    """Prepend the selected prompt blocks (in selection order) to the tokens.

    ``tokens`` is ``[B, L, D]`` with ``selected`` ``[B, N]`` (or unbatched
    ``[L, D]`` with ``[N]``). Output length is ``N * L_z + L``.
    """
    sel = np.asarray(selected, dtype=np.int64)
    unbatched = tokens.ndim == 2
    if unbatched:
        tokens = tokens.reshape(1, *tokens.shape)
        sel = sel.reshape(1, -1)
    B = tokens.shape[0]
    if sel.shape[0] != B:
        raise DimensionError("one selection row is needed per window")
    if sel.size and (sel.min() < 0 or sel.max() >= pool.pool_size):
        raise UsageError(f"prompt index out of range for pool of {pool.pool_size}")
    n = sel.shape[1]
    if n == 0:
        out = tokens
    else:
        prompts = pool.prompts[sel]                      # [B, N, L_z, D]
        prompts = prompts.reshape(B, n * pool.prompt_len, pool.dim)
        out = concat([prompts, tokens], axis=1)
    return out[0] if unbatched else out


def strip_prompts(tokens_out: Tensor, n: int, prompt_len: int) -> Tensor:
    drop = n * prompt_len
    if tokens_out.shape[-2] < drop:
        raise DimensionError(f"cannot strip {drop} prompt rows from {tokens_out.shape[-2]} tokens")
    if drop == 0:
        return tokens_out
    return tokens_out[..., drop:, :]


def folded_attention(attn_prompted: Tensor, n_prompt_tokens: int) -> Tensor:
    """Rows of the original tokens with all prompt columns summed into one.

    ``[B, h, P + L, P + L] -> [B, h, L, L + 1]``; the last column holds the
    attention mass that original tokens place on prompt tokens.
    """
    if n_prompt_tokens == 0:
        return attn_prompted
    rows = attn_prompted[:, :, n_prompt_tokens:, :]
    on_tokens = rows[..., n_prompt_tokens:]
    on_prompts = rows[..., :n_prompt_tokens].sum(axis=-1, keepdims=True)
    return concat([on_tokens, on_prompts], axis=-1)


def attention_divergence(attn_prompted: Tensor, attn_plain: Tensor, n_prompt_tokens: int) -> Tensor:
    """KL(prompted || plain) over attention rows, averaged over rows, heads and batch.

    The plain map gets a zero column for prompt mass, which the KL clamp
    turns into a finite penalty.
    """
    p = folded_attention(attn_prompted, n_prompt_tokens)
    if n_prompt_tokens == 0:
        return kl_div(p, attn_plain)
    zero = np.zeros(attn_plain.shape[:-1] + (1,), dtype=attn_plain.dtype)
    q = concat([attn_plain, Tensor(zero)], axis=-1)
    return kl_div(p, q)


def renormalized_subblock_divergence(attn_prompted: Tensor, attn_plain: Tensor,
                                     n_prompt_tokens: int) -> Tensor:
    """KL of the renormalized token-to-token sub-block against the plain map.

    Kept for comparison only: in the first attention layer the token-token
    scores do not depend on the prompts, so this is identically zero.
    """
    sub = attn_prompted[:, :, n_prompt_tokens:, n_prompt_tokens:]
    sub = sub / sub.sum(axis=-1, keepdims=True)
    return kl_div(sub, attn_plain)


def divergence_loss(bundle, x_in, lambda_k: float = 1.0, kl_clamp: float | None = 10.0,
                    return_parts: bool = False):
    """Prompt-pool objective: -KL(prompted || pseudo-normal) - lambda_k * key alignment.

    Only the pool's keys and prompts receive gradient.
    """
    arch = bundle.arch
    x = bundle.as_batch(x_in)
    n = arch.top_n
    pool = bundle.pool
    with no_grad():
        x_rec = bundle.reconstruct(x)
        query = bundle.extract_query(x_rec)
    selected = select_top_n(query.data, pool, n)
    with bundle.frozen("e_AD", "theta", "theta_ad"):
        emb = Tensor(bundle.e_AD(x_rec).data)
        prompted = attach_prompts(emb, pool, selected)
        theta = bundle.theta_AD
        attn_p = theta.first_attention(prompted)
        with no_grad():
            attn_r = theta.first_attention(emb)
    kl = attention_divergence(attn_p, attn_r, n * arch.prompt_len)
    kl_term = kl.clamp_max(kl_clamp) if kl_clamp is not None else kl
    if n > 0:
        keys = pool.keys[selected]                                   # [B, N, D]
        align = cosine_similarity(Tensor(query.data)[:, None, :], keys, axis=-1).mean()
    else:
        align = Tensor(np.zeros((), dtype=kl.dtype))
    loss = -kl_term - lambda_k * align
    if return_parts:
        return loss, kl, align
    return loss
