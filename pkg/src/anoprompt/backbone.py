"""Shared transformer backbone, task heads, feature extractor and the model bundle."""
from __future__ import annotations

import contextlib
import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .aafn import AAFNetwork
from .config import ArchConfig
from .engine import ParamStore, Tensor, concat, no_grad
from .errors import DimensionError, UsageError
from .injection import TYPES, softplus_inverse
from .layers import Embedding, ForecastHead, LayerNorm, Linear, Module, TransformerStack
from .prompt_pool import PromptPool, attach_prompts, select_top_n, strip_prompts

COMPONENTS = ("theta", "e_F", "e_AD", "o_F", "o_AD", "f_ftr", "aafn", "pool", "inject")


class FeatureExtractor(Module):
    """Independent transformer with a learnable [CLS] token and its own reconstruction head."""

    def __init__(self, store, prefix, channels, dim, heads, n_layers, max_len, rng):
        super().__init__(store, prefix)
        self.embed = self.child(Embedding(store, f"{prefix}.embed", channels, dim, max_len, rng))
        self.param("cls", 0.02 * rng.standard_normal(dim))
        self.blocks = self.child(TransformerStack(store, f"{prefix}.blocks", dim, heads, n_layers, rng))
        self.head = self.child(Linear(store, f"{prefix}.head", dim, channels, rng))
        self.dim = dim

    def encode(self, x: Tensor) -> Tensor:
        """``[B, S, C] -> [B, S + 1, D]`` with the [CLS] output at position 0."""
        tokens = self.embed(x)
        B = tokens.shape[0]
        cls = self.p("cls").reshape(1, 1, self.dim) + Tensor(np.zeros((B, 1, self.dim), dtype=tokens.dtype))
        out, _ = self.blocks(concat([cls, tokens], axis=1))
        return out


class InjectionMagnitudes(Module):
    def __init__(self, store, prefix, init: float):
        super().__init__(store, prefix)
        self.param("raw", np.full(len(TYPES), softplus_inverse(init)))

    def effective(self) -> Tensor:
        return self.p("raw").softplus()


class ModelBundle:
    """All trainable components plus phase flags.

    ``theta_F`` and ``theta_AD`` are the same object unless the bundle was
    built with ``shared=False``.
    """

    def __init__(self, arch: ArchConfig, channels: int, seed: int = 0, dtype="float64",
                 shared: bool = True, magnitude_init: float = 1.0):
        arch.validate()
        self.arch = dataclasses.replace(arch)
        self.channels = channels
        self.seed = seed
        self.shared = shared
        self.magnitude_init = magnitude_init
        self.store = ParamStore(dtype)
        D, C = arch.d_model, channels

        def rng(k):
            return np.random.default_rng([seed, 2, k])

        ad_len = max(arch.l_in, arch.ad_window) + arch.top_n * arch.prompt_len
        self.theta_F = TransformerStack(self.store, "theta", D, arch.n_heads, arch.n_layers, rng(0))
        self.e_F = Embedding(self.store, "e_F", C, D, arch.l_in, rng(1))
        self.e_AD = Embedding(self.store, "e_AD", C, D, ad_len, rng(2))
        self.o_F = ForecastHead(self.store, "o_F", arch.l_in, arch.l_out, D, C, rng(3))
        self.o_AD = Linear(self.store, "o_AD", D, C, rng(4))
        self.f_ftr = FeatureExtractor(self.store, "f_ftr", C, D, arch.n_heads, arch.fftr_layers,
                                      max(arch.l_in, arch.ad_window), rng(5))
        self.aafn = AAFNetwork(self.store, "aafn", C, D, arch.l_in, arch.l_out, arch.aafn_heads, rng(6))
        self.pool = PromptPool(self.store, "pool", arch.pool_size, arch.prompt_len, D, rng(7))
        self.inject = InjectionMagnitudes(self.store, "inject", magnitude_init)
        if shared:
            self.theta_AD = self.theta_F
        else:
            self.theta_AD = TransformerStack(self.store, "theta_ad", D, arch.n_heads, arch.n_layers, rng(8))

        self.components: dict[str, Module] = {
            "theta": self.theta_F, "e_F": self.e_F, "e_AD": self.e_AD, "o_F": self.o_F,
            "o_AD": self.o_AD, "f_ftr": self.f_ftr, "aafn": self.aafn, "pool": self.pool,
            "inject": self.inject,
        }
        if not shared:
            self.components["theta_ad"] = self.theta_AD
        self.fftr_trained = False
        self.aafn_trained = False
        self.pool_trained = False

    # -- freezing ------------------------------------------------------------------
    def set_frozen(self, name: str, flag: bool) -> None:
        if name in self.components:
            self.components[name].set_frozen(flag)

    def is_frozen(self, name: str) -> bool:
        return self.components[name].frozen

    @contextlib.contextmanager
    def frozen(self, *names: str):
        """Temporarily freeze components (unknown names are ignored)."""
        present = [n for n in names if n in self.components]
        prev = {n: self.components[n].frozen for n in present}
        for n in present:
            self.components[n].set_frozen(True)
        try:
            yield self
        finally:
            for n in present:
                self.components[n].set_frozen(prev[n])

    def component_params(self, name: str) -> list[str]:
        return self.components[name].param_names()

    def param_count(self) -> int:
        return sum(p.size for p in self.store.params.values())

    # -- helpers -------------------------------------------------------------------
    @property
    def dtype(self):
        return self.store.dtype

    def as_batch(self, x) -> Tensor:
        if isinstance(x, Tensor):
            t = x
        else:
            t = Tensor(np.asarray(x, dtype=self.dtype))
        if t.ndim == 2:
            t = t.reshape(1, *t.shape)
        if t.ndim != 3 or t.shape[-1] != self.channels:
            raise DimensionError(f"expected [B, S, {self.channels}] input, got {t.shape}")
        return t

    @staticmethod
    def _unbatch(out: Tensor, x) -> Tensor:
        nd = x.ndim if isinstance(x, (Tensor, np.ndarray)) else np.ndim(x)
        return out[0] if nd == 2 else out

    def magnitudes(self) -> Tensor:
        return self.inject.effective()

    # -- task paths ----------------------------------------------------------------
    def embed(self, head: str, x) -> Tensor:
        emb = {"F": self.e_F, "AD": self.e_AD}.get(head)
        if emb is None:
            raise UsageError(f"unknown head {head!r}")
        return self._unbatch(emb(self.as_batch(x)), x)

    def backbone_forward(self, tokens: Tensor, path: str = "F") -> tuple[Tensor, Tensor]:
        theta = self.theta_F if path == "F" else self.theta_AD
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.reshape(1, *tokens.shape)
        out, attn = theta(tokens)
        return (out[0], attn[0]) if squeeze else (out, attn)

    def forecast(self, x_in) -> Tensor:
        x = self.as_batch(x_in)
        if x.shape[1] != self.arch.l_in:
            raise DimensionError(f"forecast expects {self.arch.l_in} input steps, got {x.shape[1]}")
        h, _ = self.theta_F(self.e_F(x))
        return self._unbatch(self.o_F(h), x_in)

    def reconstruct(self, x) -> Tensor:
        xb = self.as_batch(x)
        h, _ = self.theta_AD(self.e_AD(xb))
        return self._unbatch(self.o_AD(h), x)

    def reconstruct_prompted(self, x_rec, selected) -> Tensor:
        """Reconstruction of prompt-augmented embeddings, prompts stripped before the head."""
        xb = self.as_batch(x_rec)
        prompted = attach_prompts(self.e_AD(xb), self.pool, selected)
        h, _ = self.theta_AD(prompted)
        n = np.asarray(selected).shape[-1]
        return self.o_AD(strip_prompts(h, n, self.arch.prompt_len))

    def select_prompts(self, x_rec) -> np.ndarray:
        with no_grad():
            q = self.extract_query(Tensor(self.as_batch(x_rec).data))
        return select_top_n(q.data, self.pool, self.arch.top_n)

    def extract_query(self, x) -> Tensor:
        out = self.f_ftr.encode(self.as_batch(x))
        q = out[:, 0, :]
        return q[0] if np.ndim(x.data if isinstance(x, Tensor) else x) == 2 else q

    def fftr_reconstruct(self, x) -> Tensor:
        out = self.f_ftr.encode(self.as_batch(x))
        return self._unbatch(self.f_ftr.head(out[:, 1:, :]), x)

    def fftr_step_errors(self, x: np.ndarray) -> np.ndarray:
        """Per-step channel-mean squared reconstruction error ``[B, S]``, in chunks of L_in."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        chunk = self.arch.l_in
        parts = []
        with no_grad():
            for s in range(0, x.shape[1], chunk):
                xs = x[:, s:s + chunk]
                rec = self.fftr_reconstruct(Tensor(xs)).data
                parts.append(((rec - xs) ** 2).mean(axis=-1))
        return np.concatenate(parts, axis=1)

    # -- persistence -----------------------------------------------------------------
    def meta(self) -> dict:
        return {
            "arch": dataclasses.asdict(self.arch),
            "channels": self.channels,
            "seed": self.seed,
            "shared": self.shared,
            "dtype": str(self.dtype),
            "magnitude_init": self.magnitude_init,
            "flags": {"fftr_trained": self.fftr_trained, "aafn_trained": self.aafn_trained,
                      "pool_trained": self.pool_trained},
            "frozen": {n: m.frozen for n, m in self.components.items()},
        }


def save_checkpoint(bundle: ModelBundle, path: str | Path, extra: dict | None = None) -> Path:
    """Write parameters and metadata to a ``.npz`` file."""
    path = Path(path)
    meta = bundle.meta()
    if extra:
        meta["extra"] = extra
    arrays = {f"param/{k}": v for k, v in bundle.store.state_arrays().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    # written entry by entry with a fixed timestamp so equal weights give equal bytes
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        arrays = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    arch_d = dict(meta["arch"])
    arch = ArchConfig(**arch_d)
    bundle = ModelBundle(arch, meta["channels"], seed=meta["seed"], dtype=meta["dtype"],
                         shared=meta["shared"], magnitude_init=meta.get("magnitude_init", 1.0))
    bundle.store.load_arrays(arrays)
    for k, v in meta["flags"].items():
        setattr(bundle, k, v)
    for n, flag in meta.get("frozen", {}).items():
        bundle.set_frozen(n, flag)
    return bundle, meta
