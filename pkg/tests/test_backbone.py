import numpy as np
import pytest

from anoprompt.backbone import ModelBundle, load_checkpoint, save_checkpoint
from anoprompt.config import ArchConfig
from anoprompt.engine import Tensor, adam_step, mse, no_grad
from anoprompt.errors import DimensionError, NumericError, UsageError
from anoprompt.prompt_pool import attach_prompts, strip_prompts

ARCH = ArchConfig(l_in=16, l_out=8, d_model=8, n_layers=2, n_heads=2, fftr_layers=1, aafn_heads=2,
                  pool_size=4, top_n=2, prompt_len=3, ad_window=16)


@pytest.fixture
def bundle():
    return ModelBundle(ARCH, 3, seed=0, dtype="float64")


def test_defaults():
    a = ArchConfig()
    assert (a.l_in, a.d_model, a.n_layers, a.pool_size, a.prompt_len, a.top_n, a.tolerance) == \
        (100, 256, 3, 10, 5, 3, 50.0)


def test_embed_zero_input_is_bias_plus_positions(bundle):
    out = bundle.embed("F", np.zeros((5, 3))).data
    expected = bundle.store["e_F.proj.b"].data + bundle.store["e_F.pos"].data[:5]
    assert np.allclose(out, expected)


def test_embed_heads_differ_and_capacity(bundle, rng):
    x = rng.standard_normal((6, 3))
    assert not np.allclose(bundle.embed("F", x).data, bundle.embed("AD", x).data)
    assert bundle.embed("AD", rng.standard_normal((16 + 2 * 3, 3))).shape == (22, 8)
    with pytest.raises(DimensionError):
        bundle.embed("F", rng.standard_normal((17, 3)))
    with pytest.raises(DimensionError):
        bundle.embed("AD", rng.standard_normal((23, 3)))
    with pytest.raises(UsageError):
        bundle.embed("X", x)


def test_backbone_forward_contract(bundle, rng):
    tokens = Tensor(rng.standard_normal((7, 8)))
    out, attn = bundle.backbone_forward(tokens)
    assert out.shape == (7, 8) and attn.shape == (2, 7, 7)
    assert np.allclose(attn.data.sum(-1), 1.0, atol=1e-6)
    _, attn1 = bundle.backbone_forward(Tensor(rng.standard_normal((1, 8))))
    assert np.array_equal(attn1.data, np.ones((2, 1, 1)))


def test_non_finite_activation_names_layer(bundle):
    tokens = Tensor(np.full((1, 4, 8), np.inf))
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="theta"):
        bundle.backbone_forward(tokens)


@pytest.mark.parametrize("l_out", [100, 200, 400])
def test_forecast_shapes(l_out, rng):
    arch = ArchConfig(l_in=100, l_out=l_out, d_model=8, n_layers=1, n_heads=2, fftr_layers=1, aafn_heads=2)
    b = ModelBundle(arch, 2, seed=0)
    assert b.forecast(rng.standard_normal((100, 2))).shape == (l_out, 2)
    assert b.forecast(rng.standard_normal((3, 100, 2))).shape == (3, l_out, 2)


def test_forecast_errors_and_determinism(bundle, rng):
    x = rng.standard_normal((16, 3))
    assert np.array_equal(bundle.forecast(x).data, bundle.forecast(x).data)
    with pytest.raises(DimensionError):
        bundle.forecast(rng.standard_normal((15, 3)))
    with pytest.raises(DimensionError):
        bundle.forecast(rng.standard_normal((16, 2)))


def test_reconstruct_shape_and_finite(bundle, rng):
    x = rng.standard_normal((2, 11, 3))
    out = bundle.reconstruct(x)
    assert out.shape == x.shape and np.all(np.isfinite(out.data))
    assert np.isfinite(mse(out, Tensor(x)).item())


def test_query_contract(bundle, rng):
    x = rng.standard_normal((10, 3))
    q = bundle.extract_query(x)
    assert q.shape == (8,)
    assert not np.allclose(q.data, bundle.extract_query(x[::-1].copy()).data)
    queries = [bundle.extract_query(rng.standard_normal((10, 3))).data for _ in range(100)]
    assert len({tuple(np.round(v, 12)) for v in queries}) == 100


def test_fftr_reconstruct_strips_cls(bundle, rng):
    x = rng.standard_normal((12, 3))
    assert bundle.fftr_reconstruct(x).shape == (12, 3)
    assert bundle.fftr_step_errors(x).shape == (1, 12)


def test_shared_backbone_identity(bundle, rng):
    assert bundle.theta_F is bundle.theta_AD
    x = rng.standard_normal((1, 16, 3))
    before = bundle.reconstruct(x).data.copy()
    bundle.store.zero_grad()
    mse(bundle.forecast(x), Tensor(np.ones((1, 8, 3)))).backward()
    grads = {n: g for n, g in bundle.store.grads().items() if n.startswith("theta.")}
    assert grads
    adam_step(bundle.store, grads, lr=1e-2)
    assert not np.allclose(bundle.reconstruct(x).data, before)


def test_parameter_count_counts_theta_once(bundle):
    parts = sum(bundle.store.count(n + ".") if n != "theta" else 0 for n in bundle.components)
    theta = sum(bundle.store[n].size for n in bundle.component_params("theta"))
    assert bundle.param_count() == parts + theta
    separate = ModelBundle(ARCH, 3, seed=0, shared=False)
    assert separate.param_count() == bundle.param_count() + theta
    assert separate.theta_F is not separate.theta_AD


def test_unshared_bundle_keeps_other_inits(bundle):
    separate = ModelBundle(ARCH, 3, seed=0, shared=False)
    for name in bundle.store:
        assert np.array_equal(bundle.store[name].data, separate.store[name].data)


def test_frozen_context_restores_flags(bundle):
    with bundle.frozen("pool", "aafn"):
        assert bundle.is_frozen("pool") and bundle.is_frozen("aafn")
    assert not bundle.is_frozen("pool")


def test_attach_strip_round_trip(bundle, rng):
    tokens = bundle.embed("AD", rng.standard_normal((16, 3)))
    prompted = attach_prompts(tokens, bundle.pool, [2, 0])
    assert prompted.shape == (16 + 2 * 3, 8)
    assert np.array_equal(strip_prompts(prompted, 2, 3).data, tokens.data)


def test_default_prompted_length():
    arch = ArchConfig(d_model=8, n_heads=2, aafn_heads=2, n_layers=1, fftr_layers=1)
    b = ModelBundle(arch, 2, seed=0)
    with no_grad():
        tokens = b.embed("AD", np.zeros((100, 2)))
        assert attach_prompts(tokens, b.pool, [0, 1, 2]).shape == (115, 8)


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    b = ModelBundle(ARCH, 3, seed=4, dtype="float32")
    b.fftr_trained = True
    b.set_frozen("f_ftr", True)
    path = save_checkpoint(b, tmp_path / "c.npz", {"note": 1})
    back, meta = load_checkpoint(path)
    assert meta["extra"] == {"note": 1}
    assert back.fftr_trained and back.is_frozen("f_ftr") and back.store.dtype == np.float32
    for name in b.store:
        assert back.store[name].data.tobytes() == b.store[name].data.tobytes()
    x = rng.standard_normal((16, 3))
    assert np.array_equal(back.forecast(x).data, b.forecast(x).data)
