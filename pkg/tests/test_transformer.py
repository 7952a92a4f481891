import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lntune import autodiff as ad
from lntune.autodiff import Tensor
from lntune.checkpoint import load_checkpoint, save_checkpoint
from lntune.errors import ConfigError, ContractError, DimensionError, LengthError
from lntune.gradcheck import check_gradients, numeric_grad, relative_error
from lntune.transformer import (
    DECODER,
    LayerNormParams,
    ModelShape,
    TransformerModel,
    base_parameter_shapes,
    forward,
    layer_norm,
    multi_head_attention,
)

TINY = ModelShape(num_layers=2, hidden=8, heads=2, ffn_dim=16, vocab=12, max_len=10)
TINY_DEC = ModelShape(num_layers=2, hidden=8, heads=2, ffn_dim=16, vocab=12, max_len=10, arch=DECODER)


def ln_params(h, gain=1.0, bias=0.0, eps=1e-5):
    return LayerNormParams(Tensor(np.full(h, gain)), Tensor(np.full(h, bias)), eps)


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        out = layer_norm(Tensor(np.full((2, 5), 3.7)), ln_params(5))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_hand_case(self):
        # direct evaluation: mean 2, population std sqrt(2/3)
        out = layer_norm(Tensor([1.0, 2.0, 3.0]), LayerNormParams(Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-300))
        np.testing.assert_allclose(out.data, [-1.22474, 0.0, 1.22474], atol=1e-5)
        np.testing.assert_allclose(out.data, [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], rtol=1e-12)

    def test_zero_gain(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = layer_norm(Tensor(x), ln_params(4, gain=0.0, bias=5.0))
        np.testing.assert_array_equal(out.data, np.full((3, 4), 5.0))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 5))), ln_params(4))

    def test_params_invariants(self):
        with pytest.raises(DimensionError):
            LayerNormParams(Tensor(np.ones(3)), Tensor(np.zeros(4)))
        with pytest.raises(ContractError):
            LayerNormParams(Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.0)

    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1.0, 50.0))
    @settings(max_examples=30, deadline=None)
    def test_pre_affine_moments(self, seed, scale):
        x = np.random.default_rng(seed).uniform(-scale, scale, (20, 32))
        out = layer_norm(Tensor(x), ln_params(32, eps=1e-300)).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-9
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    @given(seed=st.integers(0, 2**31 - 1), a=st.floats(0.1, 100.0), c=st.floats(-100.0, 100.0))
    @settings(max_examples=30, deadline=None)
    def test_invariant_to_positive_affine_input_change(self, seed, a, c):
        x = np.random.default_rng(seed).normal(size=(4, 16))
        p = LayerNormParams(Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-300)
        ref = layer_norm(Tensor(x), p).data
        moved = layer_norm(Tensor(a * x + c), p).data
        np.testing.assert_allclose(moved, ref, atol=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-2, 2, (3, 6)), requires_grad=True)
        p = LayerNormParams(
            Tensor(rng.uniform(-2, 2, 6), requires_grad=True),
            Tensor(rng.uniform(-2, 2, 6), requires_grad=True),
        )
        proj = Tensor(rng.uniform(-2, 2, (3, 6)))
        results = check_gradients(
            lambda: ad.sum_all(ad.mul(layer_norm(x, p), proj)),
            {"x": x, "gain": p.gain, "bias": p.bias},
            samples=18,
        )
        assert max(r.worst for r in results) < 1e-4


class TestShape:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            ModelShape(num_layers=1, hidden=10, heads=3, ffn_dim=4, vocab=5, max_len=4)

    @pytest.mark.parametrize("field", ["num_layers", "hidden", "heads", "ffn_dim", "vocab", "max_len"])
    def test_counts_positive(self, field):
        kw = dict(num_layers=1, hidden=4, heads=1, ffn_dim=4, vocab=5, max_len=4)
        kw[field] = 0
        with pytest.raises(ConfigError):
            ModelShape(**kw)

    def test_canonical_names(self):
        names = base_parameter_shapes(TINY)
        assert "layer.1.ln_mha.gain" in names and "layer.2.ln_ffn.bias" in names
        assert "layer.0.ln_mha.gain" not in names
        assert len(names) == len(set(names))

    def test_layer_norms_start_as_identity(self):
        model = TransformerModel.initialize(TINY, seed=5)
        for name, t in model.params.items():
            if name.endswith(".gain"):
                np.testing.assert_array_equal(t.data, 1.0)
            if ".ln" in name and name.endswith(".bias"):
                np.testing.assert_array_equal(t.data, 0.0)


def _hand_attention(x, wq, wk, wv, wo, past):
    """Single head, explicit loops."""
    q = x @ wq
    keys = list(past[0]) + [row @ wk for row in x]
    vals = list(past[1]) + [row @ wv for row in x]
    out = []
    for t in range(len(x)):
        s = np.array([q[t] @ k / np.sqrt(len(q[t])) for k in keys])
        w = np.exp(s - s.max())
        w /= w.sum()
        out.append(sum(wi * vi for wi, vi in zip(w, vals)) @ wo)
    return np.array(out)


class TestAttention:
    def _single_head_model(self, seed=0):
        shape = ModelShape(num_layers=1, hidden=3, heads=1, ffn_dim=4, vocab=5, max_len=4)
        model = TransformerModel.initialize(shape, seed=seed)
        rng = np.random.default_rng(seed)
        for proj in ("query", "key", "value", "output"):
            model.params[f"layer.1.mha.{proj}.weight"].data[...] = rng.uniform(-1, 1, (3, 3))
        return model

    def test_matches_brute_force_with_prefix(self):
        model = self._single_head_model()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 3))
        past = rng.normal(size=(2, 2, 3))
        out = multi_head_attention(Tensor(x), model, 1, past_kv=Tensor(past)).data
        w = {k: model.params[f"layer.1.mha.{k}.weight"].data for k in ("query", "key", "value", "output")}
        expected = _hand_attention(x[0], w["query"], w["key"], w["value"], w["output"], past)
        np.testing.assert_allclose(out[0], expected, rtol=1e-12)

    def test_single_token_without_prefix_is_value_row(self):
        model = self._single_head_model(2)
        x = np.random.default_rng(2).normal(size=(1, 1, 3))
        out = multi_head_attention(Tensor(x), model, 1).data
        w = {k: model.params[f"layer.1.mha.{k}.weight"].data for k in ("value", "output")}
        np.testing.assert_allclose(out[0, 0], x[0, 0] @ w["value"] @ w["output"], rtol=1e-12)

    def test_empty_prefix_is_bit_identical(self):
        model = TransformerModel.initialize(TINY_DEC, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
        plain = multi_head_attention(x, model, 1, causal=True).data
        empty = multi_head_attention(x, model, 1, past_kv=Tensor(np.zeros((2, 0, 8))), causal=True).data
        assert plain.tobytes() == empty.tobytes()

    def test_prefix_width_mismatch(self):
        model = TransformerModel.initialize(TINY, seed=0)
        with pytest.raises(DimensionError):
            multi_head_attention(Tensor(np.zeros((1, 2, 8))), model, 1, past_kv=Tensor(np.zeros((2, 3, 6))))

    def test_causal_mask_never_hides_prefix(self):
        model = TransformerModel.initialize(TINY_DEC, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 8)))
        past = np.random.default_rng(1).normal(size=(2, 2, 8))
        base = multi_head_attention(x, model, 1, past_kv=Tensor(past), causal=True).data
        past2 = past.copy()
        past2[:, 1] += 1.0
        moved = multi_head_attention(x, model, 1, past_kv=Tensor(past2), causal=True).data
        # even the first position attends to the prefix
        assert not np.allclose(base[0, 0], moved[0, 0])


class TestForward:
    def test_zero_head_gives_zero_logits(self):
        model = TransformerModel.initialize(TINY, seed=0, head_init="zeros")
        out = forward(model, [1, 2, 3, 4])
        assert out.shape == (2,)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_output_shapes(self):
        enc = TransformerModel.initialize(TINY, seed=0)
        dec = TransformerModel.initialize(TINY_DEC, seed=0)
        assert forward(enc, np.zeros((3, 4), dtype=int)).shape == (3, 2)
        assert forward(dec, [1, 2, 3]).shape == (3, 12)

    def test_deterministic(self):
        a = forward(TransformerModel.initialize(TINY, seed=9), [3, 1, 4, 1, 5]).data
        b = forward(TransformerModel.initialize(TINY, seed=9), [3, 1, 4, 1, 5]).data
        assert a.tobytes() == b.tobytes()

    def test_too_long(self):
        with pytest.raises(LengthError):
            forward(TransformerModel.initialize(TINY), list(range(11)))

    def test_bad_token(self):
        with pytest.raises(ContractError):
            forward(TransformerModel.initialize(TINY), [1, 12])

    def test_single_weight_finite_difference(self):
        model = TransformerModel.initialize(TINY, seed=4)
        w = model.params["layer.1.ffn.in.weight"]
        w.requires_grad = True
        tokens = np.array([[1, 5, 7, 2], [3, 3, 9, 0]])
        proj = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]))

        def loss():
            return ad.sum_all(ad.mul(forward(model, tokens), proj))

        ad.backward(loss())

        def value():
            with ad.no_grad():
                return loss().item()

        num = numeric_grad(value, w, [0, 17, 100])
        assert relative_error(num, w.grad.reshape(-1)[[0, 17, 100]]) < 1e-4

    @given(seed=st.integers(0, 10_000), t=st.integers(0, 6))
    @settings(max_examples=20, deadline=None)
    def test_causal(self, seed, t):
        model = TransformerModel.initialize(TINY_DEC, seed=1)
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, 12, 8)
        changed = tokens.copy()
        changed[t + 1 :] = rng.integers(0, 12, 8 - t - 1)
        a = forward(model, tokens).data[: t + 1]
        b = forward(model, changed).data[: t + 1]
        assert a.tobytes() == b.tobytes()


def test_checkpoint_round_trip(tmp_path):
    model = TransformerModel.initialize(TINY, seed=3)
    model.params["layer.2.ln_ffn.gain"].data[0] = np.nextafter(1.0, 2.0)
    path = save_checkpoint(model, tmp_path / "m.npz")
    loaded = load_checkpoint(path)
    assert loaded.shape == model.shape
    assert set(loaded.params) == set(model.params)
    for name, t in model.params.items():
        assert loaded.params[name].data.tobytes() == t.data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
