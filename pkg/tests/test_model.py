import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_stress import autograd as ag
from ecg_stress import model as m
from ecg_stress.autograd import Rng, Tensor
from ecg_stress.errors import ConfigError, FormatError, ShapeError
from ecg_stress.model import ModelConfig, ModelParams

from oracles import attention_loops


@pytest.fixture(scope="module")
def reduced():
    return m.init_params(ModelConfig.reduced(), Rng(0))


@pytest.fixture(scope="module")
def full_params():
    return m.init_params(ModelConfig.full(), Rng(0))


def pe_direct(n, d):
    out = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            angle = pos / 10000 ** (i / d)
            out[pos, i] = math.sin(angle)
            out[pos, i + 1] = math.cos(angle)
    return out


class TestPositionalEncoding:
    def test_first_row(self):
        pe = m.positional_encoding(7, 1024)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_sin_one(self):
        assert abs(m.positional_encoding(7, 1024)[1, 0] - 0.8414709848) < 1e-10

    def test_full_table_matches_formula(self):
        np.testing.assert_allclose(m.positional_encoding(7, 1024), pe_direct(7, 1024), atol=1e-12, rtol=0)

    def test_read_only(self):
        with pytest.raises(ValueError):
            m.positional_encoding(7, 32)[0, 0] = 1.0

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            m.positional_encoding(3, 5)


class TestAttention:
    def test_single_token_returns_v(self):
        rng = np.random.default_rng(0)
        q, k, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 3))
        np.testing.assert_array_equal(m.attention(Tensor(q), Tensor(k), Tensor(v)).data, v)

    def test_zero_query_averages_v(self):
        rng = np.random.default_rng(1)
        k, v = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        out = m.attention(Tensor(np.zeros((5, 4))), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), atol=1e-15)

    @given(n=st.integers(1, 8), d=st.integers(1, 8), dv=st.integers(1, 6), seed=st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_loop_oracle(self, n, d, dv, seed):
        rng = np.random.default_rng(seed)
        q, k, v = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, dv))
        weights = []
        out = m.attention(Tensor(q), Tensor(k), Tensor(v), weights).data
        want, want_w = attention_loops(q, k, v)
        assert np.max(np.abs(out - want)) < 1e-12
        assert np.max(np.abs(weights[0] - want_w)) < 1e-12
        assert np.max(np.abs(weights[0].sum(axis=-1) - 1.0)) < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            m.attention(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 2))))

    def test_gradient_check(self):
        from ecg_stress import gradcheck

        result = gradcheck.check_attention(seed=3)
        assert result.passed, result.failures[:3]
        assert result.max_rel_error < 1e-5


def random_attention_params(d_model, d_qkv, seed):
    rng = np.random.default_rng(seed)
    return m.AttentionParams(
        *(Tensor(rng.normal(scale=0.3, size=s)) for s in [(d_model, d_qkv)] * 3 + [(d_qkv, d_model)])
    )


class TestMultiHead:
    def test_one_head_is_plain_attention(self):
        p = random_attention_params(6, 4, 0)
        x = np.random.default_rng(1).normal(size=(2, 5, 6))
        got = m.multi_head_attention(Tensor(x), p, heads=1).data
        q, k, v = (x @ w.data for w in p[:3])
        want = np.stack([attention_loops(q[b], k[b], v[b])[0] for b in range(2)]) @ p.w_o.data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_heads_use_per_head_scale(self):
        p = random_attention_params(4, 4, 2)
        x = np.random.default_rng(3).normal(size=(1, 3, 4))
        got = m.multi_head_attention(Tensor(x), p, heads=2).data
        q, k, v = (x[0] @ w.data for w in p[:3])
        parts = [attention_loops(q[:, s], k[:, s], v[:, s])[0] for s in (slice(0, 2), slice(2, 4))]
        np.testing.assert_allclose(got[0], np.hstack(parts) @ p.w_o.data, atol=1e-12)

    def test_shape(self, reduced):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 7, 32)))
        assert m.multi_head_attention(x, reduced.attention(0), 2).shape == (2, 7, 32)

    def test_heads_must_divide(self):
        p = random_attention_params(6, 4, 0)
        with pytest.raises(ConfigError):
            m.multi_head_attention(Tensor(np.zeros((1, 2, 6))), p, heads=3)


class TestTokens:
    def test_full_shape(self):
        x = Tensor(np.arange(2 * 128 * 56, dtype=float).reshape(2, 128, 56))
        tokens = m.reshape_to_tokens(x, 1024)
        assert tokens.shape == (2, 7, 1024)
        np.testing.assert_array_equal(tokens.data.reshape(2, 128, 56), x.data)

    def test_single_token(self):
        assert m.reshape_to_tokens(Tensor(np.zeros((1, 128, 8))), 1024).shape == (1, 1, 1024)

    def test_row_major_grouping(self):
        x = np.arange(8.0).reshape(1, 2, 4)
        np.testing.assert_array_equal(m.reshape_to_tokens(Tensor(x), 4).data[0], [[0, 1, 2, 3], [4, 5, 6, 7]])

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            m.reshape_to_tokens(Tensor(np.zeros((1, 3, 5))), 4)


class TestConfig:
    def test_full_stage_lengths(self):
        stages = ModelConfig.full().stage_lengths()
        assert stages == {"input": 7680, "conv1": 953, "pool_conv1": 476, "conv2": 112, "pool_conv2": 56}
        assert ModelConfig.full().n_tokens == 7

    def test_full_front_end_shapes(self, full_params):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 7680)))
        with ag.no_grad():
            h = m.front_end(full_params, x)
        assert h.shape == (1, 128, 56)
        assert m.reshape_to_tokens(h, 1024).shape == (1, 7, 1024)

    def test_reduced_has_seven_tokens(self):
        assert ModelConfig.reduced().n_tokens == 7

    @pytest.mark.parametrize("window", [7000, 7500, 9000, 1000])
    def test_bad_window_rejected_with_suggestions(self, window):
        cfg = dataclasses.replace(ModelConfig.full(), window_len=window)
        with pytest.raises(ConfigError, match="Valid nearby window lengths"):
            cfg.validate()

    @given(st.integers(200, 20_000))
    @settings(max_examples=80, deadline=None)
    def test_validation_agrees_with_divisibility(self, window):
        cfg = dataclasses.replace(ModelConfig.full(), window_len=window)
        n = window
        for kernel, stride in ((64, 8), (2, 2), (32, 4), (2, 2)):
            n = (n - kernel) // stride + 1 if n >= kernel else 0
        ok = n > 0 and (128 * n) % 1024 == 0
        if ok:
            cfg.validate()
        else:
            with pytest.raises(ConfigError):
                cfg.validate()

    def test_suggestions_are_valid(self):
        for w in ModelConfig.full().valid_window_lengths(7000):
            dataclasses.replace(ModelConfig.full(), window_len=w).validate()

    def test_other_checks(self):
        base = ModelConfig.reduced()
        for bad in (dict(heads=3), dict(d_model=31), dict(fc_dims=(8, 2)), dict(fc_dropout=1.0)):
            with pytest.raises(ConfigError):
                dataclasses.replace(base, **bad).validate()

    def test_dict_round_trip(self):
        cfg = ModelConfig.reduced()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncoder:
    def test_permutation_equivariance(self, reduced):
        x = np.random.default_rng(0).normal(size=(1, 7, 32))
        perm = np.random.default_rng(1).permutation(7)
        with ag.no_grad():
            a = m.encode(reduced, Tensor(x)).data
            b = m.encode(reduced, Tensor(x[:, perm])).data
        assert np.max(np.abs(a[:, perm] - b)) < 1e-9

    def test_residual_identity(self, reduced):
        params = reduced.copy()
        for name in ("attn.w_o", "ff1.weight", "ff2.weight"):
            params.tensors[f"encoder.0.{name}"].data[...] = 0.0
        rng = np.random.default_rng(2)
        gamma, beta, shift = rng.normal(size=(3, 32))
        params.tensors["encoder.0.ln1.gamma"].data[...] = gamma
        params.tensors["encoder.0.ln1.beta"].data[...] = beta
        # with ff1 zeroed the FFN outputs its final bias, which rides the residual
        params.tensors["encoder.0.ff2.bias"].data[...] = shift
        x = np.random.default_rng(0).normal(size=(2, 7, 32))

        def ln(v, g, b):
            mu = v.mean(-1, keepdims=True)
            return g * (v - mu) / np.sqrt(v.var(-1, keepdims=True) + 1e-5) + b

        want = ln(ln(x, gamma, beta) + shift, 1.0, 0.0)
        with ag.no_grad():
            got = m.encoder_layer(Tensor(x), params, 0, None, False).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_attention_rows_sum_to_one_everywhere(self, full_params):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 7680)))
        weights = []
        with ag.no_grad():
            m.forward(full_params, x, weights_out=weights)
        assert len(weights) == 4
        for w in weights:
            assert w.shape == (2, 4, 7, 7)
            assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-12


class TestForward:
    def test_range_and_shape(self, reduced):
        x = np.random.default_rng(0).normal(size=(5, 1, 256))
        p = m.forward(reduced, x).data
        assert p.shape == (5,)
        assert np.all((p > 0) & (p < 1))

    def test_identical_inputs(self, reduced):
        row = np.random.default_rng(0).normal(size=(1, 1, 256))
        p = m.forward(reduced, np.concatenate([row, row])).data
        assert p[0] == p[1]

    def test_pure_in_inference(self, reduced):
        x = np.random.default_rng(4).normal(size=(3, 1, 256))
        first = m.forward(reduced, x).data.tobytes()
        assert all(m.forward(reduced, x).data.tobytes() == first for _ in range(100))

    def test_dropout_active_in_training(self, reduced):
        x = np.random.default_rng(4).normal(size=(3, 1, 256))
        a = m.forward(reduced, x, Rng(1), training=True).data
        b = m.forward(reduced, x, Rng(2), training=True).data
        assert not np.array_equal(a, b)

    def test_full_config_forward(self, full_params):
        x = np.random.default_rng(0).normal(size=(2, 1, 7680))
        with ag.no_grad():
            p = m.forward(full_params, x).data
        assert p.shape == (2,) and np.all((p > 0) & (p < 1))

    def test_wrong_window(self, reduced):
        with pytest.raises(ShapeError, match="256"):
            m.forward(reduced, np.zeros((1, 1, 255)))

    def test_predict_proba_batches_agree(self, reduced):
        x = np.random.default_rng(5).normal(size=(7, 256))
        np.testing.assert_array_equal(m.predict_proba(reduced, x, 3), m.predict_proba(reduced, x, 256))


class TestInit:
    def test_deterministic(self):
        a = m.init_params(ModelConfig.reduced(), Rng(9))
        b = m.init_params(ModelConfig.reduced(), Rng(9))
        assert a.to_bytes() == b.to_bytes()

    def test_gains_biases_finite(self, full_params):
        assert full_params.all_finite()
        for name, t in full_params.items():
            if name.endswith("gamma"):
                np.testing.assert_array_equal(t.data, 1.0)
            elif name.endswith(("bias", "beta")):
                np.testing.assert_array_equal(t.data, 0.0)

    def test_conv1_weight_std(self, full_params):
        w = full_params["conv1.weight"].data
        bound = 1 / math.sqrt(64)  # fan_in = 1 channel x 64 taps
        assert abs(w.std() - bound / math.sqrt(3)) < 0.1 * bound / math.sqrt(3)
        assert np.max(np.abs(w)) <= bound

    def test_parameter_count(self, full_params):
        shapes = m.param_shapes(ModelConfig.full())
        assert full_params.num_parameters() == sum(int(np.prod(s)) for s in shapes.values())
        assert shapes["fc1.weight"] == (7 * 1024, 512)
        assert shapes["conv2.weight"] == (128, 64, 32)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, reduced, tmp_path):
        reduced.save(tmp_path / "m.ckpt")
        back = ModelParams.load(tmp_path / "m.ckpt", expect=ModelConfig.reduced())
        assert back.config == reduced.config
        assert list(back) == list(reduced)
        for name in reduced:
            assert back[name].data.tobytes() == reduced[name].data.tobytes()
        assert back.to_bytes() == reduced.to_bytes()

    def test_bad_magic(self, reduced):
        with pytest.raises(FormatError, match="magic"):
            ModelParams.from_bytes(b"XXXX" + reduced.to_bytes()[4:])

    def test_truncated(self, reduced):
        buf = reduced.to_bytes()
        with pytest.raises(FormatError, match="truncated") as info:
            ModelParams.from_bytes(buf[:-1])
        assert info.value.offset > 0

    def test_trailing(self, reduced):
        with pytest.raises(FormatError, match="trailing"):
            ModelParams.from_bytes(reduced.to_bytes() + b"\x00")

    def test_config_mismatch(self, reduced):
        with pytest.raises(FormatError, match="different model config"):
            ModelParams.from_bytes(reduced.to_bytes(), expect=ModelConfig.full())

    def test_hash_mismatch(self, reduced):
        buf = bytearray(reduced.to_bytes())
        buf[6] ^= 0xFF
        with pytest.raises(FormatError, match="hash"):
            ModelParams.from_bytes(bytes(buf))
