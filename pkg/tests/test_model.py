import numpy as np
import pytest

from auattn.autodiff import Tape
from auattn.exceptions import ConfigError, DimensionError
from auattn.model import (INFER, TRAIN, ModelConfig, attention_forward, extract_features, forward,
                          format_pool_schedule, init_params, parameter_shapes, parse_pool_schedule,
                          predict, predict_proba)
from auattn.objective import weighted_bce


def shape_walk_count(filters=(32, 64, 128, 128, 256, 256), cin=3, hidden=128, aus=12):
    """Count learnable scalars layer by layer, independently of the library."""
    total = 0
    for cout in filters:
        total += 3 * 3 * cin * cout + cout  # conv kernel + bias
        total += 2 * cout                   # BN scale + shift
        cin = cout
    total += cin * hidden + hidden + 2 * hidden + hidden * 1 + 1
    total += cin * aus + aus
    return total


def attention_oracle(fmap, p):
    """Direct per-position loop: score each sub-vector, softmax, weighted sum (infer mode)."""
    n, h, w, f = fmap.shape
    out = np.zeros((n, f))
    for s in range(n):
        scores = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                z = fmap[s, i, j] @ p["w1"] + p["b1"]
                z = p["gamma"] * (z - p["mean"]) / np.sqrt(p["var"] + 1e-5) + p["beta"]
                z = np.maximum(z, 0)
                scores[i, j] = (z @ p["w2"] + p["b2"])[0]
        e = np.exp(scores - scores.max())
        wts = e / e.sum()
        for i in range(h):
            for j in range(w):
                out[s] += wts[i, j] * fmap[s, i, j]
    return out


@pytest.fixture
def att_params(rng):
    cfg = ModelConfig(input_size=16, block_filters=(3,) * 6, attention_hidden=4, pool_schedule="110000")
    params = init_params(cfg, seed=5)
    st = params.stats["attention.bn"]
    st.mean[:] = rng.normal(size=4)
    st.var[:] = rng.uniform(0.5, 2.0, size=4)
    params["attention.bn.gamma"].data[:] = rng.normal(size=4)
    params["attention.bn.beta"].data[:] = rng.normal(size=4)
    params["attention.fc1.bias"].data[:] = rng.normal(size=4)
    return params


class TestConfig:
    def test_param_count_oracle(self):
        params = init_params(ModelConfig(), seed=42, dtype=np.float32)
        assert params.num_parameters() == shape_walk_count() == 1164173

    def test_param_count_other_config(self):
        cfg = ModelConfig(block_filters=(8, 8, 16, 16, 32, 32), attention_hidden=5, num_aus=3)
        assert init_params(cfg).num_parameters() == shape_walk_count((8, 8, 16, 16, 32, 32), hidden=5, aus=3)

    def test_names_unique_and_stable(self):
        names = list(parameter_shapes(ModelConfig()))
        assert len(names) == len(set(names)) == 6 * 4 + 8
        assert names[0] == "block1.conv.kernel" and names[-1] == "head.bias"

    def test_feature_size(self):
        assert ModelConfig().feature_size == 7
        assert ModelConfig(pool_schedule="111111").feature_size == 1

    def test_collapsing_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_size=16, pool_schedule="111111").validate()
        with pytest.raises(ConfigError):
            init_params(ModelConfig(num_aus=0))

    def test_pool_schedule_text(self):
        assert format_pool_schedule(parse_pool_schedule("111100")) == "111100"
        with pytest.raises(ConfigError):
            parse_pool_schedule("11x")

    def test_dict_round_trip(self):
        cfg = ModelConfig(block_filters=(4, 4, 8, 8, 8, 8), pool_schedule="101000")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_deterministic(self):
        a, b = init_params(ModelConfig(), seed=3), init_params(ModelConfig(), seed=3)
        for (na, ta), (nb, tb) in zip(a, b):
            assert na == nb and np.array_equal(ta.data, tb.data)

    def test_seed_matters(self):
        a, b = init_params(ModelConfig(), seed=3), init_params(ModelConfig(), seed=4)
        assert not np.array_equal(a["block1.conv.kernel"].data, b["block1.conv.kernel"].data)

    def test_constant_tensors(self):
        params = init_params(ModelConfig())
        for name, t in params:
            if name.endswith(".gamma"):
                assert np.all(t.data == 1.0)
            elif name.endswith((".bias", ".beta")):
                assert np.all(t.data == 0.0)

    def test_he_scale(self):
        w = init_params(ModelConfig(), seed=0)["block6.conv.kernel"].data
        assert w.std() == pytest.approx(np.sqrt(2 / (9 * 256)), rel=0.02)
        h = init_params(ModelConfig(), seed=0)["head.weight"].data
        assert h.std() == pytest.approx(np.sqrt(1 / 256), rel=0.1)


class TestExtractor:
    def test_default_shape(self):
        params = init_params(ModelConfig(), dtype=np.float32)
        out = extract_features(np.zeros((1, 112, 112, 3), np.float32), params, ModelConfig())
        assert out.shape == (1, 7, 7, 256)

    def test_all_pool_shape(self):
        cfg = ModelConfig(block_filters=(4, 4, 8, 8, 8, 8), pool_schedule="111111")
        out = extract_features(np.zeros((2, 112, 112, 3)), init_params(cfg), cfg)
        assert out.shape == (2, 1, 1, 8)

    def test_zero_input_finite(self, tiny_config):
        out = extract_features(np.zeros((2, 16, 16, 3)), init_params(tiny_config), tiny_config, INFER)
        assert np.isfinite(out.data).all()

    def test_wrong_size(self, tiny_config):
        with pytest.raises(DimensionError):
            extract_features(np.zeros((1, 17, 17, 3)), init_params(tiny_config), tiny_config)
        with pytest.raises(DimensionError):
            extract_features(np.zeros((1, 16, 16, 1)), init_params(tiny_config), tiny_config)

    def test_bad_mode(self, tiny_config):
        with pytest.raises(ValueError):
            extract_features(np.zeros((1, 16, 16, 3)), init_params(tiny_config), tiny_config, "eval")


class TestAttention:
    def test_single_position(self, att_params, rng):
        fmap = rng.normal(size=(3, 1, 1, 3))
        out = attention_forward(fmap, att_params)
        assert np.all(out.weights.data == 1.0)
        np.testing.assert_array_equal(out.vector.data, fmap[:, 0, 0])

    def test_equal_scores_give_mean(self, att_params, rng):
        att_params["attention.fc2.weight"].data[:] = 0
        fmap = rng.normal(size=(2, 3, 4, 3))
        out = attention_forward(fmap, att_params)
        np.testing.assert_allclose(out.vector.data, fmap.mean(axis=(1, 2)), atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 2, 2, 3), (3, 2, 3, 3), (2, 5, 1, 3)])
    def test_matches_loop_oracle(self, att_params, rng, shape):
        fmap = rng.normal(size=shape)
        p = {"w1": att_params["attention.fc1.weight"].data, "b1": att_params["attention.fc1.bias"].data,
             "gamma": att_params["attention.bn.gamma"].data, "beta": att_params["attention.bn.beta"].data,
             "mean": att_params.stats["attention.bn"].mean, "var": att_params.stats["attention.bn"].var,
             "w2": att_params["attention.fc2.weight"].data, "b2": att_params["attention.fc2.bias"].data}
        np.testing.assert_allclose(attention_forward(fmap, att_params).vector.data,
                                   attention_oracle(fmap, p), atol=1e-12)

    @pytest.mark.parametrize("mode", [INFER, TRAIN])
    def test_weights_convex_and_permutation_invariant(self, att_params, rng, mode):
        fmap = rng.normal(size=(4, 3, 3, 3)) * 3
        out = attention_forward(fmap, att_params.copy(), mode)
        w = out.weights.data
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        v = out.vector.data
        assert np.all(v <= fmap.max(axis=(1, 2)) + 1e-12) and np.all(v >= fmap.min(axis=(1, 2)) - 1e-12)
        perm = rng.permutation(9)
        shuffled = fmap.reshape(4, 9, 3)[:, perm].reshape(4, 3, 3, 3)
        np.testing.assert_allclose(attention_forward(shuffled, att_params.copy(), mode).vector.data,
                                   v, atol=1e-6)

    def test_channel_mismatch(self, att_params):
        with pytest.raises(DimensionError):
            attention_forward(np.zeros((1, 2, 2, 5)), att_params)


class TestHeadAndForward:
    def test_zero_head_is_half(self, tiny_config, rng):
        params = init_params(tiny_config)
        params["head.weight"].data[:] = 0
        assert np.all(predict(rng.normal(size=(3, 8)), params).data == 0.5)

    def test_output_range_and_shape(self, tiny_config, rng):
        params = init_params(tiny_config)
        out = forward(rng.uniform(size=(5, 16, 16, 3)), params, tiny_config).data
        assert out.shape == (5, 12) and np.all((out > 0) & (out < 1))

    def test_composition_bitwise(self, tiny_config, rng):
        params = init_params(tiny_config)
        x = rng.uniform(size=(3, 16, 16, 3))
        manual = predict(attention_forward(extract_features(x, params, tiny_config), params).vector, params)
        assert np.array_equal(forward(x, params, tiny_config).data, manual.data)

    def test_sample_independence(self, tiny_config, rng):
        params = init_params(tiny_config, seed=1)
        x = rng.uniform(size=(6, 16, 16, 3))
        base = forward(x, params, tiny_config).data
        perm = rng.permutation(6)
        np.testing.assert_allclose(forward(x[perm], params, tiny_config).data, base[perm], atol=1e-12)
        twin = forward(np.stack([x[0], x[0]]), params, tiny_config).data
        assert np.array_equal(twin[0], twin[1])

    def test_predict_proba_chunks(self, tiny_config, rng):
        params = init_params(tiny_config)
        x = rng.uniform(size=(7, 16, 16, 3))
        np.testing.assert_allclose(predict_proba(x, params, tiny_config, batch_size=3),
                                   forward(x, params, tiny_config).data, atol=1e-12)
        assert predict_proba(x[:0], params, tiny_config).shape == (0, 12)

    def test_train_mode_updates_stats_only_in_train(self, tiny_config, rng):
        params = init_params(tiny_config)
        x = rng.uniform(size=(2, 16, 16, 3))
        forward(x, params, tiny_config, INFER)
        assert np.all(params.stats["block1.bn"].mean == 0)
        forward(x, params, tiny_config, TRAIN)
        assert np.any(params.stats["block1.bn"].mean != 0)

    def test_gradient_reaches_first_kernel(self, tiny_config, rng):
        params = init_params(tiny_config, seed=2)
        y = rng.integers(0, 2, size=(4, 12))
        with Tape() as tape:
            loss = weighted_bce(y, forward(rng.uniform(size=(4, 16, 16, 3)), params, tiny_config, TRAIN),
                                np.ones(12))
        tape.backward(loss)
        assert np.abs(params["block1.conv.kernel"].grad).max() > 0

    def test_float32_stays_float32(self, tiny_config, rng):
        params = init_params(tiny_config, dtype=np.float32)
        out = forward(rng.uniform(size=(2, 16, 16, 3)), params, tiny_config)
        assert out.dtype == np.float32
