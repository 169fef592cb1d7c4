import numpy as np
import pytest

from rlens import ConfigError, DataError
from rlens.model import (MICRO_CONFIG, ModelConfig, ModelParams, TrainHyper, _backward,
                         backward_from_class, finite_diff_check, forward, init_params,
                         load_checkpoint, predict_proba, save_checkpoint, train)
from rlens.signal import GeneratorSpec, synth_split

TINY = ModelConfig(conv=((8, 6, 4), (8, 4, 2)), d_model=8, n_layers=2, n_heads=2, d_ff=16)


def random_params(cfg, seed):
    p = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    return ModelParams(cfg, {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.tensors.items()})


def test_default_config_token_count():
    cfg = ModelConfig()
    assert cfg.stride == 40
    assert cfg.n_tokens(4000) == 100
    p = init_params(cfg, 0)
    trace, _ = forward(p, np.zeros(4000))
    assert trace.features.shape == (32, 100)
    assert [a.shape for a in trace.attentions] == [(2, 100, 100)] * 2


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig().n_tokens(4001)


class TestForward:
    @pytest.mark.parametrize("seed", range(5))
    def test_attention_rows_stochastic(self, seed):
        p = random_params(TINY, seed)
        x = np.random.default_rng(seed).uniform(-1, 1, 256)
        trace, score = forward(p, x)
        for A in trace.attentions:
            assert np.all(A >= 0)
            np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-6)
        assert 0.0 <= score <= 1.0
        assert trace.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_pure(self):
        p = random_params(TINY, 1)
        x = np.random.default_rng(0).uniform(-1, 1, 256)
        a, sa = forward(p, x)
        b, sb = forward(p, x)
        assert sa == sb
        np.testing.assert_array_equal(a.logits, b.logits)
        for u, v in zip(a.attentions, b.attentions):
            np.testing.assert_array_equal(u, v)

    def test_batch_matches_single(self):
        p = random_params(TINY, 2)
        X = np.random.default_rng(1).uniform(-1, 1, (5, 256))
        probs = predict_proba(p, X)
        for i in range(5):
            np.testing.assert_allclose(probs[i], forward(p, X[i])[0].probs, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_head_permutation(self, seed):
        cfg = ModelConfig(conv=((8, 6, 4), (8, 4, 2)), d_model=12, n_layers=2, n_heads=3, d_ff=16)
        p = random_params(cfg, seed)
        x = np.random.default_rng(seed).uniform(-1, 1, 256)
        perm = np.random.default_rng(seed).permutation(cfg.n_heads)
        cols = np.concatenate([np.arange(h * cfg.head_dim, (h + 1) * cfg.head_dim) for h in perm])
        t = dict(p.tensors)
        for l in range(cfg.n_layers):
            for n in "qkv":
                t[f"layer{l}.w{n}"] = t[f"layer{l}.w{n}"][:, cols]
                t[f"layer{l}.b{n}"] = t[f"layer{l}.b{n}"][cols]
            t[f"layer{l}.wo"] = t[f"layer{l}.wo"][cols, :]
        a, _ = forward(p, x)
        b, _ = forward(ModelParams(cfg, t), x)
        np.testing.assert_allclose(a.logits, b.logits, atol=1e-6)
        for A, B in zip(a.attentions, b.attentions):
            np.testing.assert_allclose(A[perm], B, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            forward(init_params(TINY, 0), np.zeros(100))


class TestBackward:
    def test_finite_difference_double(self):
        assert finite_diff_check(MICRO_CONFIG, seed=0, eps=1e-4) < 1e-4

    @pytest.mark.parametrize("seed", [1, 2])
    def test_finite_difference_two_layers(self, seed):
        cfg = ModelConfig(conv=((3, 4, 4), (3, 3, 2)), d_model=4, n_layers=2, n_heads=2, d_ff=6)
        assert finite_diff_check(cfg, seed=seed, eps=1e-4) < 1e-4

    def test_finite_difference_prob_score(self):
        assert finite_diff_check(MICRO_CONFIG, seed=3, score="prob") < 1e-4

    def test_finite_difference_single_precision(self):
        assert finite_diff_check(MICRO_CONFIG, seed=0, eps=1e-2, dtype=np.float32) < 1e-2

    def test_zero_input_bias_free_frontend(self):
        p = init_params(TINY, 0)
        for i in range(len(TINY.conv)):
            p.tensors[f"conv{i}.b"][:] = 0
        trace, _ = forward(p, np.zeros(256))
        g = backward_from_class(p, trace, 1)
        assert np.all(np.isfinite(g.input_grad))
        assert all(np.all(np.isfinite(a)) for a in g.attention_grads)

    def test_linearity_over_classes(self):
        p = random_params(TINY, 4)
        x = np.random.default_rng(4).uniform(-1, 1, 256)
        trace, _ = forward(p, x)
        g0 = backward_from_class(p, trace, 0)
        g1 = backward_from_class(p, trace, 1)
        gsum = _backward(p, trace._cache, np.ones((1, 2)))
        for k in p.names():
            np.testing.assert_allclose(g0.param_grads[k] + g1.param_grads[k], gsum[k], atol=1e-12)
        np.testing.assert_allclose(g0.input_grad + g1.input_grad, gsum["input"][0], atol=1e-12)

    def test_shapes(self):
        p = random_params(TINY, 0)
        trace, _ = forward(p, np.random.default_rng(0).uniform(-1, 1, 256))
        g = backward_from_class(p, trace, 0)
        assert g.feature_grad.shape == trace.features.shape
        assert g.input_grad.shape == (256,)
        assert [a.shape for a in g.attention_grads] == [a.shape for a in trace.attentions]

    def test_bad_class(self):
        p = init_params(TINY, 0)
        trace, _ = forward(p, np.zeros(256))
        with pytest.raises(ConfigError):
            backward_from_class(p, trace, 2)
        with pytest.raises(ConfigError):
            backward_from_class(p, trace, 1, score="energy")

    def test_prob_score_is_scaled_logit_chain(self):
        # d p_c / d x = p_c * (d z_c/dx - sum_k p_k d z_k/dx)
        p = random_params(TINY, 5)
        trace, _ = forward(p, np.random.default_rng(5).uniform(-1, 1, 256))
        gl = [backward_from_class(p, trace, c).input_grad for c in (0, 1)]
        gp = backward_from_class(p, trace, 1, score="prob").input_grad
        pr = trace.probs
        expected = pr[1] * (gl[1] - pr[0] * gl[0] - pr[1] * gl[1])
        np.testing.assert_allclose(gp, expected, atol=1e-12)


@pytest.fixture(scope="module")
def small_data():
    return synth_split(GeneratorSpec(n_samples=800), 1, 24, 24)


class TestTrain:
    def test_initial_loss_chance(self, small_data):
        _, log = train(small_data, TINY, TrainHyper(epochs=1, val_fraction=0), seed=0)
        assert abs(log.first_batch_loss - np.log(2)) < 0.1

    def test_deterministic(self, small_data):
        hyper = TrainHyper(epochs=2)
        a, la = train(small_data, TINY, hyper, seed=3)
        b, lb = train(small_data, TINY, hyper, seed=3)
        for k in a.names():
            assert a[k].tobytes() == b[k].tobytes()
        assert la.losses == lb.losses
        assert la.heldout_ids == lb.heldout_ids

    def test_order_independent(self, small_data):
        hyper = TrainHyper(epochs=1)
        a, _ = train(small_data, TINY, hyper, seed=3)
        b, _ = train(list(reversed(small_data)), TINY, hyper, seed=3)
        for k in a.names():
            assert a[k].tobytes() == b[k].tobytes()

    def test_loss_decreases(self, small_data):
        _, log = train(small_data, TINY, TrainHyper(epochs=6), seed=0)
        assert log.losses[-1] < log.losses[0]

    def test_single_class_rejected(self, small_data):
        with pytest.raises(DataError):
            train([u for u in small_data if u.label == "spoof"], TINY, seed=0)

    def test_heldout_split_stratified(self, small_data):
        _, log = train(small_data, TINY, TrainHyper(epochs=1, val_fraction=0.25), seed=0)
        assert sorted(log.heldout_labels) == [0] * 6 + [1] * 6
        assert np.isfinite(log.heldout_eer)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(TINY, 0).astype(np.float32).astype(np.float64)
    save_checkpoint(p, tmp_path / "a.ckpt")
    q = load_checkpoint(tmp_path / "a.ckpt")
    assert q.config == p.config
    for k in p.names():
        assert q[k].tobytes() == p[k].tobytes()
    save_checkpoint(q, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corrupt(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "b.ckpt").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "c.ckpt")
