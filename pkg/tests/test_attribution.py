import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rlens import ConfigError, DataError
from rlens.attribution import (DEGENERATE, FALLBACK, Heatmap, explain, expected_gradients,
                               gatr, gatr_from_maps, gradient_row_weights, gradient_shap, grad_cam,
                               grad_cam_from_maps, head_average_positive, interpolate_to_waveform,
                               load_heatmap, peak_normalize_heatmap, relevancy_update, save_heatmap,
                               weighted_row_average)
from rlens.model import ModelConfig, ModelParams, forward, backward_from_class, init_params
from rlens.signal import GeneratorSpec, synth_partial, synth_utterance

TINY = ModelConfig(conv=((6, 6, 4), (6, 4, 2)), d_model=8, n_layers=2, n_heads=2, d_ff=16)
ONE = ModelConfig(conv=((6, 6, 4), (6, 4, 2)), d_model=8, n_layers=1, n_heads=2, d_ff=16)


def jittered(cfg, seed, scale=0.3):
    p = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    return ModelParams(cfg, {k: v + scale * rng.standard_normal(v.shape) for k, v in p.tensors.items()})


class TestRelevancyUpdate:
    def test_worked_example(self):
        Abar = np.array([[[0.1, 0.2], [0.3, 0.4]]])
        out = relevancy_update(np.eye(2), Abar, np.ones_like(Abar))
        np.testing.assert_allclose(out, [[1.1, 0.2], [0.3, 1.4]], atol=1e-12)

    def test_zero_gradient_is_identity(self):
        R = np.array([[1.0, 0.5], [0.2, 1.0]])
        A = np.full((3, 2, 2), 0.5)
        np.testing.assert_array_equal(relevancy_update(R, A, np.zeros_like(A)), R)

    def test_negative_products_clamped(self):
        R = np.eye(3) + 0.1
        A = np.full((2, 3, 3), 1 / 3)
        np.testing.assert_array_equal(relevancy_update(R, A, -np.ones_like(A)), R)

    def test_head_mean(self):
        A = np.stack([np.full((2, 2), 0.5), np.full((2, 2), 0.5)])
        dA = np.stack([np.full((2, 2), 2.0), np.full((2, 2), -2.0)])
        np.testing.assert_allclose(head_average_positive(A, dA), np.full((2, 2), 0.5))

    def test_shape_errors(self):
        with pytest.raises(DataError):
            relevancy_update(np.eye(3), np.ones((1, 2, 2)), np.ones((1, 2, 2)))
        with pytest.raises(DataError):
            head_average_positive(np.ones((1, 2, 2)), np.ones((2, 2, 2)))


class TestRowWeights:
    def test_l2_norm(self):
        assert gradient_row_weights(np.array([[[3.0, 4.0], [0.0, 0.0]]])).tolist() == [5.0, 0.0]

    def test_zero(self):
        assert gradient_row_weights(np.zeros((2, 3, 3))).tolist() == [0.0, 0.0, 0.0]

    def test_opposite_heads_cancel(self):
        g = np.random.default_rng(0).standard_normal((3, 3))
        assert gradient_row_weights(np.stack([g, -g])).tolist() == [0.0, 0.0, 0.0]


class TestWeightedAverage:
    def test_worked_example(self):
        r, fb = weighted_row_average(np.eye(2), np.array([1.0, 3.0]))
        np.testing.assert_allclose(r, [0.25, 0.75], atol=1e-12)
        assert not fb

    def test_uniform_is_row_mean(self):
        R = np.random.default_rng(1).random((4, 4))
        r, _ = weighted_row_average(R, np.full(4, 2.5))
        np.testing.assert_allclose(r, R.mean(axis=0), atol=1e-12)

    def test_one_hot_picks_row(self):
        R = np.random.default_rng(2).random((4, 4))
        r, _ = weighted_row_average(R, np.eye(4)[2])
        np.testing.assert_array_equal(r, R[2])

    def test_zero_weights_fallback(self):
        R = np.random.default_rng(3).random((3, 3))
        r, fb = weighted_row_average(R, np.zeros(3))
        assert fb
        np.testing.assert_allclose(r, R.mean(axis=0))

    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_positive_scaling(self, lam, seed):
        rng = np.random.default_rng(seed)
        R, W = rng.random((5, 5)), rng.random(5)
        np.testing.assert_allclose(weighted_row_average(R, lam * W)[0],
                                   weighted_row_average(R, W)[0], rtol=1e-12)

    def test_bad_weights(self):
        with pytest.raises(DataError):
            weighted_row_average(np.eye(2), np.array([1.0, -1.0]))
        with pytest.raises(DataError):
            weighted_row_average(np.eye(2), np.ones(3))


class TestInterpolate:
    def test_identity(self):
        r = np.random.default_rng(0).random(16)
        np.testing.assert_array_equal(interpolate_to_waveform(r, 16, 1), r)

    def test_constant(self):
        np.testing.assert_array_equal(interpolate_to_waveform(np.full(5, 0.3), 40), np.full(40, 0.3))

    def test_monotone(self):
        out = interpolate_to_waveform(np.array([0.0, 1.0]), 4, 2)
        assert np.all(np.diff(out) >= 0)
        assert out[0] == 0.0 and out[-1] == 1.0

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 10)),
           st.integers(1, 8))
    def test_range_preserved(self, r, stride):
        out = interpolate_to_waveform(r, r.size * stride, stride)
        assert out.size == r.size * stride
        assert out.min() >= r.min() and out.max() <= r.max()


class TestGatr:
    def test_one_layer_reduction(self):
        p = jittered(ONE, 0)
        x = np.random.default_rng(0).uniform(-1, 1, 256)
        trace, _ = forward(p, x)
        g = backward_from_class(p, trace, 1)
        h = gatr(p, x, 1)
        Abar = head_average_positive(trace.attentions[0], g.attention_grads[0])
        r, _ = weighted_row_average(Abar, gradient_row_weights(g.attention_grads[0]))
        np.testing.assert_allclose(h.scores, interpolate_to_waveform(r, 256, ONE.stride), atol=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_invariants(self, seed):
        p = jittered(TINY, seed)
        x = np.random.default_rng(seed).uniform(-1, 1, 256)
        h, state = gatr(p, x, seed % 2, return_state=True)
        assert len(h) == 256 and np.all(h.scores >= 0)
        for a, b in zip(state.history, state.history[1:]):
            assert np.all(b >= a)
        assert np.all(state.history[-1] - np.eye(state.history[-1].shape[0]) >= 0)

    def test_zero_gradient_fallback(self):
        A = [np.full((2, 4, 4), 0.25)] * 2
        dA = [np.ones((2, 4, 4)), np.zeros((2, 4, 4))]
        scores, state = gatr_from_maps(A, dA, 16)
        assert state.fallback
        np.testing.assert_allclose(scores, np.full(16, 0.25))

    def test_fallback_flag_from_model(self):
        # zeroed head makes the logits independent of the attention maps
        p = jittered(TINY, 1)
        p.tensors["head.w"][:] = 0
        h = gatr(p, np.random.default_rng(0).uniform(-1, 1, 256), 1)
        assert FALLBACK in h.flags and DEGENERATE in h.flags

    def test_reverse_order(self):
        rng = np.random.default_rng(5)
        A = [rng.dirichlet(np.ones(3), size=(1, 3)) for _ in range(2)]
        dA = [rng.standard_normal((1, 3, 3)) for _ in range(2)]
        _, fwd = gatr_from_maps(A, dA, 3, 1)
        _, rev = gatr_from_maps(A, dA, 3, 1, layer_order="reverse")
        a0, a1 = (head_average_positive(a, d) for a, d in zip(A, dA))
        I = np.eye(3)
        np.testing.assert_allclose(fwd.history[-1], (I + a1) @ (I + a0), atol=1e-12)
        np.testing.assert_allclose(rev.history[-1], (I + a0) @ (I + a1), atol=1e-12)
        with pytest.raises(ConfigError):
            gatr_from_maps(A, dA, 3, 1, layer_order="sideways")


class TestGradCam:
    def test_zero_gradient_degenerate(self):
        out = grad_cam_from_maps(np.ones((3, 5)), np.zeros((3, 5)), 20)
        assert not np.any(out)
        assert Heatmap(out, "gradcam", 1).degenerate

    def test_single_channel(self):
        F = np.array([[0.5, -1.0, 2.0, 0.0]])
        out = grad_cam_from_maps(F, np.ones_like(F), 8, 2)
        np.testing.assert_allclose(out, interpolate_to_waveform(np.maximum(F[0], 0), 8, 2))

    @pytest.mark.parametrize("seed", range(3))
    def test_model_output(self, seed):
        h = grad_cam(jittered(TINY, seed), np.random.default_rng(seed).uniform(-1, 1, 256), 0)
        assert len(h) == 256 and np.all(h.scores >= 0)


class TestGradientShap:
    def test_zero_input(self):
        h = gradient_shap(jittered(TINY, 0), np.zeros(256), 1, m=4)
        assert h.degenerate and not np.any(h.scores)

    @given(st.integers(0, 2 ** 31), st.integers(1, 30))
    @settings(max_examples=30)
    def test_linear_exact(self, seed, m):
        rng = np.random.default_rng(seed)
        c, w = rng.standard_normal(50), rng.standard_normal(50)
        out = expected_gradients(lambda X: np.broadcast_to(c, X.shape), w, m, rng)
        np.testing.assert_allclose(out, np.maximum(c * w, 0), atol=1e-9)

    def test_deterministic(self):
        p = jittered(TINY, 2)
        x = np.random.default_rng(2).uniform(-1, 1, 256)
        a = gradient_shap(p, x, 1, m=5, seed=11)
        b = gradient_shap(p, x, 1, m=5, seed=11)
        assert a.scores.tobytes() == b.scores.tobytes()
        assert np.all(a.scores >= 0)

    def test_needs_samples(self):
        with pytest.raises(ConfigError):
            expected_gradients(lambda X: X, np.ones(3), 0, np.random.default_rng(0))


class TestHeatmap:
    def test_peak_normalize(self):
        assert peak_normalize_heatmap([2.0, 1.0, 0.0]).scores.tolist() == [1.0, 0.5, 0.0]
        z = peak_normalize_heatmap([0.0, 0.0])
        assert z.scores.tolist() == [0.0, 0.0] and z.degenerate

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1e6)))
    def test_peak_normalize_idempotent(self, s):
        once = peak_normalize_heatmap(s)
        np.testing.assert_array_equal(peak_normalize_heatmap(once).scores, once.scores)

    def test_rejects_negative(self):
        with pytest.raises(DataError):
            Heatmap(np.array([0.1, -0.1]), "x", 0)

    def test_io_round_trip(self, tmp_path):
        h = Heatmap(np.array([0.0, 0.25, 1.0]), "gatr", 1, frozenset({FALLBACK}))
        save_heatmap(h, tmp_path / "u1", "u1")
        uid, back = load_heatmap(tmp_path / "u1.f32")
        assert uid == "u1"
        assert back.scores.tolist() == h.scores.tolist()
        assert back.method == "gatr" and back.target_class == 1 and back.flags == h.flags

    def test_missing_sidecar(self, tmp_path):
        save_heatmap(Heatmap(np.ones(2), "gatr", 0), tmp_path / "a", "a")
        (tmp_path / "a.json").unlink()
        with pytest.raises(DataError):
            load_heatmap(tmp_path / "a.f32")


@pytest.mark.parametrize("method", ["gatr", "gradcam", "gradshap"])
@pytest.mark.parametrize("T", [256, 320])
def test_explain_length(method, T):
    spec = GeneratorSpec(n_samples=T)
    p = jittered(TINY, 0)
    for u in (synth_utterance(spec, "spoof", 1, id="s"), synth_partial(spec, 2, id="p")):
        h = explain(p, u, method, seed=0, shap_samples=3)
        assert len(h) == T and h.method == method and h.target_class == 1


def test_explain_unknown_method():
    u = synth_utterance(GeneratorSpec(n_samples=256), "bonafide", 0)
    with pytest.raises(ConfigError):
        explain(jittered(TINY, 0), u, "lime")
