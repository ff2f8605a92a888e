"""Gradient engine tests: finite-difference agreement, Adam algebra, determinism."""

import numpy as np
import pytest

import datamarket.autodiff as ad
from datamarket.autodiff import AdamState, ParamVector, Tensor, adam_step


def finite_difference(loss_fn, params: ParamVector, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(params.data)
    for i in range(params.data.size):
        saved = params.data[i]
        params.data[i] = saved + step
        up, _ = loss_value(loss_fn, params)
        params.data[i] = saved - step
        down, _ = loss_value(loss_fn, params)
        params.data[i] = saved
        grad[i] = (up - down) / (2 * step)
    return grad


def loss_value(loss_fn, params):
    leaves = params.leaves()
    out = loss_fn(leaves)
    return float(out.data), leaves


def assert_matches_fd(loss_fn, params, rel_tol=1e-4, step=1e-6):
    _, analytic = ad.value_and_grad(loss_fn, params)
    numeric = finite_difference(loss_fn, params, step)
    scale = np.maximum(np.abs(numeric), 1e-6)
    rel = np.abs(analytic - numeric) / scale
    assert rel.max() < rel_tol, f"max relative error {rel.max():.2e}"


class TestGradBasics:
    def test_sum_of_squares(self):
        params = ParamVector.from_segments({"x": np.array([1.0, 2.0])})
        val, g = ad.value_and_grad(lambda lv: (lv["x"] * lv["x"]).sum(), params)
        assert val == 5.0
        np.testing.assert_allclose(g, [2.0, 4.0])

    def test_non_tensor_output_rejected(self):
        params = ParamVector.from_segments({"x": np.array([1.0])})
        with pytest.raises(ad.GraphError):
            ad.value_and_grad(lambda lv: 3.0, params)

    def test_unsupported_object_rejected(self):
        with pytest.raises(ad.GraphError):
            ad.as_tensor("not numeric")

    def test_max_gradient_flows_to_lowest_tied_index(self):
        params = ParamVector.from_segments({"x": np.array([2.0, 2.0, 1.0])})

        def loss(lv):
            return ad.tmax(lv["x"], axis=0)

        _, g = ad.value_and_grad(loss, params)
        np.testing.assert_allclose(g, [1.0, 0.0, 0.0])

    def test_fd_agreement_elementwise_ops(self):
        rng = np.random.default_rng(7)
        params = ParamVector.from_segments({"a": rng.uniform(0.3, 1.5, (3, 4)), "b": rng.uniform(0.3, 1.5, (3, 4))})

        def loss(lv):
            a, b = lv["a"], lv["b"]
            mix = a * b + a / b - 0.3 * b + ad.exp(a * 0.2) + ad.log(b + 1.0)
            return (mix * mix).mean()

        assert_matches_fd(loss, params)

    def test_fd_agreement_mlp_graph(self):
        params = ad.init_mlp_params([3, 8, 8, 2], seed=5)
        x = np.random.default_rng(0).normal(size=(16, 3))

        def loss(lv):
            out = ad.mlp_apply(lv, [3, 8, 8, 2], Tensor(x))
            return (ad.sigmoid(out) * ad.softmax(out, axis=1)).sum()

        assert_matches_fd(loss, params)

    def test_fd_agreement_max_softmax_concat_gather(self):
        rng = np.random.default_rng(3)
        params = ParamVector.from_segments({"w": rng.normal(size=(5, 4))})
        idx = np.array([0, 2, 2, 4, 1])

        def loss(lv):
            w = lv["w"]
            picked = ad.take_rows(w, idx)
            wide = ad.concat([picked, ad.softmax(w, axis=1)], axis=1)
            return ad.tsum(ad.tmax(wide, axis=1)) + ad.tmean(w, axis=None)

        assert_matches_fd(loss, params)

    def test_backward_requires_scalar(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ad.GraphError):
            ad.backward(t)


class TestDeterminism:
    def test_bit_identical_loss_and_gradient(self):
        params = ad.init_mlp_params([4, 16, 3], seed=11)
        x = np.random.default_rng(2).normal(size=(32, 4))

        def loss(lv):
            return (ad.mlp_apply(lv, [4, 16, 3], Tensor(x)) ** 2).mean()

        v1, g1 = ad.value_and_grad(loss, params)
        v2, g2 = ad.value_and_grad(loss, params)
        assert v1 == v2
        assert np.array_equal(g1, g2)

    def test_init_deterministic(self):
        a = ad.init_mlp_params([3, 5, 2], seed=9)
        b = ad.init_mlp_params([3, 5, 2], seed=9)
        assert np.array_equal(a.data, b.data)


class TestMlpForward:
    def test_zero_weights_give_zero_output(self):
        params = ad.init_mlp_params([2, 4, 2], seed=0)
        params.data[:] = 0.0
        out = ad.mlp_forward(params, [2, 4, 2], np.array([0.3, -0.7]))
        np.testing.assert_allclose(out, 0.0)

    def test_identity_affine(self):
        params = ParamVector.from_segments({"W0": np.eye(2), "b0": np.zeros(2)})
        out = ad.mlp_forward(params, [2, 2], np.array([0.2, 0.8]))
        np.testing.assert_allclose(out, [0.2, 0.8])

    def test_leaky_relu_negative_slope(self):
        x = Tensor(np.array([-1.0]))
        out = ad.leaky_relu(x)
        np.testing.assert_allclose(out.data, [-0.01])

    def test_shape_mismatch_raises(self):
        params = ad.init_mlp_params([3, 4, 1], seed=1)
        with pytest.raises(ValueError):
            ad.mlp_forward(params, [3, 4, 1], np.zeros((5, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = ParamVector.from_segments({"x": np.array([1.0, -2.0])})
        state = AdamState.for_params(params, lr=0.01)
        before = params.data.copy()
        adam_step(state, params, np.zeros(2))
        np.testing.assert_array_equal(params.data, before)

    def test_first_step_is_lr_times_sign(self):
        params = ParamVector.from_segments({"x": np.array([0.5, 0.5])})
        state = AdamState.for_params(params, lr=1e-3)
        g = np.array([0.37, -1.4])
        adam_step(state, params, g)
        np.testing.assert_allclose(params.data, 0.5 - 1e-3 * np.sign(g), atol=1e-6)

    def test_constant_gradient_step_approaches_lr(self):
        params = ParamVector.from_segments({"x": np.array([0.0])})
        state = AdamState.for_params(params, lr=1e-3)
        g = np.array([0.8])
        prev = params.data.copy()
        for _ in range(500):
            prev = params.data.copy()
            adam_step(state, params, g)
        assert abs(abs(params.data[0] - prev[0]) - 1e-3) < 1e-5

    def test_shape_mismatch(self):
        params = ParamVector.from_segments({"x": np.zeros(3)})
        state = AdamState.for_params(params)
        with pytest.raises(ValueError):
            adam_step(state, params, np.zeros(4))


class TestParamVector:
    def test_save_load_roundtrip(self, tmp_path):
        params = ad.init_mlp_params([3, 7, 2], seed=4)
        path = tmp_path / "weights.bin"
        params.save(path)
        loaded = ParamVector.load(path)
        assert np.array_equal(loaded.data, params.data)
        assert loaded.layout == params.layout

    def test_on_disk_little_endian_float64(self, tmp_path):
        params = ParamVector.from_segments({"x": np.array([1.0, -3.5])})
        path = tmp_path / "p.bin"
        params.save(path)
        raw = np.fromfile(path, dtype="<f8")
        np.testing.assert_array_equal(raw, [1.0, -3.5])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ParamVector(np.array([np.nan]), [("x", (1,))])

    def test_rejects_size_mismatch(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), [("x", (2,))])
