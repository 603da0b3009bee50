import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffcap import numerics as nx


def _fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def _tape_grad(fn_tensor, x):
    t = nx.parameter(x.copy())
    with nx.GradTape() as tape:
        out = fn_tensor(t)
    return tape.backward(out, [t])[0]


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4)
finite = st.floats(-2.0, 2.0, allow_nan=False, width=64)


class TestForward:
    def test_softmax_uniform(self):
        with nx.precision(np.float64):
            out = nx.softmax(nx.Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out, [1 / 3] * 3)

    def test_layer_norm_constant_vector_is_zero(self):
        out = nx.layer_norm(nx.Tensor(np.full(6, 4.2))).data
        assert np.all(out == 0)

    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        with nx.precision(np.float64):
            out = nx.matmul(nx.Tensor(np.eye(3)), nx.Tensor(a)).data
        np.testing.assert_array_equal(out, a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nx.matmul(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((4, 5))))

    @given(hnp.arrays(np.float64, shapes, elements=st.floats(-30, 30)))
    def test_softmax_rows_sum_to_one(self, x):
        with nx.precision(np.float64):
            y = nx.softmax(nx.Tensor(x)).data
            ls = nx.log_softmax(nx.Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(ls, np.log(y), atol=1e-6)

    def test_masked_softmax_zeroes_blocked_entries(self):
        allowed = np.array([[True, False, True], [False, False, False]])
        y = nx.softmax(nx.Tensor(np.ones((2, 3))), allowed).data
        np.testing.assert_allclose(y[0], [0.5, 0, 0.5])
        assert np.all(y[1] == 0)


class TestBackward:
    def test_cross_entropy_gradient_is_probs_minus_onehot(self):
        logits = np.array([[0.3, -1.0, 2.0, 0.5]])
        with nx.precision(np.float64):
            g = _tape_grad(lambda t: nx.cross_entropy(t, np.array([2])), logits)
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(g, p - np.eye(4)[2], atol=1e-12)

    def test_unused_tensor_gets_zero_gradient(self):
        a, b = nx.parameter(np.ones(3)), nx.parameter(np.ones(2))
        with nx.GradTape() as tape:
            loss = nx.sum_(a * 2.0)
        grads = tape.backward(loss, {"a": a, "b": b})
        np.testing.assert_array_equal(grads["b"], np.zeros(2))
        np.testing.assert_array_equal(grads["a"], np.full(3, 2.0))

    def test_non_scalar_loss_rejected(self):
        a = nx.parameter(np.ones(3))
        with nx.GradTape() as tape:
            out = a * 2.0
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out, [a])

    def test_gradient_of_loss_wrt_itself_is_one(self):
        a = nx.parameter(np.array(1.5))
        with nx.GradTape() as tape:
            out = a * 1.0
        assert tape.backward(out, [out])[0] == 1.0

    def test_stop_gradient_cuts_flow(self):
        a = nx.parameter(np.ones(3))
        with nx.GradTape() as tape:
            loss = nx.sum_(nx.stop_gradient(a * 3.0))
        assert np.all(tape.backward(loss, [a])[0] == 0)

    @pytest.mark.parametrize(
        "op",
        ["gelu", "silu", "layer_norm", "softmax", "log_softmax", "mean", "mul_self", "div", "transpose", "slice"],
    )
    @given(x=hnp.arrays(np.float64, shapes, elements=finite))
    def test_primitives_match_central_differences(self, op, x):
        w = np.linspace(-1, 1, x.size).reshape(x.shape)  # fixed projection to a scalar
        fns = {
            "gelu": nx.gelu,
            "silu": nx.silu,
            "layer_norm": nx.layer_norm,
            "softmax": nx.softmax,
            "log_softmax": nx.log_softmax,
            "mean": lambda t: nx.mean(t, axis=-1, keepdims=True) * t,
            "mul_self": lambda t: t * t,
            "div": lambda t: (t * t) / 3.0,
            "transpose": lambda t: nx.transpose(t, tuple(reversed(range(t.ndim)))) * 1.0,
            "slice": lambda t: t[..., :1] * 2.0,
        }
        f = fns[op]

        def scalar_tensor(t):
            y = f(t)
            return nx.sum_(y * nx.Tensor(np.resize(w, y.shape)))

        with nx.precision(np.float64):
            tape_g = _tape_grad(scalar_tensor, x)
            fd_g = _fd_grad(lambda arr: float(scalar_tensor(nx.Tensor(arr)).data), x.copy())
        scale = max(np.max(np.abs(fd_g)), 1e-3)
        assert np.max(np.abs(tape_g - fd_g)) / scale <= 1e-5

    @given(
        a=hnp.arrays(np.float64, (2, 3, 4), elements=finite),
        b=hnp.arrays(np.float64, (4, 2), elements=finite),
    )
    def test_matmul_and_broadcast_add_gradients(self, a, b):
        bias = np.arange(2.0)

        def loss(ta, tb):
            return nx.sum_(nx.gelu(nx.matmul(ta, tb) + nx.Tensor(bias)))

        with nx.precision(np.float64):
            ta, tb = nx.parameter(a.copy()), nx.parameter(b.copy())
            with nx.GradTape() as tape:
                out = loss(ta, tb)
            ga, gb = tape.backward(out, [ta, tb]).values()
            fa = _fd_grad(lambda arr: float(loss(nx.Tensor(arr), nx.Tensor(b)).data), a.copy())
            fb = _fd_grad(lambda arr: float(loss(nx.Tensor(a), nx.Tensor(arr)).data), b.copy())
        np.testing.assert_allclose(ga, fa, atol=1e-6, rtol=1e-5)
        np.testing.assert_allclose(gb, fb, atol=1e-6, rtol=1e-5)

    def test_embedding_and_concat_gradients(self):
        rng = np.random.default_rng(1)
        table = rng.normal(size=(5, 3))
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        other = rng.normal(size=(2, 3, 3))

        def loss(tab):
            e = nx.embedding(tab, ids)
            return nx.sum_(nx.gelu(nx.concat([e, nx.Tensor(other)], axis=-1)))

        with nx.precision(np.float64):
            g = _tape_grad(loss, table)
            fd = _fd_grad(lambda arr: float(loss(nx.Tensor(arr)).data), table.copy())
        np.testing.assert_allclose(g, fd, atol=1e-7)

    def test_three_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        with nx.precision(np.float64):
            params = {f"w{i}": nx.parameter(rng.normal(size=(4, 4)) * 0.5, f"w{i}") for i in range(3)}
            x = nx.Tensor(rng.normal(size=(5, 4)))
            targets = rng.integers(0, 4, size=5)

            def loss_fn(p):
                h = x
                for i in range(3):
                    h = nx.gelu(nx.matmul(h, p[f"w{i}"]))
                return nx.cross_entropy(h, targets)

            report = nx.finite_difference_check(loss_fn, params, max_entries=None)
        assert report.passed(1e-5)
        assert report.checked_entries == 48

    def test_empty_parameter_group_passes_vacuously(self):
        with nx.precision(np.float64):
            params = {"w": nx.parameter(np.ones(2)), "empty": nx.parameter(np.zeros((0, 3)))}
            report = nx.finite_difference_check(lambda p: nx.sum_(p["w"] * p["w"]), params)
        assert report.per_group["empty"] == 0.0
        assert report.passed(1e-5)


class TestAdamW:
    def test_zero_gradient_is_pure_decay(self):
        w = np.array([1.0, -2.0, 0.5])
        with nx.precision(np.float64):
            params = {"w": nx.parameter(w.copy())}
        state = nx.AdamWState(lr=0.1, weight_decay=0.01)
        nx.adamw_step(params, {"w": np.zeros(3)}, state)
        np.testing.assert_allclose(params["w"].data, w * (1 - 0.001), rtol=1e-12)

    def test_first_step_is_normalised_gradient(self):
        g = np.array([0.3, -4.0, 1e-3])
        with nx.precision(np.float64):
            params = {"w": nx.parameter(np.zeros(3))}
        state = nx.AdamWState(lr=0.01, weight_decay=0.0)
        nx.adamw_step(params, {"w": g}, state)
        # m_hat = g and v_hat = g**2 after bias correction at step 1
        np.testing.assert_allclose(params["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-9)

    def test_zero_lr_leaves_params_bit_identical(self):
        w = np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32)
        params = {"w": nx.parameter(w.copy())}
        state = nx.AdamWState(lr=0.0)
        nx.adamw_step(params, {"w": np.ones((3, 2), np.float32)}, state)
        assert params["w"].data.tobytes() == w.tobytes()
        assert state.step == 1

    def test_non_finite_gradient_names_parameter_and_step(self):
        params = {"layer.w": nx.parameter(np.zeros(2))}
        with pytest.raises(nx.NumericalError, match=r"layer\.w.*step 1"):
            nx.adamw_step(params, {"layer.w": np.array([1.0, np.nan])}, nx.AdamWState())

    def test_moments_track_parameter_shapes(self):
        params = {"a": nx.parameter(np.zeros((2, 3))), "b": nx.parameter(np.zeros(4))}
        state = nx.AdamWState()
        for _ in range(3):
            nx.adamw_step(params, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)
        assert state.step == 3

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        total = nx.clip_grad_norm(grads, 1.0)
        assert total == pytest.approx(5.0)
        norm = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        assert norm == pytest.approx(1.0, rel=1e-5)
