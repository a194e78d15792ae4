import math

import numpy as np
import pytest

from elsa import nncore as nn


def rng():
    return np.random.default_rng(0)


class TestGradchecks:
    def test_linear_layer(self):
        r = rng()
        x = nn.parameter(r.standard_normal((3, 5)))
        w = nn.parameter(r.standard_normal((4, 5)) * 0.3)
        b = nn.parameter(r.standard_normal(4) * 0.1)
        err = nn.gradcheck(lambda: nn.mean(nn.relu(nn.linear(x, w, b))), {"x": x, "w": w, "b": b})
        assert err < 1e-4

    def test_identity_linear(self):
        x = nn.tensor(np.arange(6.0).reshape(2, 3))
        w = nn.tensor(np.eye(3))
        b = nn.tensor(np.zeros(3))
        out = nn.linear(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_conv_delta_kernel_identity(self):
        r = rng()
        x = nn.tensor(r.standard_normal((2, 1, 6, 6)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = nn.conv2d(x, nn.tensor(k), padding=1)
        assert np.allclose(out.data, x.data)

    def test_conv2d_gradcheck(self):
        r = rng()
        x = nn.parameter(r.standard_normal((2, 3, 6, 8)))
        w = nn.parameter(r.standard_normal((4, 3, 3, 3)) * 0.2)
        b = nn.parameter(r.standard_normal(4) * 0.1)
        err = nn.gradcheck(
            lambda: nn.mean(nn.square(nn.conv2d(x, w, b, stride=2, padding=1))),
            {"x": x, "w": w, "b": b},
        )
        assert err < 1e-4

    def test_pool_gradchecks(self):
        r = rng()
        base = r.standard_normal((2, 3, 6, 8))
        # well-separated values keep the FD oracle away from max ties
        sep = base + np.arange(base.size).reshape(base.shape) * 0.01
        x = nn.parameter(sep)
        assert nn.gradcheck(lambda: nn.mean(nn.square(nn.max_pool2d(x, 2))), {"x": x}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.square(nn.mean_pool2d(x, 2))), {"x": x}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.square(nn.global_mean_pool(x))), {"x": x}) < 1e-4

    def test_norm_ops_gradcheck(self):
        r = rng()
        x = nn.parameter(r.standard_normal((4, 6)))
        g = nn.parameter(np.abs(r.standard_normal(6)) + 0.5)
        b = nn.parameter(r.standard_normal(6) * 0.1)
        assert nn.gradcheck(lambda: nn.mean(nn.square(nn.layer_norm(x, g, b))), {"x": x, "g": g, "b": b}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.square(nn.l2_normalize(x))), {"x": x}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.logsumexp(x, axis=1)), {"x": x}) < 1e-4

    def test_elementwise_and_gather_gradcheck(self):
        r = rng()
        x = nn.parameter(r.standard_normal((3, 4)))
        t = nn.parameter(r.standard_normal((7, 4)) * 0.3)
        idx = np.array([0, 3, 3, 5])
        assert nn.gradcheck(lambda: nn.mean(nn.log(nn.add_const(nn.square(x), 1.0))), {"x": x}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.square(nn.take_rows(t, idx))), {"t": t}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.exp(nn.scale(x, 0.5))), {"x": x}) < 1e-4
        assert nn.gradcheck(lambda: nn.mean(nn.reciprocal(nn.add_const(nn.square(x), 1.0))), {"x": x}) < 1e-4

    def test_composed_network(self):
        r = rng()
        x = nn.parameter(r.standard_normal((2, 1, 8, 8)))
        w1 = nn.parameter(r.standard_normal((4, 1, 3, 3)) * 0.3)
        b1 = nn.parameter(np.zeros(4))
        wl = nn.parameter(r.standard_normal((5, 4)) * 0.3)
        bl = nn.parameter(np.zeros(5))

        def f():
            h = nn.relu(nn.conv2d(x, w1, b1, padding=1))
            h = nn.max_pool2d(h, 2)
            h = nn.global_mean_pool(h)
            return nn.mean(nn.square(nn.linear(h, wl, bl)))

        assert nn.gradcheck(f, {"x": x, "w1": w1, "b1": b1, "wl": wl, "bl": bl}) < 1e-4

    def test_corrupted_gradient_detected(self):
        x = nn.parameter(np.array([1.0, 2.0, 3.0]))

        def wrong():
            # claims d(out)/dx = 1 even though out = 2x
            out = nn.Tensor(
                x.data * 2.0,
                requires_grad=True,
                _parents=(x,),
                _backward=lambda g: nn._accum(x, g * 1.0),
            )
            return nn.mean(out)

        assert nn.gradcheck(wrong, {"x": x}) > 1e-2

    def test_subset_gradcheck(self):
        r = rng()
        w = nn.parameter(r.standard_normal((40, 40)) * 0.1)
        x = nn.tensor(r.standard_normal((4, 40)))
        err = nn.gradcheck(
            lambda: nn.mean(nn.square(nn.linear(x, w))), {"w": w}, max_elements_per_param=50
        )
        assert err < 1e-4


class TestBroadcastingAndShapes:
    def test_add_broadcast_bias(self):
        a = nn.parameter(np.ones((3, 4)))
        b = nn.parameter(np.arange(4.0))
        out = nn.add(a, b)
        nn.backward(nn.sum_(out))
        assert b.grad.shape == (4,)
        assert np.allclose(b.grad, 3.0)

    def test_matmul_shape_error(self):
        a = nn.tensor(np.zeros((2, 3)))
        b = nn.tensor(np.zeros((4, 2)))
        with pytest.raises(nn.ShapeMismatchError) as e:
            nn.matmul(a, b)
        assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)

    def test_linear_shape_error_mentions_both(self):
        x = nn.tensor(np.zeros((2, 3)))
        w = nn.tensor(np.zeros((4, 5)))
        with pytest.raises(nn.ShapeMismatchError) as e:
            nn.linear(x, w)
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)

    def test_pool_divisibility_error(self):
        x = nn.tensor(np.zeros((1, 1, 5, 4)))
        with pytest.raises(nn.ShapeMismatchError):
            nn.max_pool2d(x, 2)

    def test_backward_needs_scalar(self):
        x = nn.parameter(np.ones((2, 2)))
        with pytest.raises(ValueError):
            nn.backward(nn.scale(x, 2.0))


class TestNanGuard:
    def test_log_of_negative_raises(self):
        x = nn.tensor(np.array([-1.0]))
        with pytest.raises(FloatingPointError):
            nn.log(x)

    def test_overflow_exp_raises(self):
        x = nn.tensor(np.array([1e4]))
        with pytest.raises(FloatingPointError):
            nn.exp(x)


class TestAdam:
    def test_first_step_magnitude_equals_lr(self):
        p = nn.parameter(np.array([1.0]))
        opt = nn.Adam({"p": p}, nn.CosineSchedule(1e-3, 1e-5, 100))
        p.grad = np.array([1.0])
        lr = opt.step()
        assert lr == pytest.approx(1e-3)
        assert abs(abs(p.data[0] - 1.0) - lr) < 1e-9

    def test_zero_grad_leaves_params(self):
        p = nn.parameter(np.array([1.0, 2.0]))
        opt = nn.Adam({"p": p}, nn.CosineSchedule(1e-3, 1e-5, 10))
        before = p.data.copy()
        opt.step()  # no grads assigned
        assert np.array_equal(p.data, before)
        assert opt.step_count == 1

    def test_schedule_endpoints(self):
        s = nn.CosineSchedule(peak=1e-3, floor=1e-5, total_steps=100)
        assert s.lr(0) == pytest.approx(1e-3)
        assert s.lr(100) == pytest.approx(1e-5)
        assert s.lr(50) == pytest.approx((1e-3 + 1e-5) / 2)
        assert s.lr(200) == pytest.approx(1e-5)  # held at the floor

    def test_state_roundtrip(self):
        r = rng()
        p = nn.parameter(r.standard_normal(4))
        opt = nn.Adam({"p": p}, nn.CosineSchedule(1e-3, 1e-5, 10))
        p.grad = r.standard_normal(4)
        opt.step()
        arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
        opt2 = nn.Adam({"p": p}, nn.CosineSchedule(1e-3, 1e-5, 10))
        opt2.load_state_arrays(arrays, step_count=opt.step_count)
        assert opt2.step_count == 1
        assert np.array_equal(opt2.m["p"], opt.m["p"])


class TestDeterminism:
    def test_training_loop_bit_identical(self):
        def run():
            r = np.random.default_rng(42)
            x = nn.tensor(r.standard_normal((8, 5)))
            y = nn.tensor(r.standard_normal((8, 2)))
            w = nn.parameter(r.standard_normal((2, 5)) * 0.3)
            b = nn.parameter(np.zeros(2))
            opt = nn.Adam({"w": w, "b": b}, nn.CosineSchedule(1e-2, 1e-4, 50))
            for _ in range(50):
                loss = nn.mean(nn.square(nn.sub(nn.linear(x, w, b), y)))
                opt.zero_grad()
                nn.backward(loss)
                opt.step()
            return w.data.tobytes(), b.data.tobytes()

        assert run() == run()
