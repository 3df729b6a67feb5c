import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adam_loop, conv2d_loop
from ssae import autodiff as ad
from ssae.autodiff import Tensor, parameter
from ssae.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from ssae.errors import ContractError, DataError, ShapeError
from ssae.gradcheck import check_gradients
from ssae.optim import AdamState, adam_step

TOL = 1e-4


class TestForward:
    def test_matmul_identity(self, rng):
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(ad.matmul(np.eye(4), x).values, x)

    def test_conv_constant_same_reflect(self, rng):
        w = rng.standard_normal((3, 3, 1, 1))
        out = ad.conv2d(np.full((1, 6, 6, 1), 2.0), w, padding="same", pad_mode="reflect")
        np.testing.assert_allclose(out.values, 2.0 * w.sum(), rtol=1e-13)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("pad_mode", ["reflect", "zeros"])
    def test_conv_ramp_matches_loop(self, stride, pad_mode):
        x = np.arange(25, dtype=float).reshape(1, 5, 5, 1)
        w = np.arange(9, dtype=float).reshape(3, 3, 1, 1) / 10 - 0.3
        got = ad.conv2d(x, w, stride=stride, padding="same", pad_mode=pad_mode).values
        want = conv2d_loop(x, w, stride, pad=1, pad_value=0.0 if pad_mode == "zeros" else None)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_conv_multichannel_valid(self, rng):
        x = rng.standard_normal((2, 6, 7, 5))
        w = rng.standard_normal((3, 3, 5, 4))
        np.testing.assert_allclose(ad.conv2d(x, w, padding="valid").values, conv2d_loop(x, w), atol=1e-12)

    def test_conv_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))

    def test_upsample_nearest(self):
        x = np.arange(4.0).reshape(1, 2, 2, 1)
        out = ad.upsample_nearest(x).values[0, :, :, 0]
        np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(np.zeros(3), np.zeros(4))

    def test_reshape_bad(self):
        with pytest.raises(ShapeError):
            ad.reshape(np.zeros(6), (4, 2))


class TestLosses:
    def test_mse_identical(self, rng):
        x = rng.random((3, 3))
        assert float(ad.mse(x, x).values) == 0.0

    def test_mse_offset(self, rng):
        x = rng.random((4, 5))
        assert float(ad.mse(x + 0.25, x).values) == pytest.approx(0.0625, rel=1e-12)

    def test_mse_four_elements(self):
        p, t = np.array([1.0, -2.0, 0.5, 3.0]), np.array([0.0, 1.0, 0.5, 1.0])
        # (1 + 9 + 0 + 4) / 4
        assert float(ad.mse(p, t).values) == pytest.approx(3.5, rel=1e-15)

    def test_mse_shape_error(self):
        with pytest.raises(ShapeError):
            ad.mse(np.zeros(3), np.zeros(4))

    def test_kl_standard_normal_is_zero(self):
        assert float(ad.gaussian_kl(np.zeros(5), np.zeros(5)).values) == 0.0

    def test_kl_unit_mean(self):
        assert float(ad.gaussian_kl(np.ones(1), np.zeros(1)).values) == pytest.approx(0.5, rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_kl_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        mu, lv = r.normal(0, 2, 7), r.normal(0, 2, 7)
        assert float(ad.gaussian_kl(mu, lv).values) >= 0.0


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = parameter(rng.random((3, 4)))
        ad.backward(ad.sum(p))
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            ad.backward(parameter(np.zeros(3)) * 2.0)

    def test_diamond_counts_both_paths(self):
        # y = a*x + b*x, loss = y^2 -> d/dx = 2y(a+b)
        x = parameter(np.array(1.5))
        a, b = 2.0, -0.5
        y = ad.add(ad.mul(x, a), ad.mul(x, b))
        ad.backward(ad.square(y))
        y0 = (a + b) * 1.5
        assert float(x.grad) == pytest.approx(2 * y0 * (a + b), rel=1e-15)

    def test_shared_subexpression(self):
        x = parameter(np.array([1.0, 2.0]))
        s = ad.mul(x, x)
        ad.backward(ad.sum(ad.add(s, s)))
        np.testing.assert_allclose(x.grad, 4 * x.values)

    def test_repeated_backward_does_not_accumulate(self, rng):
        p = parameter(rng.random(3))
        for _ in range(3):
            ad.backward(ad.sum(ad.mul(p, 2.0)))
        np.testing.assert_array_equal(p.grad, np.full(3, 2.0))

    def test_no_grad_records_nothing(self, rng):
        p = parameter(rng.random(3))
        with ad.no_grad():
            out = ad.mul(p, 2.0)
        assert not out.requires_grad

    def test_mse_linear_model(self, rng):
        w = parameter(rng.standard_normal((5, 3)))
        x, y = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
        assert check_gradients(lambda: ad.mse(ad.matmul(x, w), y), {"w": w}) <= TOL


def _p(rng, *shape, scale=1.0):
    return parameter(scale * rng.standard_normal(shape))


def _binary(op, shape_a, shape_b, reduce=lambda t: ad.sum(ad.square(t)), **kw):
    def make(r):
        a, b = _p(r, *shape_a), _p(r, *shape_b, **kw)
        return {"a": a, "b": b}, lambda: reduce(op(a, b))

    return make


def _unary(op, shape, reduce=lambda t: ad.sum(ad.square(t))):
    def make(r):
        a = _p(r, *shape)
        return {"a": a}, lambda: reduce(op(a))

    return make


def _masked_upsample(r):
    a = _p(r, 1, 2, 3, 2)
    m = r.standard_normal((1, 4, 6, 2))
    return {"a": a}, lambda: ad.sum(ad.square(ad.mul(ad.upsample_nearest(a), m)))


def _reshape_then_matmul(r):
    a = _p(r, 2, 6)
    w = r.standard_normal((4, 1))
    return {"a": a}, lambda: ad.sum(ad.square(ad.matmul(ad.reshape(a, (3, 4)), w)))


OPS = {
    "add": _binary(ad.add, (3, 4), (3, 4)),
    "sub": _binary(ad.sub, (3, 4), (3, 4)),
    "mul": _binary(lambda a, b: ad.mul(ad.mul(a, b), a), (3, 4), (3, 4), reduce=ad.sum),
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "bias_add": _binary(ad.bias_add, (2, 3, 4), (4,)),
    "leaky_relu": _unary(lambda a: ad.leaky_relu(a, 0.1), (20,)),
    "sigmoid": _unary(ad.sigmoid, (10,)),
    "exp": _unary(ad.exp, (10,), reduce=ad.sum),
    "reshape": _reshape_then_matmul,
    "mean": _unary(ad.mean, (5,), reduce=ad.square),
    "mse": _binary(ad.mse, (3, 3), (3, 3), reduce=lambda t: t),
    "gaussian_kl": _binary(ad.gaussian_kl, (6,), (6,), reduce=lambda t: t, scale=0.5),
    "conv_s1_reflect": _binary(ad.conv2d, (2, 5, 5, 2), (3, 3, 2, 3)),
    "conv_s2_zeros": _binary(lambda a, b: ad.conv2d(a, b, 2, pad_mode="zeros"), (2, 6, 6, 2), (3, 3, 2, 3)),
    "conv_wide": _binary(lambda a, b: ad.conv2d(a, b, 2), (1, 6, 6, 8), (3, 3, 8, 2)),
    "conv_valid": _binary(lambda a, b: ad.conv2d(a, b, padding="valid"), (1, 5, 4, 1), (3, 3, 1, 2)),
    "conv_tiny_edge_pad": _binary(lambda a, b: ad.conv2d(a, b, 2), (1, 1, 1, 3), (3, 3, 3, 2)),
    "upsample_nearest": _masked_upsample,
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op):
    rng = np.random.default_rng(sorted(OPS).index(op))
    params, loss = OPS[op](rng)
    assert check_gradients(loss, params, probes=10, rng=rng) <= TOL


class TestKinkGuard:
    def test_patterns_recorded(self):
        with ad.record_kinks() as kinks:
            ad.leaky_relu(Tensor(np.array([-1.0, 2.0])))
        assert len(kinks) == 1 and kinks[0].tolist() == [False, True]
        ad.leaky_relu(Tensor(np.ones(2)))  # outside the block: nothing recorded
        assert len(kinks) == 1

    def test_straddling_entry_is_redrawn(self):
        values = np.linspace(-1, 1, 40)
        values[7] = 3e-6  # within h of the kink
        a = parameter(values)
        loss = lambda: ad.sum(ad.leaky_relu(a, 0.1))
        assert check_gradients(loss, {"a": a}, probes=39, rng=np.random.default_rng(0)) <= 1e-8

    def test_exhaustive_check_refuses_kink(self):
        a = parameter(np.array([3e-6, 0.5]))
        with pytest.raises(ContractError):
            check_gradients(lambda: ad.sum(ad.leaky_relu(a, 0.1)), {"a": a}, probes=10)


class TestAdam:
    def test_first_step_closed_form(self, rng):
        g = rng.standard_normal(6)
        p = parameter(np.zeros(6))
        p.grad = g.copy()
        state = AdamState()
        adam_step(state, {"p": p})
        # m_hat = g, v_hat = g^2 after bias correction
        np.testing.assert_allclose(p.values, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert state.step == 1

    def test_zero_gradient_leaves_params(self, rng):
        v = rng.random(4)
        p = parameter(v)
        p.grad = np.zeros(4)
        adam_step(AdamState(), {"p": p})
        np.testing.assert_array_equal(p.values, v)

    def test_two_steps_match_loop(self, rng):
        theta = rng.random(3)
        g = rng.standard_normal(3)
        p = parameter(theta)
        state = AdamState()
        for _ in range(2):
            p.grad = g.copy()
            adam_step(state, {"p": p})
        np.testing.assert_allclose(p.values, adam_loop(theta, [g, g]), rtol=1e-13, atol=1e-15)
        assert state.step == 2

    def test_varying_gradients_match_loop(self, rng):
        theta = rng.random(4)
        grads = rng.standard_normal((5, 4))
        p = parameter(theta)
        state = AdamState(lr=0.01)
        for g in grads:
            p.grad = g.copy()
            adam_step(state, {"p": p})
        np.testing.assert_allclose(p.values, adam_loop(theta, grads, lr=0.01), rtol=1e-12, atol=1e-15)

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            adam_step(AdamState(), {"p": parameter(np.zeros(2))})


def test_determinism():
    def run():
        r = np.random.default_rng(5)
        w = parameter(r.standard_normal((3, 3, 1, 4)))
        x = r.standard_normal((2, 8, 8, 1))
        state = AdamState()
        for _ in range(3):
            loss = ad.mse(ad.conv2d(x, w, 2), np.zeros((2, 4, 4, 4)))
            ad.backward(loss)
            adam_step(state, {"w": w})
        return loss.values.tobytes(), w.values.tobytes()

    assert run() == run()


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        tensors = {"enc.w": rng.standard_normal((3, 3, 1, 16)), "scalar": np.array(np.pi), "β": rng.random(5)}
        save_checkpoint(tmp_path / "c.ckpt", tensors)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()
        assert encode_checkpoint(back) == (tmp_path / "c.ckpt").read_bytes()

    def test_layout(self):
        blob = encode_checkpoint({"ab": np.array([[1.0, 2.0]])})
        assert blob[:4] == b"SSAE"
        assert blob[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert blob[12:16] == (2).to_bytes(4, "little") and blob[16:18] == b"ab"
        assert blob[18:30] == b"".join(n.to_bytes(4, "little") for n in (2, 1, 2))
        assert np.frombuffer(blob[30:], "<f8").tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("blob", [b"XXXX", b"SSAE\x01\x00\x00\x00\x01\x00\x00\x00\x05"])
    def test_malformed(self, blob):
        with pytest.raises(DataError):
            decode_checkpoint(blob)
