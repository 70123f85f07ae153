import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from affectkit import numkit as nk
from affectkit.gradcheck import numeric_gradients, relative_error
from affectkit.numkit import Tape, Tensor

from conftest import assert_grads_match, grad_of


class TestTensor:
    def test_storage_is_float32(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32
        assert t.shape == (3,)
        assert int(np.prod(t.shape)) == t.data.size

    def test_precision_context(self):
        with nk.precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_operators(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
        np.testing.assert_array_equal((a + b).data, [4, 6])
        np.testing.assert_array_equal((b - a).data, [2, 2])
        np.testing.assert_array_equal((a * 2).data, [2, 4])
        np.testing.assert_array_equal((1 - a).data, [0, -1])
        np.testing.assert_array_equal((-a).data, [-1, -2])


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(nk.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_mul_by_zero_scalar(self):
        np.testing.assert_array_equal(nk.mul(Tensor([2, 3]), 0).data, [0, 0])

    def test_sub_self_is_zero_with_zero_grad(self):
        x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            d = nk.sub(x, x)
            loss = nk.sum_(d)
        np.testing.assert_array_equal(d.data, np.zeros(3))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(nk.ShapeError, match=r"\(2,\).*\(3,\)"):
            nk.add(Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_no_general_broadcasting(self):
        with pytest.raises(nk.ShapeError):
            nk.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_dispatch(self):
        a = Tensor([2.0, 4.0])
        np.testing.assert_array_equal(nk.elementwise("scale", a, 0.5).data, [1, 2])
        np.testing.assert_array_equal(nk.elementwise("div", a, Tensor([2.0, 2.0])).data, [1, 2])
        with pytest.raises(ValueError):
            nk.elementwise("pow", a, a)

    def test_div_by_zero_is_not_masked(self):
        out = nk.div(Tensor([1.0]), Tensor([0.0]))
        assert not np.isfinite(out.data).all()

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_gradients(self, op, rng):
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(0.5, 1.5, (3, 4))
        assert_grads_match(lambda p: nk.sum_(nk.elementwise(op, p["a"], p["b"])), {"a": a, "b": b})

    def test_scalar_tensor_broadcast_gradient(self, rng):
        a = rng.uniform(-1, 1, 5)
        s = np.array(0.7)
        assert_grads_match(lambda p: nk.sum_(nk.mul(nk.sub(p["a"], p["s"]), p["a"])), {"a": a, "s": s})


class TestMatmul:
    def test_identity(self, rng):
        m = rng.uniform(-1, 1, (2, 2))
        np.testing.assert_allclose(nk.matmul(Tensor(np.eye(2)), Tensor(m)).data, m.astype(np.float32))

    def test_row_sums(self):
        out = nk.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_rejects_bad_shapes(self):
        with pytest.raises(nk.ShapeError):
            nk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(nk.ShapeError):
            nk.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))

    def test_float32_gradient_against_float64_differences(self, rng):
        arrays = {"a": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, (4, 2))}

        def fn(p):
            return nk.sum_(nk.matmul(p["a"], p["b"]))

        analytic = grad_of(fn, arrays, np.float32)
        numeric = numeric_gradients(fn, arrays)
        for k in arrays:
            assert analytic[k].dtype == np.float32
            assert relative_error(analytic[k], numeric[k]) < 1e-3


class TestConv:
    def test_zero_kernels_give_bias(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        out = nk.conv2d(x, Tensor(np.zeros((5, 3, 3, 3))), Tensor(np.arange(5)))
        for f in range(5):
            assert np.all(out.data[:, f] == f)

    def test_delta_kernel_is_identity(self, rng):
        x = rng.uniform(-1, 1, (1, 1, 6, 6)).astype(np.float32)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        out = nk.conv2d(Tensor(x), Tensor(k), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_direct_convolution(self, rng):
        x = rng.uniform(-1, 1, (2, 2, 5, 5))
        k = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 3, 5, 5))
        for n in range(2):
            for f in range(3):
                for i in range(5):
                    for j in range(5):
                        ref[n, f, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * k[f]) + b[f]
        with nk.precision(np.float64):
            out = nk.conv2d(Tensor(x), Tensor(k), Tensor(b))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_pool_halves_and_averages(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = nk.avg_pool2(x)
        np.testing.assert_array_equal(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_pool_rejects_odd(self):
        with pytest.raises(nk.ShapeError):
            nk.conv2d_pool(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), "avg2")

    def test_rejects_small_input(self):
        with pytest.raises(nk.ShapeError):
            nk.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))

    def test_gradient_single_channel(self, rng):
        arrays = {
            "x": rng.uniform(-1, 1, (1, 1, 6, 6)),
            "k": rng.uniform(-1, 1, (2, 1, 3, 3)),
            "b": rng.uniform(-1, 1, 2),
        }
        proj = rng.uniform(-1, 1, (1, 2, 3, 3))
        assert_grads_match(
            lambda p: nk.sum_(nk.mul(nk.conv2d_pool(p["x"], p["k"], p["b"], "avg2"), Tensor(proj))), arrays
        )


class TestActivations:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(nk.softmax(Tensor([[0, 0, 0]])).data, [[1 / 3] * 3], atol=1e-7)

    def test_sigmoid_zero(self):
        assert nk.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_softmax_overflow_guard(self):
        out = nk.softmax(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1, 0]], atol=1e-7)

    def test_softmax_needs_rank2(self):
        with pytest.raises(nk.ShapeError):
            nk.softmax(Tensor([1.0, 2.0]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (4, 5), elements=st.floats(-50, 50, width=32)))
    def test_softmax_rows_on_simplex(self, z):
        p = nk.softmax(Tensor(z)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((p >= 0) & (p <= 1))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, 16, elements=st.floats(-15, 15, width=32)))
    def test_ranges(self, z):
        s = nk.sigmoid(Tensor(z)).data
        t = nk.tanh(Tensor(z)).data
        assert np.all((s > 0) & (s < 1))
        assert np.all((t > -1) & (t < 1))

    @pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid", "softmax-rows"])
    def test_gradients(self, kind, rng):
        z = rng.uniform(-1, 1, (3, 4))
        w = rng.uniform(-1, 1, (3, 4))
        assert_grads_match(lambda p: nk.sum_(nk.mul(nk.activation(kind, p["z"]), Tensor(w))), {"z": z})

    def test_log_clamp(self):
        out = nk.log(Tensor([0.0, 1.0]))
        np.testing.assert_allclose(out.data, [np.log(np.float32(1e-12)), 0.0])


class TestReductions:
    def test_sum(self):
        assert nk.reduce("sum", Tensor([1, 2, 3])).item() == 6

    def test_mean_constant(self):
        assert nk.mean(Tensor(np.full(7, 2.5))).item() == 2.5

    def test_mean_gradient_exact(self):
        x = Tensor(np.arange(8.0), requires_grad=True)
        with Tape() as tape:
            loss = nk.mean(x)
        tape.backward(loss)
        assert np.all(x.grad == np.float32(1 / 8))

    def test_mean_cols(self):
        out = nk.reduce("mean-per-column", Tensor([[1, 2], [3, 6]]))
        np.testing.assert_array_equal(out.data, [2, 4])

    def test_empty_rejected(self):
        with pytest.raises(nk.ShapeError):
            nk.sum_(Tensor(np.zeros(0)))

    def test_64bit_accumulation(self):
        x = Tensor(np.full(10_000_000 // 100, 0.1, dtype=np.float32))
        ref = np.sum(x.data.astype(np.float64))
        assert abs(nk.sum_(x).item() - ref) <= abs(ref) * 1e-7


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = nk.sum_(nk.mul(x, x))
        nk.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_constant_loss_gives_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            nk.sum_(nk.mul(x, x))
            loss = Tensor(3.0)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0, 0])

    def test_accumulates_without_reset(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = nk.sum_(nk.mul(x, x))
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [4, 8])
        x.zero_grad()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_rejects_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = nk.mul(x, x)
        with pytest.raises(nk.ShapeError):
            tape.backward(y)

    def test_rejects_loss_from_other_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = nk.sum_(x)
        with pytest.raises(ValueError, match="not produced on this tape"):
            Tape().backward(loss)

    def test_no_tape_no_record(self):
        x = Tensor([1.0], requires_grad=True)
        y = nk.mul(x, x)
        assert not y.requires_grad

    def test_tape_is_topological(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = nk.sum_(nk.tanh(nk.matmul(x, w)))
        produced = set()
        for rec in tape.records:
            for inp in rec.inputs:
                assert inp.node_id is None or inp.node_id in produced
            produced.add(rec.out.node_id)

    def test_linearity(self, rng):
        z = rng.uniform(-1, 1, (3, 4))
        f = lambda p: nk.sum_(nk.tanh(p["z"]))
        g = lambda p: nk.mean(nk.mul(p["z"], p["z"]))
        a, b = 0.7, -1.3
        combo = grad_of(lambda p: nk.add(nk.scale(f(p), a), nk.scale(g(p), b)), {"z": z})["z"]
        gf = grad_of(f, {"z": z})["z"]
        gg = grad_of(g, {"z": z})["z"]
        np.testing.assert_allclose(combo, a * gf + b * gg, atol=1e-6)

    def test_deterministic(self, rng):
        z = rng.uniform(-1, 1, (5, 6))
        fn = lambda p: nk.sum_(nk.softmax(nk.matmul(p["z"], nk.reshape(p["z"], (6, 5)))))
        g1 = grad_of(fn, {"z": z})["z"]
        g2 = grad_of(fn, {"z": z})["z"]
        assert g1.tobytes() == g2.tobytes()

    def test_tapes_are_thread_local(self):
        errors = []

        def work(seed):
            try:
                r = np.random.default_rng(seed)
                x = Tensor(r.uniform(-1, 1, 50), requires_grad=True)
                for _ in range(50):
                    x.zero_grad()
                    with Tape() as tape:
                        loss = nk.sum_(nk.mul(x, x))
                    tape.backward(loss)
                    np.testing.assert_allclose(x.grad, 2 * x.data)
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors

    def test_composite_cnn_graph(self, rng):
        arrays = {
            "x": rng.uniform(-1, 1, (2, 3, 4, 4)),
            "k": rng.uniform(-1, 1, (2, 3, 3, 3)),
            "b": rng.uniform(-1, 1, 2),
            "w": rng.uniform(-1, 1, (8, 3)),
        }
        labels = np.array([0, 2])

        def fn(p):
            h = nk.conv2d_pool(p["x"], p["k"], p["b"], "avg2")
            h = nk.relu(nk.reshape(h, (2, 8)))
            probs = nk.softmax(nk.matmul(h, p["w"]))
            return nk.neg(nk.mean(nk.log(nk.gather(probs, labels))))

        assert_grads_match(fn, arrays)
