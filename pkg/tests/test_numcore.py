import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptattn import numcore as nc
from adaptattn.numcore import ParamStore, Tensor


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for t in range(a.shape[1]):
                out[i, j] += a[i, t] * b[t, j]
    return out


def grad_oracle(fn, shapes, seed=0):
    """Worst relative error of backward vs finite differences for fn(*params)."""
    ps = ParamStore(seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ts = [ps.add(f"p{i}", rng.uniform(-1, 1, s)) for i, s in enumerate(shapes)]
    return max(nc.gradcheck(lambda _: nc.tsum(fn(*ts)), ps).values())


class TestMatmul:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2], [3, 4]]))
        assert np.array_equal(nc.matmul(Tensor(np.eye(2)), x).data, x.data)

    def test_hand_case(self):
        out = nc.matmul(Tensor(np.array([[1.0, 2]])), Tensor(np.array([[3.0], [4]])))
        assert out.data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        out = nc.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_batched_broadcast(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        out = nc.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out[1], loop_matmul(a[1], b), atol=1e-12)

    def test_shape_error_names_both(self):
        with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_counts_multiply_adds(self):
        with nc.count_flops() as c:
            nc.matmul(Tensor(np.zeros((5, 7))), Tensor(np.zeros((7, 3))))
        assert c[0] == 5 * 7 * 3


class TestSoftmax:
    def test_symmetric(self):
        out = nc.softmax_rows(Tensor(np.zeros((1, 2)))).data
        assert out.tolist() == [[0.5, 0.5]]

    def test_large_logits_stable(self):
        out = nc.softmax_rows(Tensor(np.array([[1000.0, 0.0]]))).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_direct_formula(self, rng):
        x = rng.standard_normal((1, 6))
        ref = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(nc.softmax_rows(Tensor(x)).data, ref, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(nc.NumericError):
            nc.softmax_rows(Tensor(np.array([[np.nan, 1.0]])))

    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_rows_stochastic(self, x):
        out = nc.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out >= 0)


class TestLayerNorm:
    def test_constant_token(self):
        x = Tensor(np.full((1, 4), 5.0))
        out = nc.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, np.zeros((1, 4)))

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.standard_normal(4)
        out = nc.layernorm(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros(4)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 4)))

    def test_moments(self, rng):
        out = nc.layernorm(Tensor(rng.standard_normal((1, 64))), Tensor(np.ones(64)), Tensor(np.zeros(64)))
        assert abs(out.data.mean()) < 1e-6
        assert abs(out.data.var() - 1.0) < 1e-3  # eps = 1e-5 shrinks the variance slightly


class TestBackward:
    def test_sum(self):
        ps = ParamStore()
        w = ps.add("w", np.arange(4.0).reshape(2, 2))
        grads = nc.backward(nc.tsum(w), ps)
        assert np.array_equal(grads["w"], np.ones((2, 2)))

    def test_product_rule(self):
        ps = ParamStore(dtype=np.float64)
        w = ps.add("w", np.array([[3.0]]))
        assert nc.backward(nc.tsum(w * w), ps)["w"][0, 0] == 6.0

    def test_non_scalar_rejected(self):
        ps = ParamStore()
        w = ps.add("w", np.ones(3))
        with pytest.raises(nc.ContractError):
            nc.backward(w * 2.0, ps)

    def test_unused_param_gets_zero(self):
        ps = ParamStore()
        w = ps.add("w", np.ones(2))
        ps.add("unused", np.ones(3))
        grads = nc.backward(nc.tsum(w), ps)
        assert np.array_equal(grads["unused"], np.zeros(3))

    def test_no_grad_builds_no_graph(self):
        ps = ParamStore()
        w = ps.add("w", np.ones(2))
        with nc.no_grad():
            out = w * 2.0
        assert not out.requires_grad
        assert out._backward is None

    def test_grads_reset_between_calls(self):
        ps = ParamStore()
        w = ps.add("w", np.ones(2))
        nc.backward(nc.tsum(w), ps)
        assert np.array_equal(nc.backward(nc.tsum(w), ps)["w"], np.ones(2))


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4), (1, 4)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    "exp": (lambda a: nc.exp(a), [(2, 3)]),
    "log": (lambda a: nc.log(a * a + 0.5), [(2, 3)]),
    "tanh": (lambda a: nc.tanh(a), [(2, 3)]),
    "gelu": (lambda a: nc.gelu(a), [(2, 5)]),
    "matmul": (lambda a, b: nc.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: nc.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda a, b: nc.softmax_rows(a) * b, [(3, 4), (3, 4)]),
    "layernorm": (lambda a, g, b: nc.layernorm(a, g, b) * nc.exp(a), [(3, 5), (5,), (5,)]),
    "transpose": (lambda a, b: nc.swap_last(a) * b, [(2, 3, 4), (2, 4, 3)]),
    "getitem": (lambda a: a[1:, ::2] * a[1:, ::2], [(3, 4)]),
    "concat": (lambda a, b: nc.concat([a, b * b], axis=0), [(2, 3), (1, 3)]),
    "mean": (lambda a: nc.mean(a * a, axis=1), [(3, 4)]),
    "reshape": (lambda a, b: nc.reshape(a, (4, 3)) * b, [(3, 4), (4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    assert grad_oracle(fn, shapes) <= 1e-4


class TestFiniteDiff:
    def test_square(self):
        ps = ParamStore(dtype=np.float64)
        w = ps.add("w", np.array(3.0))
        g = nc.finite_diff_grad(lambda _: w * w, ps)
        assert abs(g["w"] - 6.0) < 1e-8

    def test_constant(self):
        ps = ParamStore(dtype=np.float64)
        ps.add("w", np.array([1.0, 2.0]))
        g = nc.finite_diff_grad(lambda _: Tensor(np.array(4.0)), ps)
        assert np.all(np.abs(g["w"]) < 1e-10)

    def test_requires_float64(self):
        ps = ParamStore(dtype=np.float32)
        ps.add("w", np.ones(1))
        with pytest.raises(nc.ContractError):
            nc.finite_diff_grad(lambda _: Tensor(np.array(1.0)), ps)

    @pytest.mark.parametrize("h", [1e-7, 1e-3])
    def test_step_range(self, h):
        ps = ParamStore(dtype=np.float64)
        ps.add("w", np.ones(1))
        with pytest.raises(ValueError):
            nc.finite_diff_grad(lambda _: Tensor(np.array(1.0)), ps, h=h)

    def test_detached_values_frozen(self):
        # d/dw [w * detach(w)] is detach(w) = w for backward; replay makes FD agree
        ps = ParamStore(dtype=np.float64)
        w = ps.add("w", np.array([2.0]))
        f = lambda _: nc.tsum(w * nc.detach(w))  # noqa: E731
        assert nc.finite_diff_grad(f, ps)["w"][0] == pytest.approx(2.0, abs=1e-8)
        assert nc.finite_diff_grad(f, ps, freeze_detached=False)["w"][0] == pytest.approx(4.0, abs=1e-6)


class TestParamStore:
    def test_order_independent_init(self):
        a, b = ParamStore(7), ParamStore(7)
        a.xavier("x", (3, 4))
        a.normal("y", (5,))
        b.normal("y", (5,))
        b.xavier("x", (3, 4))
        assert np.array_equal(a["x"].data, b["x"].data)
        assert np.array_equal(a["y"].data, b["y"].data)

    def test_duplicate_rejected(self):
        ps = ParamStore()
        ps.zeros("w", (2,))
        with pytest.raises(KeyError):
            ps.zeros("w", (2,))

    def test_snapshot_round_trip(self):
        ps = ParamStore(3)
        ps.normal("w", (4,))
        snap = ps.snapshot()
        ps["w"].data += 1.0
        ps.load(snap)
        assert np.array_equal(ps["w"].data, snap["w"])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_matmul_matches_numpy(n, k, m):
    rng = np.random.default_rng(n * 100 + k * 10 + m)
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    np.testing.assert_allclose(nc.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12)


def test_one_hot():
    out = nc.one_hot(np.array([2, 0]), 3).data
    assert out.tolist() == [[0, 0, 1], [1, 0, 0]]


def test_where_const_blocks_gradient():
    ps = ParamStore(dtype=np.float64)
    w = ps.add("w", np.array([0.0, 2.0]))
    out = nc.where_const(w, np.array([False, True]), 1.0)
    assert out.data.tolist() == [1.0, 2.0]
    assert nc.backward(nc.tsum(out * 3.0), ps)["w"].tolist() == [0.0, 3.0]


def test_flop_counter_charges_softmax():
    with nc.count_flops() as c:
        nc.softmax_rows(Tensor(np.zeros((3, 4))))
    assert c[0] == nc.SOFTMAX_COST * 12


def test_max_rel_error_floor():
    assert nc.max_rel_error(np.zeros(3), np.full(3, 1e-12)) < 1e-3
    assert nc.max_rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
