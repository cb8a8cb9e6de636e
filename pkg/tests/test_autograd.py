import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hynt import autograd as ag
from hynt.autograd import NonFiniteError, Tape, Tensor
from hynt.gradcheck import check_gradients


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i][j] += a[i][t] * b[t][j]
    return np.array(out)


def param(shape, rng, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


class TestCoreOps:
    def test_softmax_cols_uniform_for_equal_logits(self):
        y = ag.softmax_cols(Tensor(np.zeros((3, 1))))
        np.testing.assert_allclose(y.data, np.full((3, 1), 1 / 3), rtol=0, atol=1e-15)

    def test_relu(self):
        np.testing.assert_array_equal(ag.relu(Tensor([-2.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(ag.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-14)

    def test_batched_weight_matmul_matches_loop(self):
        rng = np.random.default_rng(4)
        w, x = rng.normal(size=(5, 3)), rng.normal(size=(4, 3, 2))
        got = ag.matmul(Tensor(w), Tensor(x)).data
        for b in range(4):
            np.testing.assert_allclose(got[b], naive_matmul(w, x[b]), atol=1e-14)

    def test_concat_rows_and_cols(self):
        a, b = Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1)))
        assert ag.concat_rows([a, b]).shape == (4, 1)
        assert ag.concat_cols([a, b]).shape == (2, 2)

    def test_row_select_gathers_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(ag.row_select(table, [[3, 0]]).data, [[[9, 10, 11], [0, 1, 2]]])

    def test_masked_softmax_gives_zero_weight(self):
        x = Tensor(np.array([[1.0], [5.0], [2.0]]))
        y = ag.softmax_cols(x, mask=np.array([[True], [False], [True]]))
        assert y.data[1, 0] == 0.0
        assert math.isclose(y.data.sum(), 1.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            ag.mul(Tensor([np.inf]), Tensor([0.0]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.floats(-30, 30)))
    def test_softmax_cols_are_distributions(self, x):
        y = ag.softmax_cols(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-9)
        assert (y >= 0).all() and (y <= 1).all()

    def test_softmax_cols_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(0)
        y = ag.softmax_cols(Tensor(rng.normal(size=(6, 10)))).data
        assert (y > 0).all() and (y < 1).all()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (8, 3), elements=st.floats(-10, 10)))
    def test_layer_norm_columns_standardized(self, x):
        # columns need spread for unit variance to be meaningful
        x = x + np.arange(8)[:, None]
        y = ag.normalize_cols(Tensor(x)).data
        assert np.abs(y.mean(axis=0)).max() < 1e-9
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-6)

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert ag.dropout(x, 0.5, train=False) is x

    def test_dropout_train_seeded_deterministic_and_inverted(self):
        x = Tensor(np.ones(1000))
        a = ag.dropout(x, 0.3, True, np.random.default_rng(5)).data
        b = ag.dropout(x, 0.3, True, np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1 / 0.7}


class TestLosses:
    def test_cross_entropy_uniform(self):
        loss = ag.cross_entropy_smoothed(Tensor([[0.0, 0.0]]), [0], 0.0)
        assert math.isclose(loss.item(), math.log(2), rel_tol=1e-15)

    def test_cross_entropy_smoothed_against_scalar_formula(self):
        from mpmath import mp, mpf, exp, log

        mp.dps = 40
        z = [mpf(2), mpf(0)]
        lse = log(exp(z[0]) + exp(z[1]))
        t = [mpf("0.9") + mpf("0.05"), mpf("0.05")]
        expected = -(t[0] * (z[0] - lse) + t[1] * (z[1] - lse))
        got = ag.cross_entropy_smoothed(Tensor([[2.0, 0.0]]), [0], 0.1).item()
        assert abs(got - float(expected)) < 1e-14

    def test_mse_zero_for_perfect_prediction(self):
        assert ag.mse(Tensor([0.7]), [0.7]).item() == 0.0

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            ag.cross_entropy_smoothed(Tensor([[0.0, 0.0]]), [2])


class TestBackward:
    def test_linear_map_gradient_is_outer_product(self):
        rng = np.random.default_rng(0)
        w = param((3, 4), rng)
        x = Tensor(rng.normal(size=(4, 1)))
        with Tape() as tape:
            loss = ag.sum_all(ag.matmul(w, x))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, np.outer(np.ones(3), x.data[:, 0]), atol=1e-15)

    def test_constants_get_no_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.arange(3.0))
        with Tape() as tape:
            loss = ag.sum_all(ag.mul(w, c))
        tape.backward(loss)
        assert c.grad is None
        np.testing.assert_array_equal(w.grad, c.data)

    def test_backward_twice_raises(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = ag.sum_all(w)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            out = ag.mul(w, 2.0)
        with pytest.raises(ValueError):
            tape.backward(out)

    def test_no_tape_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        out = ag.mul(w, 2.0)
        assert out._node is None

    @pytest.mark.parametrize(
        "build",
        [
            "matmul",
            "batched_matmul",
            "softmax_cols",
            "masked_softmax",
            "layer_norm",
            "relu",
            "concat",
            "row_select",
            "take_cols",
            "cross_entropy",
            "mse",
            "dropout",
        ],
    )
    def test_each_op_matches_finite_differences(self, build):
        rng = np.random.default_rng(11)
        a = param((4, 3), rng)
        b = param((3, 5), rng)
        x3 = param((2, 3, 4), rng)
        gain = param((4, 1), rng)
        bias = param((4, 1), rng)
        proj = Tensor(rng.normal(size=(4, 5)))
        proj3 = Tensor(rng.normal(size=(2, 4, 4)))
        proj6 = Tensor(rng.normal(size=(4, 6)))
        table = param((6, 3), rng)
        mask = np.array([[True], [False], [True], [True]])
        params = {"a": a, "b": b, "x3": x3, "gain": gain, "bias": bias, "table": table}

        def loss_fn():
            if build == "matmul":
                out = ag.matmul(a, b)
                return ag.sum_all(ag.mul(out, proj))
            if build == "batched_matmul":
                out = ag.matmul(a, x3)
                return ag.sum_all(ag.mul(out, proj3))
            if build == "softmax_cols":
                return ag.sum_all(ag.mul(ag.softmax_cols(ag.matmul(a, b)), proj))
            if build == "masked_softmax":
                s = ag.softmax_cols(ag.matmul(a, b), mask=np.broadcast_to(mask, (4, 5)))
                return ag.sum_all(ag.mul(s, proj))
            if build == "layer_norm":
                return ag.sum_all(ag.mul(ag.layer_norm(ag.matmul(a, b), gain, bias), proj))
            if build == "relu":
                return ag.sum_all(ag.mul(ag.relu(ag.matmul(a, b)), proj))
            if build == "concat":
                c = ag.concat_cols([a, ag.matmul(a, ag.getitem(b, (slice(None), slice(0, 3))))])
                return ag.sum_all(ag.mul(c, proj6))
            if build == "row_select":
                rows = ag.row_select(table, [[0, 5, 0], [2, 2, 1]])
                return ag.sum_all(ag.mul(rows, rows))
            if build == "take_cols":
                picked = ag.take_cols(x3, [3, 0])
                return ag.sum_all(ag.mul(picked, picked))
            if build == "cross_entropy":
                logits = ag.matmul(ag.swapaxes(b, 0, 1), ag.swapaxes(a, 0, 1))
                return ag.cross_entropy_smoothed(logits, [0, 3, 1, 2, 3], 0.1)
            if build == "mse":
                return ag.mse(ag.sum_axis(ag.matmul(a, b), axis=0), np.arange(5.0))
            if build == "dropout":
                out = ag.dropout(ag.matmul(a, b), 0.4, True, np.random.default_rng(1))
                return ag.sum_all(ag.mul(out, proj))
            raise AssertionError(build)

        errors = check_gradients(loss_fn, params)
        assert max(errors.values()) < 1e-4, errors
