"""Tensor engine: primitive contracts and gradient oracles."""

import numpy as np
import pytest

from qst import tensor as T
from qst.errors import ConfigurationError, DimensionError, NumericalError
from qst.gradcheck import grad_check
from qst.optim import Adam
from qst.tensor import Tensor


def test_sum_of_squares_gradient_is_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    assert grad_check(lambda t: (t**2).sum(), x) < 1e-6


def test_abs_gradient_away_from_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=12)
    x = np.where(np.abs(x) < 0.2, x + 0.5, x)
    assert grad_check(lambda t: t.abs().sum(), x) < 1e-6


@pytest.mark.parametrize(
    "name,fn",
    [
        ("tanh", lambda t: t.tanh().sum()),
        ("relu", lambda t: t.relu().sum()),
        ("gelu", lambda t: t.gelu().sum()),
        ("mean", lambda t: (t * t).mean()),
        ("reshape", lambda t: t.reshape(6, 2).tanh().sum()),
        ("transpose", lambda t: t.transpose(1, 0).tanh().sum()),
        ("power", lambda t: (t**3.0).sum()),
    ],
)
def test_primitive_gradients_at_random_points(name, fn):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(10):
        x = rng.normal(size=(4, 3))
        if name == "relu":  # keep away from the kink
            x = np.where(np.abs(x) < 0.1, x + 0.3, x)
        err = grad_check(fn, x)
        assert err < 1e-4, f"{name} trial {trial}: {err}"


def test_matmul_gradients_including_batched():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 5))
    for _ in range(10):
        x = rng.normal(size=(2, 4, 3))
        err = grad_check(lambda t: (t @ Tensor(w)).tanh().sum(), x)
        assert err < 1e-4
    # gradient w.r.t. the broadcast right operand
    x_const = rng.normal(size=(2, 4, 3))
    err = grad_check(lambda t: (Tensor(x_const) @ t).tanh().sum(), w)
    assert err < 1e-4


def test_matmul_shape_errors():
    a = Tensor(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        T.matmul(a, Tensor(np.zeros((4, 2))))
    with pytest.raises(DimensionError):
        T.matmul(a, Tensor(np.zeros(3)))


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    g = Tensor(rng.normal(1.0, 0.1, size=5), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    x = rng.normal(size=(4, 5))
    assert grad_check(lambda t: T.layer_norm(t, g, b).tanh().sum(), x) < 1e-4


def test_embedding_lookup_and_scatter_gradient():
    rng = np.random.default_rng(4)
    idx = np.array([[0, 2], [2, 1]])
    table = rng.normal(size=(3, 4))
    out = T.embedding(Tensor(table), idx)
    np.testing.assert_array_equal(out.data, table[idx])
    # repeated rows must accumulate gradient
    err = grad_check(lambda t: T.embedding(t, idx).tanh().sum(), table)
    assert err < 1e-4


def test_cross_entropy_matches_analytic_uniform():
    logits = Tensor(np.zeros((7, 10)))
    targets = np.arange(7) % 10
    loss = T.cross_entropy(logits, targets)
    assert abs(loss.item() - np.log(10.0)) < 1e-12


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(6, 9))
    targets = rng.integers(0, 9, size=6)
    assert grad_check(lambda t: T.cross_entropy(t, targets), logits) < 1e-4


def test_cross_entropy_target_range():
    from qst.errors import RangeError

    with pytest.raises(RangeError):
        T.cross_entropy(Tensor(np.zeros((2, 5))), np.array([0, 5]))


def test_masked_softmax_rows_sum_to_one():
    rng = np.random.default_rng(6)
    scores = Tensor(rng.normal(size=(3, 8, 8)))
    mask = np.tril(np.ones((8, 8), dtype=bool))
    probs = T.masked_softmax(scores, mask)
    sums = probs.data.sum(axis=-1)
    assert np.abs(sums - 1.0).max() < 1e-12
    assert (probs.data[:, mask == False] == 0.0).all()  # noqa: E712


def test_masked_softmax_rejects_empty_rows():
    mask = np.ones((2, 2), dtype=bool)
    mask[1] = False
    with pytest.raises(ConfigurationError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), mask)


def test_masked_softmax_gradient():
    rng = np.random.default_rng(7)
    mask = np.tril(np.ones((5, 5), dtype=bool))
    x = rng.normal(size=(5, 5))
    assert grad_check(lambda t: (T.masked_softmax(t, mask) ** 2.0).sum(), x) < 1e-4


class TestMaskedAttention:
    def test_uniform_scores_average_values(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=(4, 3))
        q = Tensor(np.zeros((2, 3)))
        k = Tensor(np.zeros((4, 3)))
        out = T.masked_attention(q, k, Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)

    def test_causal_mask_blocks_future_values(self):
        rng = np.random.default_rng(9)
        q = rng.normal(size=(6, 4))
        k = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 4))
        mask = np.tril(np.ones((6, 6), dtype=bool))
        base = T.masked_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
        v2 = v.copy()
        v2[4] += 10.0
        bumped = T.masked_attention(Tensor(q), Tensor(k), Tensor(v2), mask).data
        np.testing.assert_array_equal(base[:4], bumped[:4])
        assert not np.array_equal(base[4:], bumped[4:])

    def test_single_key_value_returns_value(self):
        rng = np.random.default_rng(10)
        v = rng.normal(size=(1, 5))
        q = rng.normal(size=(3, 5))
        out = T.masked_attention(Tensor(q), Tensor(rng.normal(size=(1, 5))), Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v, (3, 1)), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        k = Tensor(rng.normal(size=(4, 3)))
        v = Tensor(rng.normal(size=(4, 3)))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        q = rng.normal(size=(4, 3))
        err = grad_check(lambda t: T.masked_attention(t, k, v, mask).tanh().sum(), q)
        assert err < 1e-4


class TestCausalConv1d:
    def test_output_lengths_through_default_stack(self):
        rng = np.random.default_rng(12)
        lengths = []
        x = Tensor(rng.normal(size=(32, 2)))
        for ksize, stride, c_in in [(5, 2, 2), (3, 2, 8), (3, 1, 8)]:
            kernel = Tensor(rng.normal(size=(ksize, c_in, 8)))
            x = T.causal_conv1d(x, kernel, stride)
            lengths.append(x.shape[0])
        assert lengths == [16, 8, 8]

    def test_identity_kernel_stride_two_samples_even_indices(self):
        x = np.arange(12, dtype=np.float64).reshape(6, 2)
        kernel = np.eye(2)[None]  # K=1 identity channel map
        out = T.causal_conv1d(Tensor(x), Tensor(kernel), 2)
        np.testing.assert_array_equal(out.data, x[[0, 2, 4]])

    def test_zero_input_gives_zero_output(self):
        rng = np.random.default_rng(13)
        kernel = Tensor(rng.normal(size=(3, 4, 5)))
        out = T.causal_conv1d(Tensor(np.zeros((10, 4))), kernel, 2)
        assert (out.data == 0.0).all()

    def test_future_perturbation_leaves_output_unchanged(self):
        rng = np.random.default_rng(14)
        kernel = Tensor(rng.normal(size=(3, 2, 4)))
        x = rng.normal(size=(16, 2))
        stride = 2
        base = T.causal_conv1d(Tensor(x), kernel, stride).data
        for t in range(16):
            x2 = x.copy()
            x2[t] += 1.0
            bumped = T.causal_conv1d(Tensor(x2), kernel, stride).data
            for j in range(base.shape[0]):
                if t > j * stride:
                    np.testing.assert_array_equal(base[j], bumped[j])

    def test_channel_mismatch_raises(self):
        with pytest.raises(DimensionError):
            T.causal_conv1d(Tensor(np.zeros((8, 3))), Tensor(np.zeros((3, 2, 4))), 1)

    def test_gradients_for_input_and_kernel(self):
        rng = np.random.default_rng(15)
        kernel = rng.normal(size=(3, 2, 3))
        x = rng.normal(size=(2, 7, 2))
        err = grad_check(
            lambda t: T.causal_conv1d(t, Tensor(kernel), 2).tanh().sum(), x
        )
        assert err < 1e-4
        x_const = Tensor(rng.normal(size=(7, 2)))
        err = grad_check(
            lambda t: T.causal_conv1d(x_const, t, 2).tanh().sum(), kernel
        )
        assert err < 1e-4


def test_backward_accumulates_and_doubles_exactly():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    first = x.grad.copy()
    y.backward()
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_narrow_and_concat_roundtrip_gradients():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(3, 6))

    def fn(t):
        left = T.narrow(t, 1, 0, 2)
        right = T.narrow(t, 1, 2, 4)
        return T.concat([right, left], axis=1).tanh().sum()

    assert grad_check(fn, x) < 1e-4


def test_dropout_disabled_at_eval_and_seeded_in_training():
    rng = np.random.default_rng(17)
    x = Tensor(np.ones((4, 4)))
    assert T.dropout(x, 0.5, None, training=False) is x
    a = T.dropout(x, 0.5, np.random.default_rng(3), training=True).data
    b = T.dropout(x, 0.5, np.random.default_rng(3), training=True).data
    np.testing.assert_array_equal(a, b)
    assert (a == 0.0).any() and (a == 2.0).any()
    del rng


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    y.backward()  # silently a no-op
    assert x.grad is None


def test_sinusoidal_table_shape_and_range():
    table = T.sinusoidal_table(32, 256)
    assert table.shape == (32, 256)
    assert np.abs(table).max() <= 1.0
    assert not np.array_equal(table[0], table[1])


class TestAdam:
    def _params(self, rng):
        return {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}

    def test_zero_gradient_fresh_state_leaves_params(self):
        params = self._params(np.random.default_rng(18))
        before = params["w"].data.copy()
        opt = Adam(params, lr=0.1)
        params["w"].grad = np.zeros_like(before)
        opt.step()
        np.testing.assert_array_equal(params["w"].data, before)

    def test_constant_gradient_moves_against_sign(self):
        params = self._params(np.random.default_rng(19))
        before = params["w"].data.copy()
        g = np.sign(np.random.default_rng(20).normal(size=before.shape)) + 0.5
        opt = Adam(params, lr=0.01)
        for _ in range(50):
            params["w"].grad = g.copy()
            opt.step()
        assert (np.sign(params["w"].data - before) == -np.sign(g)).all()

    def test_identical_seeds_produce_identical_params(self):
        def run():
            rng = np.random.default_rng(21)
            params = {"w": Tensor(rng.normal(size=4), requires_grad=True)}
            opt = Adam(params, lr=0.05)
            for _ in range(25):
                opt.zero_grad()
                loss = ((params["w"] - 3.0) ** 2.0).sum()
                loss.backward()
                opt.step()
            return params["w"].data

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)

    def test_non_finite_gradient_aborts_with_name(self):
        params = self._params(np.random.default_rng(22))
        before = params["w"].data.copy()
        opt = Adam(params)
        params["w"].grad = np.full_like(before, np.nan)
        with pytest.raises(NumericalError, match="w"):
            opt.step()
        np.testing.assert_array_equal(params["w"].data, before)

    def test_step_counter_increments(self):
        params = self._params(np.random.default_rng(23))
        opt = Adam(params)
        params["w"].grad = np.ones_like(params["w"].data)
        opt.step()
        opt.step()
        assert opt.step_count == 2
