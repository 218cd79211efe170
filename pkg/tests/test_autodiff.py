import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshtkg import autodiff as ad
from meshtkg.autodiff import Tape, Tensor, backward, grad_check, param


def rnd(gen, *shape):
    return param(gen.standard_normal(shape))


class TestBackwardBasics:
    def test_square_gradient(self):
        x = param(np.array(3.0))
        with Tape() as tape:
            y = ad.mul(x, x)
            backward(y, tape)
        assert x.grad == pytest.approx(6.0)

    def test_sigmoid_at_zero(self):
        x = param(np.array(0.0))
        with Tape() as tape:
            y = ad.sigmoid(x)
            backward(y, tape)
        assert x.grad == pytest.approx(0.25)

    def test_non_scalar_output_rejected(self):
        x = param(np.ones(3))
        with Tape() as tape:
            y = ad.scale(x, 2.0)
            with pytest.raises(ValueError, match="scalar"):
                backward(y, tape)

    def test_detached_tensor_gets_zero_grad(self):
        x = param(np.ones(2))
        z = param(np.ones(2))
        with Tape() as tape:
            y = ad.tensor_sum(ad.mul(x, x))
            _ = ad.scale(z, 3.0)  # on tape, but not an ancestor of y
            backward(y, tape)
        assert np.allclose(z.grad, 0.0)

    def test_fanout_three_uses(self):
        x = param(np.array(2.0))
        with Tape() as tape:
            y = ad.add(ad.add(x, x), x)
            backward(y, tape)
        assert x.grad == pytest.approx(3.0)

    def test_grad_accumulates_across_backward_calls(self):
        x = param(np.array(1.5))
        for _ in range(2):
            with Tape() as tape:
                backward(ad.mul(x, x), tape)
        assert x.grad == pytest.approx(2 * 2 * 1.5)

    def test_composite_matches_finite_differences(self, np_gen):
        a = rnd(np_gen, 4, 3)
        b = rnd(np_gen, 3, 4)

        def fn(a, b):
            return ad.tensor_sum(ad.sigmoid(ad.matmul(a, b)))

        assert grad_check(fn, [a, b], eps=1e-3) < 1e-4


def primitive_cases(gen):
    """(name, fn, inputs) for every differentiable primitive."""
    idx = np.array([0, 1, 1])
    pick_idx = np.array([2, 0])
    return [
        ("add", lambda a, b: ad.tensor_sum(ad.sigmoid(ad.add(a, b))), [rnd(gen, 2, 3), rnd(gen, 2, 3)]),
        ("add_broadcast", lambda a, b: ad.tensor_sum(ad.sigmoid(ad.add(a, b))), [rnd(gen, 2, 3), rnd(gen, 1, 3)]),
        ("sub", lambda a, b: ad.tensor_sum(ad.tanh(ad.sub(a, b))), [rnd(gen, 2, 3), rnd(gen, 2, 3)]),
        ("mul", lambda a, b: ad.tensor_sum(ad.sigmoid(ad.mul(a, b))), [rnd(gen, 2, 3), rnd(gen, 2, 3)]),
        ("mul_broadcast", lambda a, b: ad.tensor_sum(ad.mul(a, b)), [rnd(gen, 2, 1), rnd(gen, 2, 3)]),
        ("scale", lambda a: ad.tensor_sum(ad.scale(a, -1.7)), [rnd(gen, 2, 3)]),
        ("shift", lambda a: ad.tensor_sum(ad.sigmoid(ad.shift(a, 0.3))), [rnd(gen, 2, 3)]),
        ("matmul", lambda a, b: ad.tensor_sum(ad.matmul(a, b)), [rnd(gen, 2, 3), rnd(gen, 3, 2)]),
        ("transpose", lambda a: ad.tensor_sum(ad.sigmoid(ad.transpose(a))), [rnd(gen, 2, 3)]),
        ("reshape", lambda a: ad.tensor_sum(ad.tanh(ad.reshape(a, (3, 2)))), [rnd(gen, 2, 3)]),
        ("gather", lambda a: ad.tensor_sum(ad.sigmoid(ad.gather_rows(a, idx))), [rnd(gen, 4, 3)]),
        ("scatter", lambda a: ad.tensor_sum(ad.sigmoid(ad.scatter_add_rows(a, idx, 4))), [rnd(gen, 3, 3)]),
        ("concat", lambda a, b: ad.tensor_sum(ad.sigmoid(ad.concat([a, b], axis=1))), [rnd(gen, 2, 2), rnd(gen, 2, 3)]),
        ("slice", lambda a: ad.tensor_sum(ad.sigmoid(ad.slice_last(a, 1, 3))), [rnd(gen, 2, 4)]),
        ("pick", lambda a: ad.tensor_sum(ad.sigmoid(ad.pick_last(a, pick_idx))), [rnd(gen, 2, 4)]),
        ("sigmoid", lambda a: ad.tensor_sum(ad.sigmoid(a)), [rnd(gen, 2, 3)]),
        ("tanh", lambda a: ad.tensor_sum(ad.tanh(a)), [rnd(gen, 2, 3)]),
        ("relu", lambda a: ad.tensor_sum(ad.relu(a)), [rnd(gen, 2, 3)]),
        ("leaky_relu", lambda a: ad.tensor_sum(ad.leaky_relu(a, 0.1)), [rnd(gen, 2, 3)]),
        ("rrelu", lambda a: ad.tensor_sum(ad.rrelu(a)), [rnd(gen, 2, 3)]),
        ("softmax", lambda a: ad.tensor_sum(ad.mul(a, ad.softmax(a))), [rnd(gen, 2, 3)]),
        ("log_softmax", lambda a: ad.tensor_sum(ad.mul(a, ad.log_softmax(a))), [rnd(gen, 2, 3)]),
        ("conv1d", lambda x, k: ad.tensor_sum(ad.sigmoid(ad.conv1d(x, k))), [rnd(gen, 2, 2, 5), rnd(gen, 3, 2, 3)]),
        ("mean", lambda a: ad.tensor_mean(ad.sigmoid(a)), [rnd(gen, 2, 3)]),
    ]


def test_every_primitive_passes_grad_check():
    gen = np.random.default_rng(7)
    failures = []
    for name, fn, inputs in primitive_cases(gen):
        err = grad_check(fn, inputs, eps=1e-5)
        if err >= 1e-4:
            failures.append((name, err))
    assert not failures, f"gradient mismatches: {failures}"


class TestGradCheck:
    def test_linear_is_machine_precision(self, np_gen):
        w = rnd(np_gen, 1, 5)
        x = rnd(np_gen, 5, 1)
        err = grad_check(lambda w, x: ad.tensor_sum(ad.matmul(w, x)), [w, x], eps=1e-3)
        assert err < 1e-9

    def test_eval_dropout_is_identity_for_check(self, np_gen):
        x = rnd(np_gen, 3, 3)
        err_drop = grad_check(
            lambda a: ad.tensor_sum(ad.dropout(ad.sigmoid(a), 0.5, None, train=False)), [x]
        )
        err_plain = grad_check(lambda a: ad.tensor_sum(ad.sigmoid(a)), [x])
        assert err_drop == pytest.approx(err_plain)

    def test_nonfinite_reported_with_node(self):
        x = param(np.array([1.0, -1.0]))

        def fn(a):
            return ad.tensor_sum(ad.scale(a, float("inf")))

        with pytest.raises(ad.NumericError):
            grad_check(fn, [x])

    def test_bad_eps(self, np_gen):
        with pytest.raises(ValueError):
            grad_check(lambda a: ad.tensor_sum(a), [rnd(np_gen, 2)], eps=0.0)


class TestOpSemantics:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_sum_to_one(self, seed):
        gen = np.random.default_rng(seed)
        x = Tensor(gen.standard_normal((3, 6)) * 5)
        y = ad.softmax(x).values
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-9)

    def test_dropout_eval_identity(self):
        x = Tensor(np.ones((4, 4)))
        assert ad.dropout(x, 0.5, None, train=False) is x

    def test_dropout_train_statistics(self):
        gen = np.random.default_rng(3)
        x = Tensor(np.ones((200, 200)))
        y = ad.dropout(x, 0.3, gen, train=True).values
        dropped = np.mean(y == 0.0)
        assert dropped == pytest.approx(0.3, abs=0.01)
        survivors = y[y != 0]
        assert np.allclose(survivors, 1.0 / 0.7)
        # expectation preserved
        assert y.mean() == pytest.approx(1.0, abs=0.02)

    def test_no_tape_records_nothing(self):
        x = param(np.ones(3))
        y = ad.scale(x, 2.0)
        assert np.allclose(y.values, 2.0)
        assert ad.active_tape() is None

    def test_conv1d_known_values(self):
        # single batch, 1 input channel, identity-style kernel
        x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        k = Tensor(np.array([[[0.0, 1.0, 0.0]]]))
        y = ad.conv1d(x, k).values
        assert np.allclose(y, [[[1.0, 2.0, 3.0, 4.0]]])
        k2 = Tensor(np.array([[[1.0, 0.0, 0.0]]]))  # shift: y[l] = x[l-1]
        y2 = ad.conv1d(x, k2).values
        assert np.allclose(y2, [[[0.0, 1.0, 2.0, 3.0]]])

    def test_conv1d_rejects_even_width(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = param(np.array([1.0, 2.0]))
        p.grad = np.zeros(2)
        state = ad.init_adam([p], lr=0.01)
        ad.adam_step([p], state)
        assert np.allclose(p.values, [1.0, 2.0])
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = param(np.array(0.0))
        p.grad = np.array(1.0)
        state = ad.init_adam([p], lr=0.001)
        ad.adam_step([p], state)
        assert float(p.values) == pytest.approx(-0.001, rel=1e-6)

    def test_descent_on_quadratic(self):
        p = param(np.array(5.0))
        state = ad.init_adam([p], lr=0.1)
        losses = []
        for _ in range(10):
            with Tape() as tape:
                loss = ad.mul(p, p)
                losses.append(loss.item())
                ad.zero_grads([p])
                backward(loss, tape)
            ad.adam_step([p], state)
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch_rejected(self):
        p = param(np.zeros(3))
        p.grad = np.zeros(4)
        state = ad.init_adam([p])
        with pytest.raises(ValueError, match="shape"):
            ad.adam_step([p], state)
