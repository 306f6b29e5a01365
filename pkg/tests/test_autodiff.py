import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import rel_err
from msgl import autodiff as ad
from msgl.errors import ContractError, DimensionError, NumericError


def param(x, name=None):
    return ad.Tensor(np.asarray(x, float), requires_grad=True, name=name)


def test_matmul_hand_value():
    out = ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_elementwise_identities():
    assert ad.sigmoid(0.0).data == 0.5
    assert ad.tanh(0.0).data == 0.0
    np.testing.assert_allclose(ad.softmax_last_axis([0.0, 0.0, 0.0]).data, [1 / 3] * 3, rtol=0, atol=1e-16)


def test_matmul_shape_error_names_op():
    with pytest.raises(DimensionError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_broadcast_error():
    with pytest.raises(DimensionError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((4,)))


def test_grad_of_sum_is_ones(rng):
    x = param(rng.normal(size=(3, 4, 2)))
    with ad.Tape() as tape:
        loss = ad.sum(x)
    np.testing.assert_array_equal(ad.backward(tape, loss)[x.id], np.ones((3, 4, 2)))


def test_grad_of_mean_square():
    x = param([2.0, 4.0])
    with ad.Tape() as tape:
        loss = ad.mean(ad.hadamard(x, x))
    np.testing.assert_allclose(ad.backward(tape, loss)[x.id], [2.0, 4.0])


def test_non_scalar_loss_rejected():
    x = param(np.ones(3))
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ContractError):
        ad.backward(tape, y)


def test_loss_not_on_tape_rejected():
    x = param(np.ones(3))
    with ad.Tape():
        loss = ad.sum(x)
    with ad.Tape() as other:
        ad.sum(x)
    with pytest.raises(ContractError):
        ad.backward(other, loss)


def test_unreached_leaf_gets_zeros():
    x, y = param(np.ones(2)), param(np.ones(3))
    with ad.Tape() as tape:
        loss = ad.sum(x)
        ad.sum(y)
    g = ad.backward(tape, loss)
    np.testing.assert_array_equal(g[y.id], np.zeros(3))


def test_backward_visits_shared_input_once_per_use():
    x = param([3.0])
    with ad.Tape() as tape:
        loss = ad.sum(ad.add(x, ad.add(x, x)))
    np.testing.assert_array_equal(ad.backward(tape, loss)[x.id], [3.0])


def test_tape_records_topological_order(rng):
    x = param(rng.normal(size=(2, 2)))
    with ad.Tape() as tape:
        loss = ad.sum(ad.tanh(ad.matmul(x, x)))
    seen = {x.id}
    for node in tape.nodes:
        assert all(t.id in seen or not t.requires_grad for t in node.inputs)
        seen.add(node.output.id)
    assert loss.id in seen


def test_no_tape_no_recording():
    x = param(np.ones(2))
    y = ad.sum(x)
    assert y.requires_grad and ad.active_tape() is None


def test_strict_mode_catches_nan():
    with pytest.raises(NumericError):
        ad.add(np.array([np.nan]), np.array([1.0]))
    with ad.strict(False):
        assert np.isnan(ad.add(np.array([np.nan]), np.array([1.0])).data[0])


def test_fd_of_sum_and_square():
    np.testing.assert_allclose(ad.finite_difference_grad(lambda v: v.sum(), np.zeros((2, 3))),
                               np.ones((2, 3)), atol=1e-9)
    g = ad.finite_difference_grad(lambda v: (v ** 2).sum(), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_step_must_be_positive():
    with pytest.raises(ContractError):
        ad.finite_difference_grad(lambda v: v.sum(), np.zeros(2), 0.0)


def _fd_check(build, leaves, tol=1e-4):
    with ad.Tape() as tape:
        loss = build()
    g = ad.backward(tape, loss, wrt=leaves)
    for t in leaves:
        orig = t.data.copy()

        def f(v, t=t):
            t.data = v
            return build()

        fd = ad.finite_difference_grad(f, orig)
        t.data = orig
        assert rel_err(g[t.id], fd) < tol, t.name


def test_three_layer_composition_matches_fd(rng):
    x = param(rng.normal(size=(5, 4)), "x")
    W1, W2, W3 = (param(rng.normal(size=s) * 0.5, n) for s, n in
                  [((4, 6), "W1"), ((6, 6), "W2"), ((6, 3), "W3")])
    b = param(rng.normal(size=6), "b")

    def build():
        h1 = ad.tanh(ad.add(ad.matmul(x, W1), b))
        h2 = ad.sigmoid(ad.matmul(ad.relu(h1), W2))
        h3 = ad.softmax_last_axis(ad.matmul(ad.hadamard(h2, h1), W3))
        return ad.mean(ad.concat_last_axis(h3, ad.scale(h2, 0.3)))

    _fd_check(build, [x, W1, W2, W3, b])


def test_shape_ops_match_fd(rng):
    x = param(rng.normal(size=(2, 3, 4)), "x")
    y = param(rng.normal(size=(2, 3, 4)), "y")

    def build():
        z = ad.transpose(ad.reshape(x, (2, 3, 2, 2)), (0, 2, 1, 3))
        s = ad.stack([ad.getitem(z, (slice(None), 0)), ad.getitem(z, (slice(None), 1))], axis=1)
        return ad.sum(ad.hadamard(ad.reshape(s, (2, 3, 4)), ad.subtract(y, ad.tanh(x))))

    _fd_check(build, [x, y])


def test_masked_mse_grad_and_empty_mask(rng):
    p = param(rng.normal(size=(4, 3)), "p")
    target = rng.normal(size=(4, 3))
    mask = rng.random((4, 3)) < 0.5
    mask[0, 0] = True
    _fd_check(lambda: ad.masked_mse(p, target, mask), [p])
    assert ad.masked_mse(p, target, np.zeros((4, 3), bool)).data == 0.0


def test_batchnorm_training_grad_and_running_stats(rng):
    x = param(rng.normal(size=(6, 5, 4)) * 2 + 1, "x")
    gamma = param(rng.normal(size=4), "gamma")
    beta = param(rng.normal(size=4), "beta")
    w = rng.normal(size=(6, 5, 4))

    def build():
        return ad.sum(ad.hadamard(ad.batchnorm(x, gamma, beta, None, True), w))

    _fd_check(build, [x, gamma, beta])
    st_ = ad.BatchNormState(4)
    ad.batchnorm(x, gamma, beta, st_, True, momentum=0.9)
    flat = x.data.reshape(-1, 4)
    np.testing.assert_allclose(st_.running_mean, 0.1 * flat.mean(0))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * flat.var(0, ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.normal(size=(3, 2, 4))
    st_ = ad.BatchNormState(4)
    st_.running_mean[:] = 1.0
    st_.running_var[:] = 4.0
    out = ad.batchnorm(x, np.ones(4), np.zeros(4), st_, False, eps=0.0)
    np.testing.assert_allclose(out.data, (x - 1.0) / 2.0)


def test_dropout_eval_identity_and_train_scaling(rng):
    x = np.ones((1000,))
    np.testing.assert_array_equal(ad.dropout(x, 0.5, training=False).data, x)
    y = ad.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    with pytest.raises(ContractError):
        ad.dropout(x, 1.0, np.random.default_rng(0))


def test_dropout_grad_uses_same_mask(rng):
    x = param(rng.normal(size=(20,)))
    with ad.Tape() as tape:
        y = ad.dropout(x, 0.5, np.random.default_rng(3))
        loss = ad.sum(y)
    g = ad.backward(tape, loss)[x.id]
    np.testing.assert_array_equal(g, (y.data != 0) * 2.0)


def test_rgrn_sequence_matches_fd(rng):
    T, n, F, h = 4, 3, 2, 3
    X = param(rng.normal(size=(T, n, F)), "X")
    Wx, Wh = param(rng.normal(size=(F, 4 * h)) * .5, "Wx"), param(rng.normal(size=(h, 4 * h)) * .5, "Wh")
    b, Wg, bg = param(rng.normal(size=4 * h) * .3, "b"), param(rng.normal(size=(h, h)) * .5, "Wg"), param(rng.normal(size=h) * .3, "bg")
    A = np.array([[0, 0, 0], [1.0, 0, 0], [0.5, 0.5, 0]])
    rmask = (rng.random((n, h)) > 0.3) / 0.7
    w = rng.normal(size=(T, n, h))

    def build():
        return ad.sum(ad.hadamard(ad.rgrn_sequence(X, Wx, Wh, b, Wg, bg, A, rmask), w))

    _fd_check(build, [X, Wx, Wh, b, Wg, bg])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(a):
    s = ad.softmax_last_axis(a).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-5, 5)),
       st.floats(-3, 3))
def test_add_then_sum_gradient_is_ones(a, c):
    x = param(a)
    with ad.Tape() as tape:
        loss = ad.sum(ad.add(x, c))
    np.testing.assert_array_equal(ad.backward(tape, loss)[x.id], np.ones_like(a))
