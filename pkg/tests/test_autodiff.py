import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foresight import autodiff as ad
from foresight.autodiff import ShapeError, Tape, TapeExhausted

from conftest import central_difference, rel_err

A = np.array([[2.0, 1.0], [1.0, 3.0]])


def quad_loss(vs, batch):
    (t,) = vs
    return 0.5 * ad.sum(t * ad.matmul(ad.constant(batch), t.reshape(2, 1)).reshape(2))


# ---------------------------------------------------------------- forward values


def test_record_add_matmul_relu():
    assert np.array_equal(ad.record("add", [1, 2], [3, 4]).value, [4, 6])
    m = np.arange(6.0).reshape(2, 3)
    x = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(ad.record("matmul", m, x).value, m @ x)
    assert np.array_equal(ad.record("relu", [-1.0, 0.0, 2.0]).value, [0, 0, 2])


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.record("softsign", [1.0])


def test_shape_errors_name_the_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        ad.add(np.ones(3), np.ones(4))


# ------------------------------------------------------------------ gradients


def test_product_rule_and_identity_hessian():
    tape = Tape()
    t1, t2 = tape.leaf(2.0), tape.leaf(3.0)
    assert [float(g) for g in ad.gradient(t1 * t2, [t1, t2])] == [3.0, 2.0]
    tape = Tape()
    t = tape.leaf([3.0, 4.0])
    (g,) = ad.gradient(0.5 * (t * t).sum(), [t])
    assert np.array_equal(g, [3.0, 4.0])


def test_quadratic_gradient_oracle():
    tape = Tape()
    t = tape.leaf([1.0, 1.0])
    (g,) = ad.gradient(quad_loss([t], A), [t])
    assert np.allclose(g, A @ [1.0, 1.0])


def test_stop_gradient():
    tape = Tape()
    t = tape.leaf(5.0)
    (g,) = ad.gradient(t * ad.stop_gradient(t), [t])
    assert g == pytest.approx(5.0)
    tape = Tape()
    t = tape.leaf(5.0)
    (g,) = ad.gradient(ad.stop_gradient(t * t) + 0.0 * t, [t])
    assert g == 0.0


def test_unreachable_target_gets_zero():
    tape = Tape()
    a, b = tape.leaf([1.0, 2.0]), tape.leaf([3.0])
    ga, gb = ad.gradient((a * a).sum(), [a, b])
    assert np.array_equal(gb, [0.0]) and np.array_equal(ga, [2.0, 4.0])


def test_double_backward_cubic():
    tape = Tape()
    x = tape.leaf(1.5)
    (g,) = ad.gradient(x * x * x, [x], create_graph=True)
    (h,) = ad.gradient(g, [x])
    assert g.value == pytest.approx(3 * 1.5**2)
    assert h == pytest.approx(6 * 1.5)


def _fd_case(build, shapes, rng, positive=False):
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    w = rng.normal(size=build(*[ad.constant(x) for x in xs]).shape)

    def scalar(*vals):
        return float(np.sum(build(*[ad.constant(v) for v in vals]).value * w))

    tape = Tape()
    leaves = [tape.leaf(x) for x in xs]
    out = build(*leaves)
    grads = ad.gradient(ad.sum(ad.mul(out, w)), leaves)
    for i, (x, g) in enumerate(zip(xs, grads)):
        def f(v, i=i):
            vals = list(xs)
            vals[i] = v
            return scalar(*vals)

        fd = central_difference(f, x, eps=1e-6)
        assert rel_err(g, fd) < 1e-5, (i, g, fd)


CASES = [
    (lambda a, b: ad.add(a, b), [(3, 4), (4,)], False),
    (lambda a, b: ad.sub(a, b), [(3, 1), (1, 4)], False),
    (lambda a, b: ad.mul(a, b), [(2, 3), (2, 3)], False),
    (lambda a, b: ad.div(a, b), [(2, 3), (3,)], True),
    (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    (lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
    (lambda a: ad.tanh(a), [(5,)], False),
    (lambda a: ad.exp(a), [(2, 3)], False),
    (lambda a: ad.log(a), [(4,)], True),
    (lambda a: ad.sum(a, axis=1, keepdims=True), [(3, 4)], False),
    (lambda a: ad.mean(a, axis=0), [(3, 4)], False),
    (lambda a: ad.broadcast_to(a, (3, 4)), [(1, 4)], False),
    (lambda a: ad.sum_to(a, (1, 4)), [(3, 4)], False),
    (lambda a: ad.gather(a, [2, 0, 1]), [(3, 4)], False),
    (lambda a: ad.neg(a), [(3,)], False),
    (lambda a: ad.im2col(a, 3, 3, stride=1, pad=1), [(2, 2, 4, 4)], False),
    (lambda a, w, b: ad.conv2d(a, w, b, stride=2, pad=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)], False),
]


@pytest.mark.parametrize("case", range(len(CASES)))
def test_primitive_gradients_match_finite_differences(case):
    build, shapes, positive = CASES[case]
    rng = np.random.default_rng(case)
    for _ in range(3):
        _fd_case(build, shapes, rng, positive)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(0)
    x = rng.normal(size=20)
    x[np.abs(x) < 0.05] = 0.3
    tape = Tape()
    v = tape.leaf(x)
    (g,) = ad.gradient(ad.relu(v).sum(), [v])
    assert np.array_equal(g, (x > 0).astype(float))


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv2d(x, w, b, stride=2, pad=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 6))
    col = ad.im2col(x, 3, 2, stride=1, pad=1).value
    y = rng.normal(size=col.shape)
    back = ad.col2im(y, x.shape, 3, 2, stride=1, pad=1).value
    assert np.vdot(col, y) == pytest.approx(np.vdot(x, back), rel=1e-12)


# ------------------------------------------------------------- Hessian-gradient


def test_hvp_quadratic_oracle():
    hg, g, loss = ad.hessian_gradient_product(quad_loss, [np.array([1.0, 1.0])], A, return_grad=True)
    assert np.allclose(g[0], [3.0, 4.0])
    assert np.allclose(hg[0], [10.0, 15.0])
    assert loss == pytest.approx(3.5)


def test_hvp_identity_and_linear():
    ident = lambda vs, b: 0.5 * (vs[0] * vs[0]).sum()
    assert np.allclose(ad.hessian_gradient_product(ident, [np.array([3.0, 4.0])], None)[0], [3.0, 4.0])
    lin = lambda vs, b: (vs[0] * np.array([1.0, -2.0, 0.5])).sum()
    assert np.array_equal(ad.hessian_gradient_product(lin, [np.ones(3)], None)[0], np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 50), seed=st.integers(0, 2**31 - 1))
def test_hvp_random_quadratics(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n))
    a = 0.5 * (m + m.T)
    theta = rng.normal(size=n)
    (hg,) = ad.hessian_gradient_product(
        lambda vs, b: 0.5 * ad.sum(vs[0] * ad.matmul(ad.constant(b), vs[0].reshape(n, 1)).reshape(n)), [theta], a
    )
    expected = a @ (a @ theta)
    assert np.max(np.abs(hg - expected)) <= 1e-10 * max(1.0, np.max(np.abs(expected)))


def test_hvp_non_finite_loss_names_batch():
    class B:
        fingerprint = "abc123"

    bad = lambda vs, b: ad.log(vs[0] - 10.0).sum()
    with pytest.raises(ad.NumericalError, match="abc123"):
        ad.hessian_gradient_product(bad, [np.ones(2)], B())


# ------------------------------------------------------------------ tape rules


def test_tape_budget():
    tape = Tape(max_nodes=5)
    x = tape.leaf(1.0)
    with pytest.raises(TapeExhausted):
        for _ in range(10):
            x = x + 1.0


def test_tape_is_owned_by_one_thread():
    tape = Tape()
    errors = []

    def worker():
        try:
            tape.leaf(1.0)
        except RuntimeError as exc:
            errors.append(exc)

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert errors


def test_no_record_builds_no_nodes():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    n = len(tape)
    with ad.no_record():
        y = x * x
    assert len(tape) == n and not y.requires_grad


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_gradient_is_ones(x):
    tape = Tape()
    v = tape.leaf(x)
    (g,) = ad.gradient(ad.sum(ad.tanh(v) * 0.0 + v), [v])
    assert np.array_equal(g, np.ones_like(x))
