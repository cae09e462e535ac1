"""Engine checks: primitive rules, reverse sweep, forward-over-reverse nesting."""

import numpy as np
import pytest

from epiforge import autodiff as ad
from epiforge.autodiff import (
    Dual,
    GradientError,
    TangentSeedError,
    Tape,
    TapeError,
    directional_derivative,
    grad,
    jacobian,
)


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_grad_of_square():
    t = Tape()
    x = t.param(3.0, "x")
    (g,) = grad(x * x, [x])
    assert g == pytest.approx(6.0)


def test_grad_of_tanh_at_zero():
    t = Tape()
    x = t.param(0.0, "x")
    (g,) = grad(ad.tanh(x), [x])
    assert g == pytest.approx(1.0)


def test_untouched_param_gets_exact_zero():
    t = Tape()
    x = t.param(3.0, "x")
    y = t.param(np.array([1.0, 2.0]), "y")
    gx, gy = grad(x * x, [x, y])
    assert gx == pytest.approx(6.0)
    assert gy.shape == (2,) and np.all(gy == 0.0)


def test_param_off_tape_raises():
    t1, t2 = Tape(), Tape()
    x = t1.param(1.0, "x")
    y = t2.param(1.0, "y")
    with pytest.raises(TapeError):
        grad(x * x, [y])


def test_mixed_tape_operands_raise():
    t1, t2 = Tape(), Tape()
    x = t1.param(1.0, "x")
    y = t2.param(1.0, "y")
    with pytest.raises(TapeError):
        _ = x + y


def test_nonfinite_gradient_identifies_node():
    t = Tape()
    x = t.param(0.0, "x")
    with np.errstate(divide="ignore", invalid="ignore"):
        loss = ad.log(x * x)  # log(0) -> -inf, gradient blows up
        with pytest.raises(GradientError, match="node #"):
            grad(loss, [x])


def two_layer_tanh_scalar(params, x):
    """Reference net used by the finite-difference oracle: 4-2-1 tanh."""
    w1 = params[:8].reshape(2, 4)
    b1 = params[8:10]
    w2 = params[10:12]
    b2 = params[12]
    h = np.tanh(w1 @ x + b1)
    return np.tanh(w2 @ h + b2)


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=4)
    theta = rng.normal(size=13) * 0.5

    def f(p):
        return two_layer_tanh_scalar(p, x)

    fd = finite_diff_grad(f, theta)

    t = Tape()
    p = t.param(theta, "theta")
    w1 = p[:8].reshape(2, 4)
    b1 = p[8:10]
    w2 = p[10:12]
    b2 = p[12]
    h = ad.tanh(w1 @ t.constant(x) + b1)
    out = ad.tanh((w2 * h).sum() + b2)
    (g,) = grad(out, [p])
    assert np.max(np.abs(g - fd) / (np.abs(fd) + 1e-8)) < 1e-4


def test_directional_derivative_square():
    t = Tape()
    x = t.seed_scalar(3.0)
    y = x * x
    d = directional_derivative(y, x)
    assert d.value == pytest.approx(6.0)


def test_directional_derivative_sin_frequency():
    t = Tape()
    x = t.seed_scalar(0.0)
    y = ad.sin(x * (2 * np.pi))
    d = directional_derivative(y, x)
    assert d.value == pytest.approx(2 * np.pi)


def test_directional_derivative_vectorized_points():
    # one tangent per evaluation point, propagated elementwise
    t = Tape()
    pts = np.array([0.0, 0.5, 1.0])
    x = t.seed_scalar(pts)
    y = x * x * x
    d = directional_derivative(y, x)
    assert np.allclose(d.value, 3 * pts**2)


def test_multiple_seeds_ambiguous():
    t = Tape()
    x = t.seed_scalar(1.0)
    y = t.seed_scalar(2.0)
    out = x * y
    with pytest.raises(TangentSeedError):
        directional_derivative(out, x)


def test_nested_mixed_partial_of_bilinear():
    # d/dw [ d/dt (w * t) ] = 1 for any w, t
    for w0, t0 in [(0.7, 0.3), (-2.0, 5.0), (3.14, -0.1)]:
        tape = Tape()
        w = tape.param(w0, "w")
        tt = tape.seed_scalar(t0)
        f = tt * Dual(w, None)
        dfdt = directional_derivative(f, tt)
        (g,) = grad(dfdt, [w])
        assert g == pytest.approx(1.0)


def test_nesting_soundness_against_analytic():
    # f(w, t) = w * g(t) with g = sin,  d/dw[df/dt] = g'(t) = cos(t)
    t0 = 0.8
    tape = Tape()
    w = tape.param(2.5, "w")
    tt = tape.seed_scalar(t0)
    f = Dual(w, None) * ad.sin(tt)
    dfdt = directional_derivative(f, tt)
    (g,) = grad(dfdt, [w])
    assert abs(g - np.cos(t0)) < 1e-10


def test_jacobian_linear_map_is_exact():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    t = Tape()
    x = t.seed_vector(np.array([0.3, -0.7]))
    y = x @ t.constant(A.T)
    J = jacobian(y, x)
    assert np.array_equal(J.value, A)


def test_jacobian_identity_map():
    t = Tape()
    x = t.seed_vector(np.array([1.0, 2.0, 3.0]))
    J = jacobian(x, x)
    assert np.array_equal(J.value, np.eye(3))


def test_jacobian_three_layer_tanh_matches_finite_differences():
    rng = np.random.default_rng(11)
    d_e, d_s = 4, 3
    ws = [rng.normal(size=(d_e, 5)) * 0.6, rng.normal(size=(5, 5)) * 0.6, rng.normal(size=(5, d_s)) * 0.6]

    def f(x):
        h = np.tanh(x @ ws[0])
        h = np.tanh(h @ ws[1])
        return h @ ws[2]

    x0 = rng.normal(size=d_e)
    h = 1e-5
    fd = np.zeros((d_s, d_e))
    for i in range(d_e):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        fd[:, i] = (f(xp) - f(xm)) / (2 * h)

    t = Tape()
    x = t.seed_vector(x0)
    hh = ad.tanh(x @ t.constant(ws[0]))
    hh = ad.tanh(hh @ t.constant(ws[1]))
    y = hh @ t.constant(ws[2])
    J = jacobian(y, x)
    assert np.max(np.abs(J.value - fd) / (np.abs(fd) + 1e-8)) < 1e-4


def test_jacobian_rows_remain_differentiable():
    # minimize over a parameter that scales the map: d/dc J(c*x)[0,0] = 1
    t = Tape()
    c = t.param(2.0, "c")
    x = t.seed_vector(np.array([1.0, 2.0]))
    y = x * Dual(c, None)
    J = jacobian(y, x)
    (g,) = grad(J[0, 0], [c])
    assert g == pytest.approx(1.0)


def random_scalar_graph(depth, rng):
    """Random scalar->scalar composition used for the duality property."""
    unary = [ad.tanh, ad.sigmoid, ad.sin, ad.cos, ad.exp]
    ops = [rng.choice(unary) for _ in range(depth)]
    shifts = rng.normal(size=depth) * 0.5
    scales = rng.normal(size=depth) * 0.8 + 1.0

    def build(x):
        for op, a, b in zip(ops, shifts, scales):
            x = op(x * float(b) + float(a))
        return x

    return build


def test_forward_reverse_duality_on_random_graphs():
    rng = np.random.default_rng(42)
    for _ in range(40):
        depth = int(rng.integers(1, 9))
        f = random_scalar_graph(depth, rng)
        x0 = float(rng.normal())

        fwd_tape = Tape()
        x = fwd_tape.seed_scalar(x0)
        d_fwd = directional_derivative(f(x), x).value

        rev_tape = Tape()
        xr = rev_tape.param(x0, "x")
        (d_rev,) = grad(f(xr), [xr])
        assert np.allclose(d_fwd, d_rev, rtol=1e-12, atol=1e-12)


def test_grad_linearity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x0 = rng.normal(size=5)
        t = Tape()
        x = t.param(x0, "x")
        la = (x * x).sum()
        lb = ad.tanh(x).sum()
        (g_sum,) = grad(la + lb, [x])
        (ga,) = grad(la, [x])
        (gb,) = grad(lb, [x])
        assert np.allclose(g_sum, ga + gb, rtol=1e-12, atol=1e-12)


def test_fanout_accumulates_additively():
    t = Tape()
    x = t.param(2.0, "x")
    y = x * x + x * 3.0  # x used twice
    (g,) = grad(y, [x])
    assert g == pytest.approx(2 * 2.0 + 3.0)


def test_values_match_plain_numpy():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    t = Tape()
    na = t.param(a, "a")
    nb = t.param(b, "b")
    out = ad.tanh(na @ nb).sum()
    expect = np.tanh(a @ b).sum()
    assert out.value == pytest.approx(expect, abs=0)


def test_concat_and_stack_backward():
    t = Tape()
    x = t.param(np.array([1.0, 2.0]), "x")
    y = t.param(np.array([3.0]), "y")
    c = ad.concat([x, y])
    (gx, gy) = grad((c * c).sum(), [x, y])
    assert np.allclose(gx, 2 * np.array([1.0, 2.0]))
    assert np.allclose(gy, 2 * np.array([3.0]))

    t2 = Tape()
    x2 = t2.param(np.array([1.0, 2.0]), "x")
    rows = [x2 * float(i) for i in range(3)]
    s = ad.stack(rows)
    (g,) = grad(s.sum(), [x2])
    assert np.allclose(g, (0 + 1 + 2) * np.ones(2))


def test_broadcast_backward_sums_over_expanded_axes():
    t = Tape()
    b = t.param(np.array([1.0, 2.0, 3.0]), "b")
    m = t.constant(np.ones((4, 3)))
    out = (m + b).sum()
    (g,) = grad(out, [b])
    assert np.allclose(g, 4.0 * np.ones(3))
