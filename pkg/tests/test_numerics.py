"""Kernel-level tests: forward values, finite-difference gradients, Adam."""

import numpy as np
import pytest

from nerfedit import numerics as nm
from util import check_grads, fd_grad, rel_err


@pytest.fixture(autouse=True)
def finite_checks():
    nm.set_check_finite(True)
    yield
    nm.set_check_finite(False)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nm.matmul(nm.tensor(np.eye(2)), nm.tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_projector():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = nm.matmul(nm.tensor(p), nm.tensor(b))
    assert np.array_equal(out.data, np.array([[5.0, 6.0], [0.0, 0.0]]))


def test_matmul_against_triple_loop():
    rg = nm.rng(7)
    a = rg.normal(size=(3, 4))
    b = rg.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    out = nm.matmul(nm.tensor(a), nm.tensor(b))
    assert rel_err(out.data, ref) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(nm.ShapeError):
        nm.matmul(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# unary kernels
# ---------------------------------------------------------------------------

def test_unary_values():
    assert nm.map_unary("sigmoid", nm.tensor(0.0)).item() == 0.5
    assert nm.map_unary("sin", nm.tensor(0.0)).item() == 0.0
    assert abs(nm.map_unary("softplus", nm.tensor(0.0)).item() - np.log(2)) < 1e-12


def test_sin_grad_at_zero():
    with nm.tape():
        x = nm.parameter(np.array(0.0))
        nm.backward(nm.map_unary("sin", x))
    assert x.grad.item() == 1.0


def test_abs_grad_zero_at_tie():
    with nm.tape():
        x = nm.parameter(np.array([0.0, -1.0, 2.0]))
        nm.backward(nm.reduce("sum", nm.map_unary("abs", x)))
    assert np.array_equal(x.grad.data, [0.0, -1.0, 1.0])


UNARY_KINDS = ["sin", "cos", "sigmoid", "exp", "abs", "leaky_relu", "softplus",
               "sqrt", "log", "neg", "square"]


@pytest.mark.parametrize("kind", UNARY_KINDS)
def test_unary_gradcheck(kind):
    rg = nm.rng(hash(kind) % 2**31)
    worst = 0.0
    for _ in range(100):
        x = rg.normal(size=(3, 5))
        if kind in ("sqrt", "log"):
            x = np.abs(x) + 0.5
        if kind == "abs":
            x = x + np.where(np.abs(x) < 0.05, 0.1, 0.0)  # keep away from kink
        if kind == "leaky_relu":
            x = x + np.where(np.abs(x) < 0.05, 0.1, 0.0)

        def build(ts):
            return nm.reduce("sum", nm.combine("mul", nm.map_unary(kind, ts[0]),
                                               nm.tensor(np.linspace(0.5, 1.5, 15).reshape(3, 5))))

        err, _, _ = check_grads(build, [x])
        worst = max(worst, err)
    assert worst < 1e-4, f"{kind}: worst rel err {worst}"


# ---------------------------------------------------------------------------
# combine + broadcasting
# ---------------------------------------------------------------------------

def test_add_zero_is_identity():
    x = nm.tensor(np.array([1.5, -2.0]))
    out = nm.combine("add", x, nm.tensor(np.zeros(2)))
    assert np.array_equal(out.data, x.data)


def test_mul_elementwise():
    out = nm.combine("mul", nm.tensor([1.0, 2.0]), nm.tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [3.0, 8.0])


def test_broadcast_add_matches_tiling():
    rg = nm.rng(3)
    a = rg.normal(size=(2, 3))
    b = rg.normal(size=(3,))
    out = nm.combine("add", nm.tensor(a), nm.tensor(b))
    tiled = a + np.tile(b, (2, 1))
    assert np.array_equal(out.data, tiled)


def test_non_broadcastable_raises():
    with pytest.raises(nm.ShapeError):
        nm.combine("add", nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((2,))))


def test_div_by_exact_zero_raises():
    with pytest.raises(nm.NumericError):
        nm.combine("div", nm.tensor([1.0]), nm.tensor([0.0]))


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((2, 3), (3,)), ((4, 1), (4, 5))])
def test_combine_gradcheck(kind, shapes):
    rg = nm.rng(11)
    for _ in range(25):
        a = rg.normal(size=shapes[0])
        b = rg.normal(size=shapes[1])
        if kind == "div":
            b = b + np.sign(b) * 1.0  # keep divisor away from zero

        def build(ts):
            return nm.reduce("mean", nm.map_unary("square", nm.combine(kind, ts[0], ts[1])))

        err, _, _ = check_grads(build, [a, b])
        assert err < 1e-4


# ---------------------------------------------------------------------------
# reduce
# ---------------------------------------------------------------------------

def test_reduce_values():
    assert nm.reduce("mean", nm.tensor([1.0, 2.0, 3.0])).item() == 2.0
    assert nm.reduce("sum", nm.tensor(np.zeros(7))).item() == 0.0


def test_reduce_invalid_axis():
    with pytest.raises(nm.ShapeError):
        nm.reduce("sum", nm.tensor(np.zeros((2, 2))), axes=(5,))


def test_grad_of_sum_of_squares():
    with nm.tape():
        x = nm.parameter(np.array([1.0, -2.0]))
        nm.backward(nm.reduce("sum", nm.combine("mul", x, x)))
    assert np.array_equal(x.grad.data, [2.0, -4.0])


@pytest.mark.parametrize("kind", ["sum", "mean"])
@pytest.mark.parametrize("axes", [None, 0, (1,), (0, 2)])
def test_reduce_gradcheck(kind, axes):
    rg = nm.rng(5)
    x = rg.normal(size=(2, 3, 4))
    weights = rg.normal(size=())

    def build(ts):
        r = nm.reduce(kind, ts[0], axes=axes)
        return nm.reduce("sum", nm.map_unary("square", r))

    err, _, _ = check_grads(build, [x])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def test_structural_gradcheck():
    rg = nm.rng(13)
    a = rg.normal(size=(2, 3, 4))
    b = rg.normal(size=(2, 1, 4))

    def build(ts):
        x = nm.transpose(ts[0], (1, 0, 2))
        x = nm.reshape(x, (3, 8))
        y = nm.broadcast_to(ts[1], (2, 3, 4))
        y = nm.reshape(nm.transpose(y, (1, 0, 2)), (3, 8))
        z = nm.concat([x, y], axis=1)
        z = nm.slice_(z, (slice(0, 2), slice(1, 9)))
        z = nm.cumsum(z, 1)
        z = nm.flip(z, 0)
        return nm.reduce("mean", nm.map_unary("square", z))

    err, _, _ = check_grads(build, [a, b])
    assert err < 1e-4


def test_im2col_col2im_adjoint_gradcheck():
    rg = nm.rng(17)
    x = rg.normal(size=(2, 3, 6, 6))
    w = rg.normal(size=(4, 3, 3, 3))

    def build(ts):
        cols = nm.im2col(ts[0], 3, 3, stride=2, pad=1)
        y = nm.matmul(nm.reshape(ts[1], (4, 27)), cols)
        return nm.reduce("mean", nm.map_unary("square", y))

    err, _, _ = check_grads(build, [x, w])
    assert err < 1e-4


def test_affine_gradcheck():
    rg = nm.rng(19)
    x = rg.normal(size=(5, 3))
    w = rg.normal(size=(3, 4))
    b = rg.normal(size=(4,))

    def build(ts):
        return nm.reduce("mean", nm.map_unary("square", nm.affine(*ts)))

    err, _, _ = check_grads(build, [x, w, b])
    assert err < 1e-4


def test_film_sin_matches_composed_ops_and_gradcheck():
    rg = nm.rng(23)
    pre = rg.normal(size=(6, 4))
    alpha = rg.normal(size=(4,)) + 1.5
    beta = rg.normal(size=(4,))

    fused = nm.film_sin(nm.tensor(pre), nm.tensor(alpha), nm.tensor(beta))
    composed = np.sin(pre * alpha + beta)
    assert rel_err(fused.data, composed) < 1e-12

    def build(ts):
        return nm.reduce("mean", nm.map_unary("square", nm.film_sin(*ts)))

    err, _, _ = check_grads(build, [pre, alpha, beta])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# backward: composites, linearity, determinism
# ---------------------------------------------------------------------------

def test_backward_requires_scalar():
    with nm.tape():
        x = nm.parameter(np.zeros(3))
        y = nm.combine("add", x, 1.0)
        with pytest.raises(nm.ShapeError):
            nm.backward(y)


def test_composite_mlp_gradcheck():
    rg = nm.rng(29)
    for _ in range(5):
        x = rg.normal(size=(4, 6))
        w1 = rg.normal(size=(6, 8)) * 0.5
        b1 = rg.normal(size=(8,)) * 0.1
        w2 = rg.normal(size=(8, 1)) * 0.5

        def build(ts):
            h = nm.map_unary("leaky_relu", nm.affine(ts[0], ts[1], ts[2]))
            out = nm.matmul(h, ts[3])
            return nm.reduce("mean", nm.map_unary("sigmoid", out))

        err, _, _ = check_grads(build, [x, w1, b1, w2])
        assert err < 1e-4


def test_backward_linearity():
    rg = nm.rng(31)
    x0 = rg.normal(size=(3, 3))

    def losses(x):
        l1 = nm.reduce("sum", nm.map_unary("square", x))
        l2 = nm.reduce("mean", nm.map_unary("sigmoid", x))
        return l1, l2

    with nm.tape():
        x = nm.parameter(x0.copy())
        l1, l2 = losses(x)
        nm.backward(nm.combine("add", l1, l2))
    g_sum = x.grad.data.copy()

    with nm.tape():
        x = nm.parameter(x0.copy())
        l1, l2 = losses(x)
        nm.backward(l1)
        nm.backward(l2)
    g_parts = x.grad.data.copy()

    assert np.max(np.abs(g_sum - g_parts)) < 1e-12


def test_leaves_off_path_get_no_grad():
    with nm.tape():
        x = nm.parameter(np.array(1.0))
        y = nm.parameter(np.array(2.0))
        z = nm.combine("mul", x, 3.0)
        nm.backward(z)
    assert x.grad.item() == 3.0
    assert y.grad is None


def test_forward_backward_determinism():
    def run():
        rg = nm.rng(1234)
        with nm.tape():
            x = nm.parameter(rg.normal(size=(8, 8)))
            w = nm.parameter(rg.normal(size=(8, 8)))
            h = nm.map_unary("sin", nm.matmul(x, w))
            loss = nm.reduce("mean", nm.map_unary("square", h))
            nm.backward(loss)
            return loss.item(), x.grad.data.copy(), w.grad.data.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_second_order_through_piecewise_linear_net():
    rg = nm.rng(37)
    W = nm.parameter(rg.normal(size=(5, 1)))
    x = nm.parameter(rg.normal(size=(2, 5)))
    with nm.tape():
        h = nm.map_unary("leaky_relu", nm.matmul(x, W))
        out = nm.reduce("sum", h)
        g = nm.grad_of(out, x, create_graph=True)
        r1 = nm.reduce("sum", nm.combine("mul", g, g))
        nm.backward(r1)
    mask = np.where((x.data @ W.data) > 0, 1.0, 0.2)
    r1_ref = float(np.sum((mask * W.data.T) ** 2))
    dW_ref = 2 * W.data * np.sum(mask ** 2)
    assert abs(r1.item() - r1_ref) < 1e-10
    assert rel_err(W.grad.data, dW_ref) < 1e-10


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = nm.parameter(np.array([1.0, -2.0]))
    st = nm.AdamState.for_params([p], lr=0.1)
    before = p.data.copy()
    nm.adam_step([p], [np.zeros(2)], st)
    assert np.array_equal(p.data, before)
    assert st.t == 1


def test_adam_first_step_is_lr_sized():
    # scalar param, constant grad 1, lr 0.1: bias-corrected step is
    # -lr * 1 / (1 + eps), i.e. -0.1 slightly shrunk by eps.
    p = nm.parameter(np.array(0.0))
    st = nm.AdamState.for_params([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    nm.adam_step([p], [np.array(1.0)], st)
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(p.data - expected) < 1e-12


def test_adam_matches_scalar_hand_evaluation():
    lr, b1, b2, eps = 0.05, 0.9, 0.99, 1e-8
    p = nm.parameter(np.array(0.3))
    st = nm.AdamState.for_params([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
    m = v = 0.0
    ref = 0.3
    rg = nm.rng(41)
    for t in range(1, 8):
        g = float(rg.normal())
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        nm.adam_step([p], [np.array(g)], st)
        assert abs(p.data - ref) < 1e-12


def test_adam_two_runs_bit_identical():
    def run():
        rg = nm.rng(99)
        p = nm.parameter(np.zeros(4))
        st = nm.AdamState.for_params([p], lr=0.01, beta1=0.5, beta2=0.9)
        for _ in range(20):
            nm.adam_step([p], [rg.normal(size=4)], st)
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    p = nm.parameter(np.zeros(3))
    st = nm.AdamState.for_params([p])
    with pytest.raises(ValueError):
        nm.adam_step([p], [np.zeros(4)], st)


# ---------------------------------------------------------------------------
# per-kernel FD sweep (the module-level gradient property)
# ---------------------------------------------------------------------------

def test_gradient_property_all_kernels_100_probes():
    """Every differentiable kernel passes FD checks over >=100 random inputs."""
    rg = nm.rng(1001)
    worst = 0.0
    for probe in range(100):
        a = rg.normal(size=(2, 3))
        b = rg.normal(size=(3, 2))
        c = rg.normal(size=(2, 2)) + 3.0

        def build(ts):
            x = nm.matmul(ts[0], ts[1])
            x = nm.combine("div", x, ts[2])
            x = nm.map_unary("softplus", x)
            x = nm.cumsum(x, 1)
            return nm.reduce("mean", x)

        err, _, _ = check_grads(build, [a, b, c])
        worst = max(worst, err)
    assert worst < 1e-4
