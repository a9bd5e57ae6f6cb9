import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ganprior import autodiff as ad
from ganprior import nets
from ganprior.errors import ContractError, DomainError

from _helpers import OPS as _OPS
from _helpers import build_expression as _build
from _oracles import central_diff, mlp_forward, mlp_input_grad, rel_err


def grad_at(fn, x):
    _, (g,) = ad.gradient(fn, x)
    return g


def test_square_gradient():
    assert grad_at(lambda x: x * x, 3.0) == pytest.approx(6.0)


UNARY = {
    "tanh": (ad.tanh, np.tanh),
    "sigmoid": (ad.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    "exp": (ad.exp, np.exp),
    "log": (ad.log, np.log),
    "sqrt": (ad.sqrt, np.sqrt),
    "relu": (ad.relu, lambda v: np.maximum(v, 0)),
    "leaky_relu": (ad.leaky_relu, lambda v: np.where(v > 0, v, 0.2 * v)),
    "cube": (lambda v: ad.power(v, 3.0), lambda v: v**3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_match_finite_differences(name):
    op, ref = UNARY[name]
    x = np.array([0.3, 1.7, 2.4, 0.9])
    g = grad_at(lambda v: ad.sum(op(v)), x)
    assert rel_err(g, central_diff(lambda v: ref(v).sum(), x)) < 1e-8


def test_binary_primitives_and_broadcasting():
    a = np.array([[0.5, -1.2, 2.0]])
    b = np.array([[1.5], [0.7]])

    def f(p, q):
        return ad.sum((p + q) * (p - q) / (q * q + 1.0))

    _, (ga, gb) = ad.gradient(f, a, b)
    ref = lambda pa, pb: (((pa + pb) * (pa - pb)) / (pb * pb + 1)).sum()
    assert ga.shape == a.shape and gb.shape == b.shape
    assert rel_err(ga, central_diff(lambda v: ref(v, b), a)) < 1e-8
    assert rel_err(gb, central_diff(lambda v: ref(a, v), b)) < 1e-8


def test_matmul_dense_and_indexing():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)

    def f(xv, wv, bv):
        return ad.sum(ad.tanh(ad.dense(xv, wv, bv))[1:3] * 2.0) + ad.sum(ad.matmul(xv, wv)[0])

    _, grads = ad.gradient(f, x, w, b)
    ref = lambda xv, wv, bv: 2 * np.tanh(xv @ wv + bv)[1:3].sum() + (xv @ wv)[0].sum()
    for i, (arg, g) in enumerate(zip((x, w, b), grads)):
        def fi(v, i=i):
            args = [x, w, b]
            args[i] = v
            return ref(*args)
        assert rel_err(g, central_diff(fi, arg)) < 1e-8


def test_repeated_index_scatter_adds():
    g = grad_at(lambda v: ad.sum(ad.take(v, np.array([0, 0, 2]))), np.zeros(3))
    assert np.array_equal(g, [2.0, 0.0, 1.0])


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.gradient(lambda v: ad.log(v), 0.0)
    with pytest.raises(DomainError):
        ad.gradient(lambda v: ad.sqrt(v), -1.0)
    with pytest.raises(DomainError):
        ad.gradient(lambda v: 1.0 / v, 0.0)


def test_non_scalar_backward_needs_seed():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    y = x * 2.0
    with pytest.raises(ContractError):
        ad.backward(y)
    ad.backward(y, seed=np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_unreachable_nodes_get_zero_gradient():
    tape = ad.Tape()
    x, unused = tape.leaf(2.0), tape.leaf(np.ones(2))
    ad.backward(x * x)
    assert np.array_equal(unused.grad, np.zeros(2))


def test_each_node_visited_once_in_diamond():
    # y = (x + x) * (x + x): a diamond-shaped graph
    g = grad_at(lambda x: (lambda s: s * s)(x + x), 1.5)
    assert g == pytest.approx(8 * 1.5)


def test_tape_reset_keeps_checkpointed_leaves():
    tape = ad.Tape()
    w = tape.leaf(1.0)
    tape.checkpoint()
    for _ in range(3):
        y = w * 3.0
        ad.backward(y)
        assert float(w.grad) == 3.0
        tape.reset()
        assert len(tape) == 1


# ---------------------------------------------------------------------------
# random composite expressions

@given(
    ops=st.lists(st.sampled_from(_OPS), min_size=1, max_size=8),
    seed=st.integers(0, 2**31 - 1),
)
def test_random_composite_expressions(ops, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.5, 1.5, size=3)
    weights = {k: rng.normal(size=(3, 3)) / 2 for k in range(len(ops))}
    g = grad_at(lambda v: _build(ops, "ad", v, weights), x)
    fd = central_diff(lambda v: _build(ops, "np", v, weights), x, h=1e-5)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-3)


@given(seed=st.integers(0, 2**31 - 1), act=st.sampled_from(["tanh", "sigmoid", "leaky_relu"]))
def test_random_mlp_weight_gradients(seed, act):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))]
    spec = nets.mlp_spec(sizes, hidden_activation=act, output_activation="tanh")
    net = nets.init(spec, seed)
    x = rng.normal(size=(3, sizes[0]))
    acts = [layer.activation for layer in spec]
    tape = ad.Tape()
    params = nets.bind(net, tape)
    ad.backward(ad.sum(nets.apply(net, tape.leaf(x), params=params)))
    w0 = net.weights[0][0]

    def f(w):
        weights = [(w, net.weights[0][1])] + net.weights[1:]
        return mlp_forward(weights, acts, x).sum()

    fd = central_diff(f, w0, h=1e-5)
    assert np.linalg.norm(params[0][0].grad - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-3)


# ---------------------------------------------------------------------------
# gradient of the input-gradient norm


def _half_sq(v, p):
    s = p[0]
    sv = s * v
    return 0.5 * ad.sum(sv * sv)


def test_grad_norm_scaled_quadratic():
    # f = 1/2 |s v|^2: grad_v f = s^2 v, norm s^2 |v| = 5, d/ds = 2 s |v| = 10
    norm, (ds,) = ad.grad_of_grad_norm(_half_sq, np.array([3.0, 4.0]), [np.array(1.0)])
    assert norm == pytest.approx(5.0)
    assert float(ds) == pytest.approx(10.0)


def test_grad_norm_linear_scale():
    # f = s * 1/2 |v|^2: norm s |v| = 5, d/ds = |v| = 5
    f = lambda v, p: p[0] * (0.5 * ad.sum(v * v))
    norm, (ds,) = ad.grad_of_grad_norm(f, np.array([3.0, 4.0]), [np.array(1.0)])
    assert norm == pytest.approx(5.0)
    assert float(ds) == pytest.approx(5.0)


def test_grad_norm_square_in_one_coordinate():
    # f = a v1^2 at v1 = 2, a = 1: grad = 2 a v1 = 4, d/da = 2 v1 = 4
    f = lambda v, p: p[0] * v[0] * v[0]
    norm, (da,) = ad.grad_of_grad_norm(f, np.array([2.0]), [np.array(1.0)])
    assert norm == pytest.approx(4.0)
    assert float(da) == pytest.approx(4.0)


def test_grad_norm_at_zero():
    f = lambda v, p: p[0] * ad.sum(v * v)
    with pytest.raises(DomainError):
        ad.grad_of_grad_norm(f, np.zeros(2), [np.array(1.0)])
    norm, (g,) = ad.grad_of_grad_norm(f, np.zeros(2), [np.array(1.0)], at_zero="zero")
    assert norm == 0.0 and float(g) == 0.0


@given(seed=st.integers(0, 2**31 - 1), act=st.sampled_from(["tanh", "sigmoid", "leaky_relu"]))
def test_penalty_gradient_matches_finite_differences(seed, act):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    spec = nets.mlp_spec([d, 5, 4, 1], hidden_activation=act)
    net = nets.init(spec, seed, role="critic")
    acts = [layer.activation for layer in spec]
    v = rng.normal(size=d)
    flat = [a for pair in net.weights for a in pair]

    def f(vn, p):
        return ad.sum(nets.apply(net, vn, params=list(zip(p[0::2], p[1::2]))))

    _, grads = ad.grad_of_grad_norm(f, v, flat)
    for i in range(len(flat)):
        def norm_of(a, i=i):
            p = list(flat)
            p[i] = a
            return np.linalg.norm(mlp_input_grad(list(zip(p[0::2], p[1::2])), acts, v))

        fd = central_diff(norm_of, flat[i], h=1e-6)
        assert np.linalg.norm(grads[i] - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)
