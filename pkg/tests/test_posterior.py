import numpy as np
import pytest

from ganprior import nets
from ganprior.errors import ConfigError, ContractError
from ganprior.forward_ops import HeatOperator, HeatParams, IdentityOperator, Mask, RestrictionOperator
from ganprior.posterior import (
    LatentPosterior,
    NoiseModel,
    default_test_functions,
    grad_log_density,
    log_density_unnorm,
    validate_prior,
)

from _oracles import central_diff, mlp_forward, rel_err


def make_gen(latent, out, seed=0):
    return nets.init(nets.generator_spec(latent, out, hidden=(12, 12)), seed)


def linear_gen(a):
    m, d = a.shape
    return nets.MlpNet([nets.LayerSpec(d, m, "linear")], [(a.T.copy(), np.zeros(m))], "generator", {})


@pytest.mark.parametrize("kind", ["identity", "heat", "restriction"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    if kind == "heat":
        forward = HeatOperator(HeatParams(grid_n=4, cg_tol=1e-13))
    elif kind == "restriction":
        forward = RestrictionOperator(Mask(rng.uniform(size=16) < 0.5))
    else:
        forward = IdentityOperator(16)
    gen = make_gen(3, 16)
    x_hat = rng.normal(size=forward.output_dim)
    noise = NoiseModel(rng.uniform(0.2, 2.0, size=forward.output_dim))
    post = LatentPosterior(gen, forward, noise, x_hat, scale=2.0, shift=1.0)
    z = rng.normal(size=3)
    fd = central_diff(lambda v: float(post.log_density_unnorm(v)), z, h=1e-6)
    assert rel_err(post.grad_log_density(z), fd) < 1e-6
    assert np.allclose(grad_log_density(post, z), post.grad_log_density(z))


def test_r_matches_explicit_formula():
    rng = np.random.default_rng(1)
    gen = make_gen(2, 5)
    var = rng.uniform(0.5, 1.5, size=5)
    x_hat = rng.normal(size=5)
    post = LatentPosterior(gen, IdentityOperator(5), NoiseModel(var), x_hat, scale=3.0, shift=-1.0)
    z = rng.normal(size=2)
    acts = [layer.activation for layer in gen.layers]
    y = 3.0 * mlp_forward(gen.weights, acts, z) - 1.0
    expected = np.sum((x_hat - y) ** 2 / var) + z @ z
    assert post.r(z) == pytest.approx(expected, rel=1e-13)
    assert log_density_unnorm(post, z) == pytest.approx(-expected / 2, rel=1e-13)


def test_batched_rows_equal_single_rows():
    rng = np.random.default_rng(2)
    post = LatentPosterior(make_gen(3, 6), IdentityOperator(6), NoiseModel(1.0), rng.normal(size=6))
    z = rng.normal(size=(4, 3))
    logp, grad = post.value_and_grad(z)
    for i in range(4):
        lp, g = post.value_and_grad(z[i])
        assert logp[i] == pytest.approx(float(lp), rel=1e-13)
        assert np.allclose(grad[i], g, rtol=1e-12)


def test_potential_is_half_r():
    rng = np.random.default_rng(3)
    post = LatentPosterior(make_gen(2, 4), IdentityOperator(4), NoiseModel(0.3), rng.normal(size=4))
    z = rng.normal(size=2)
    u, du = post.potential_and_grad(z)
    assert u == pytest.approx(post.r(z) / 2)
    assert np.allclose(du, -post.grad_log_density(z))


def test_gaussian_gradient_closed_form():
    # linear generator: grad log p = -(A^T (A z - x)/var + z)
    rng = np.random.default_rng(4)
    a = rng.normal(size=(5, 3))
    x_hat = rng.normal(size=5)
    post = LatentPosterior(linear_gen(a), IdentityOperator(5), NoiseModel(0.7), x_hat)
    z = rng.normal(size=3)
    expected = -(a.T @ (a @ z - x_hat) / 0.7 + z)
    assert np.allclose(post.grad_log_density(z), expected, rtol=1e-12)


def test_contract_errors():
    gen = make_gen(2, 4)
    with pytest.raises(ContractError):
        LatentPosterior(gen, IdentityOperator(5), NoiseModel(1.0), np.zeros(5))
    with pytest.raises(ContractError):
        LatentPosterior(gen, IdentityOperator(4), NoiseModel(1.0), np.zeros(3))
    post = LatentPosterior(gen, IdentityOperator(4), NoiseModel(1.0), np.zeros(4))
    with pytest.raises(ContractError):
        post.r(np.zeros(3))
    with pytest.raises(ConfigError):
        NoiseModel(0.0)


def test_class_tag():
    gen = make_gen(2, 4)
    restrict = RestrictionOperator(Mask([1, 1, 0, 0]))
    assert LatentPosterior(gen, restrict, NoiseModel(1.0), np.zeros(2)).class_tag == "class2"
    assert LatentPosterior(gen, IdentityOperator(4), NoiseModel(1.0), np.zeros(4)).class_tag == "class1"


def test_validate_prior_exact_generator_has_small_gap():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 3)) * 0.3
    data = rng.standard_normal((200_000, 3)) @ a.T
    check = validate_prior(linear_gen(a), data, n_z_samples=200_000, seed=1)
    assert check.max_gap < 0.02
    assert len(check.names) == len(check.data_means) == 6 + 6 + 10


def test_validate_prior_detects_shifted_generator():
    rng = np.random.default_rng(6)
    data = rng.standard_normal((5000, 2))

    class Shifted:
        input_dim = 2

        def __call__(self, z):
            return z + 0.5

    assert validate_prior(Shifted(), data, seed=0).max_gap > 0.4


def test_validate_prior_preconditions():
    with pytest.raises(ConfigError):
        validate_prior(make_gen(2, 3), np.zeros((5, 3)), n_z_samples=999)
    with pytest.raises(ContractError):
        validate_prior(make_gen(2, 3), np.zeros((0, 3)))


def test_default_test_functions_shapes():
    fns = default_test_functions(4, n_projections=3)
    y = np.ones((2, 4))
    assert [fn(y).shape for _, fn in fns] == [(2, 4), (2, 4), (2, 3)]
