"""Latent-space posterior induced by a generator prior.

For a measurement ``x_hat = f(y) + eta`` with ``eta ~ N(0, diag(var))`` and
``y = scale * g(z) + shift``, ``z ~ N(0, I)``, the unnormalised latent
log-density is ``-r(z)/2`` with

    r(z) = |(x_hat - f(y(z))) / sqrt(var)|^2 + |z|^2.

The evidence is never computed.  Class 2 problems use a restriction
operator as ``f``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, ContractError, NonFiniteError, NumericError
from .forward_ops import RestrictionOperator


@dataclass
class NoiseModel:
    """Diagonal Gaussian noise; ``variance`` is a scalar or per-component."""

    variance: np.ndarray | float = 1.0

    def __post_init__(self):
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if np.any(self.variance <= 0) or not np.all(np.isfinite(self.variance)):
            raise ConfigError("noise variances must be finite and > 0", key="noise")

    @classmethod
    def from_sigma(cls, sigma):
        return cls(np.asarray(sigma, dtype=np.float64) ** 2)

    def sample(self, shape, rng):
        return rng.standard_normal(shape) * np.sqrt(self.variance)


class LatentPosterior:
    def __init__(self, generator, forward, noise, x_hat, scale=1.0, shift=0.0):
        self.generator = generator
        self.forward = forward
        self.noise = noise
        self.x_hat = np.asarray(x_hat, dtype=np.float64)
        self.scale = float(scale)
        self.shift = float(shift)
        if generator.output_dim != forward.input_dim:
            raise ContractError(
                f"generator emits {generator.output_dim} values, forward map expects {forward.input_dim}"
            )
        if self.x_hat.shape != (forward.output_dim,):
            raise ContractError(f"measurement shape {self.x_hat.shape} != ({forward.output_dim},)")
        self.inv_var = np.broadcast_to(1.0 / noise.variance, self.x_hat.shape)

    @property
    def latent_dim(self):
        return self.generator.input_dim

    @property
    def class_tag(self):
        return "class2" if isinstance(self.forward, RestrictionOperator) else "class1"

    def field(self, z):
        """Decoded generator output ``scale * g(z) + shift``."""
        return self.scale * nets.apply(self.generator, np.asarray(z, dtype=np.float64)) + self.shift

    def _check_z(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1:] != (self.latent_dim,) or z.ndim > 2:
            raise ContractError(f"latent vector must have length {self.latent_dim}, got shape {z.shape}")
        return z

    def r(self, z):
        """Misfit plus prior term; vectorised over rows of ``z``."""
        z = self._check_z(z)
        res = self.x_hat - self.forward.apply(self.field(z))
        out = np.sum(res * res * self.inv_var, axis=-1) + np.sum(z * z, axis=-1)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite log-density")
        return out

    def log_density_unnorm(self, z):
        return -0.5 * self.r(z)

    def value_and_grad(self, z):
        """``(-r/2, d(-r/2)/dz)`` sharing one generator pass.

        The misfit gradient is assembled as the generator's vector-Jacobian
        product with ``scale * F^T (res / var)``; ``F^T`` is the forward
        operator's adjoint-vector product.
        """
        z = self._check_z(z)
        tape = ad.Tape()
        z_node = tape.leaf(z)
        try:
            out = nets.apply(self.generator, z_node)
        except NonFiniteError as exc:
            raise NumericError(str(exc)) from exc
        y = self.scale * out.value + self.shift
        res = self.forward.apply(y) - self.x_hat
        weighted = res * self.inv_var
        ad.backward(out, seed=self.scale * self.forward.adjoint_vec(weighted))
        r = np.sum(res * weighted, axis=-1) + np.sum(z * z, axis=-1)
        grad = -(z_node.grad + z)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(grad))):
            raise NumericError("non-finite log-density or gradient")
        return -0.5 * r, grad

    def grad_log_density(self, z):
        return self.value_and_grad(z)[1]

    def potential_and_grad(self, z):
        """HMC potential ``U = r/2`` and its gradient."""
        logp, grad = self.value_and_grad(z)
        return -logp, -grad


def log_density_unnorm(post, z):
    return post.log_density_unnorm(z)


def grad_log_density(post, z):
    return post.grad_log_density(z)


# ---------------------------------------------------------------------------
# prior moment matching


@dataclass
class MomentCheck:
    max_gap: float
    names: list = field(default_factory=list)
    data_means: np.ndarray = None
    gen_means: np.ndarray = None

    @property
    def gaps(self):
        return np.abs(self.data_means - self.gen_means)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["function", "data_mean", "generator_mean", "gap"])
            for row in zip(self.names, self.data_means, self.gen_means, self.gaps):
                writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def default_test_functions(dim, n_projections=10, seed=0):
    """Coordinate means, coordinate second moments and ``n_projections``
    random smooth projections ``tanh(<a, y>)`` with ``a ~ N(0, I/dim)``."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_projections, dim)) / np.sqrt(dim)
    functions = [
        ("mean", lambda y: y),
        ("second_moment", lambda y: y * y),
        ("tanh_projection", lambda y: np.tanh(y @ a.T)),
    ]
    return functions


def _sampler(generator):
    if isinstance(generator, nets.MlpNet):
        return generator.input_dim, lambda z: nets.apply(generator, z)
    return generator.input_dim, generator


def validate_prior(generator, dataset, test_functions=None, n_z_samples=10_000, seed=0, batch=5_000):
    """Largest ``|E_data m(y) - E_z m(g(z))|`` over the test functions.

    ``test_functions`` is a list of ``(name, fn)`` where ``fn`` maps a batch
    of rows to a batch of (vector-valued) statistics; every output column is
    one test function.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ContractError("validate_prior needs a non-empty (count, dim) dataset")
    if n_z_samples < 1000:
        raise ConfigError("n_z_samples must be >= 1000", key="validate.n_z_samples")
    if test_functions is None:
        test_functions = default_test_functions(data.shape[1])
    latent, sample = _sampler(generator)
    rng = np.random.default_rng(seed)
    names, data_means, gen_means = [], [], []
    gen_sums = None
    done = 0
    while done < n_z_samples:
        n = min(batch, n_z_samples - done)
        gz = sample(rng.standard_normal((n, latent)))
        stats = [np.atleast_2d(fn(gz).reshape(n, -1)).sum(axis=0) for _, fn in test_functions]
        gen_sums = stats if gen_sums is None else [a + b for a, b in zip(gen_sums, stats)]
        done += n
    for (name, fn), s in zip(test_functions, gen_sums):
        dm = fn(data).reshape(data.shape[0], -1).mean(axis=0)
        names.extend(f"{name}[{j}]" for j in range(dm.size))
        data_means.append(dm)
        gen_means.append(s / n_z_samples)
    data_means, gen_means = np.concatenate(data_means), np.concatenate(gen_means)
    return MomentCheck(float(np.max(np.abs(data_means - gen_means))), names, data_means, gen_means)
