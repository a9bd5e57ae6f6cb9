"""MAP estimates: latent-space MAP under a generator prior, and classical
Gaussian-prior (L2 / H1) MAP in data space for linear forward maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .forward_ops import HeatOperator, cg_solve, laplacian
from .gan import AdamState, adam_step
from .utils import child_seed

log = logging.getLogger(__name__)


@dataclass
class MapConfig:
    max_iters: int = 2000
    step_rule: str = "adam"
    learning_rate: float = 0.05
    grad_tol: float = 1e-6
    n_restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ConfigError("grad_tol must be > 0", key="map.grad_tol")
        if self.n_restarts < 1:
            raise ConfigError("n_restarts must be >= 1", key="map.n_restarts")
        if self.step_rule not in ("fixed", "adam"):
            raise ConfigError("step_rule must be 'fixed' or 'adam'", key="map.step_rule")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0", key="map.learning_rate")


@dataclass
class MapResult:
    z_map: np.ndarray
    r_value: float
    converged: bool
    grad_norm: float
    field: np.ndarray  # decoded g(z_map)
    restart: int


def latent_map(post, config=None, objective_scale=1.0):
    """Minimise ``r(z)`` from ``n_restarts`` standard-normal starts.

    All restarts advance together as one batch.  A restart stops moving once
    ``|grad r| <= grad_tol``.  The restart with the smallest ``r`` wins (ties
    go to the lowest index); ``converged`` reports its gradient test.
    ``objective_scale`` multiplies ``r`` (the argmin does not depend on it).
    The winning restart is then polished by gradient descent with an
    Armijo backtracking line search, which settles where a fixed-rate Adam
    step keeps circling the minimum.
    """
    cfg = MapConfig() if config is None else config
    rng = np.random.default_rng(child_seed(cfg.seed, 0, stream=7))
    z = rng.standard_normal((cfg.n_restarts, post.latent_dim))
    done = np.zeros(cfg.n_restarts, dtype=bool)
    state = AdamState.zeros_like([z])

    def evaluate(z):
        logp, grad = post.value_and_grad(z)
        return -2.0 * objective_scale * logp, -2.0 * objective_scale * grad

    r, grad = evaluate(z)
    for _ in range(cfg.max_iters):
        done = np.linalg.norm(grad, axis=1) <= cfg.grad_tol * objective_scale
        if np.all(done):
            break
        step_grad = np.where(done[:, None], 0.0, grad)
        if cfg.step_rule == "adam":
            (z_new,), state = adam_step([z], [step_grad], state, cfg.learning_rate)
            z = np.where(done[:, None], z, z_new)
        else:
            z = z - cfg.learning_rate * step_grad
        r, grad = evaluate(z)
    norms = np.linalg.norm(grad, axis=1) / objective_scale
    best = int(np.argmin(r))
    z_best, r_best, g_best = _polish(evaluate, z[best], r[best], grad[best], cfg.grad_tol * objective_scale,
                                     cfg.max_iters)
    z[best], r[best], grad[best] = z_best, r_best, g_best
    norms[best] = np.linalg.norm(g_best) / objective_scale
    converged = bool(norms[best] <= cfg.grad_tol)
    if not converged:
        log.warning("latent MAP not converged: |grad r| = %.3e > %.1e", norms[best], cfg.grad_tol)
    return MapResult(
        z_map=z[best].copy(),
        r_value=float(r[best] / objective_scale),
        converged=converged,
        grad_norm=float(norms[best]),
        field=post.field(z[best]),
        restart=best,
    )


def _polish(evaluate, z, r, grad, tol, max_iters, shrink=0.5, c=1e-4):
    """Steepest descent with Armijo backtracking from one point."""
    step = 1.0
    for _ in range(max_iters):
        gg = float(grad @ grad)
        if np.sqrt(gg) <= tol:
            break
        while True:
            z_new = z - step * grad
            r_new, g_new = evaluate(z_new[None])
            if r_new[0] <= r - c * step * gg or step < 1e-14:
                break
            step *= shrink
        if r_new[0] > r:
            break
        z, r, grad = z_new, r_new[0], g_new[0]
        step *= 2.0
    return z, r, grad


@dataclass
class GaussianPriorConfig:
    kind: str = "l2"
    alpha: float = 0.1
    cg_tol: float = 1e-8
    cg_max_iter: int = 2000
    grid_spacing: float | None = None

    def __post_init__(self):
        if self.kind not in ("l2", "h1"):
            raise ConfigError("kind must be 'l2' or 'h1'", key="baseline.kind")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0", key="baseline.alpha")


def _regulariser(forward, cfg):
    if cfg.kind == "l2":
        return lambda y: y
    n = int(round(np.sqrt(forward.input_dim)))
    if n * n != forward.input_dim:
        raise ContractError("the H1 prior needs a square grid")
    if cfg.grid_spacing is not None:
        h = cfg.grid_spacing
    elif isinstance(forward, HeatOperator):
        h = forward.params.h
    else:
        h = 1.0
    return lambda y: laplacian(y.reshape(-1, n, n), h).reshape(y.shape)


def normal_operator(forward, noise, cfg):
    """``y -> F^T S^-1 F y + alpha R y`` for batches of rows."""
    inv_var = 1.0 / noise.variance
    reg = _regulariser(forward, cfg)

    def matvec(y):
        return forward.adjoint_vec(forward.apply(y) * inv_var) + cfg.alpha * reg(y)

    return matvec


def gaussian_map(forward, noise, x_hat, cfg=None):
    """MAP field under a Gaussian prior with precision ``alpha * R``."""
    cfg = GaussianPriorConfig() if cfg is None else cfg
    if not getattr(forward, "linear", False):
        raise ContractError("gaussian_map needs a linear forward operator")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    rhs = forward.adjoint_vec(x_hat * (1.0 / noise.variance))
    y = cg_solve(normal_operator(forward, noise, cfg), rhs[None, :], cfg.cg_tol, cfg.cg_max_iter)
    return y[0]
