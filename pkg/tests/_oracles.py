"""Independent reference computations shared by the tests.

Nothing here imports the package's numerical code: these are the
second route each check compares against.
"""

import numpy as np


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def dense_heat_matrix(grid_n, kappa, length, t_final, n_steps):
    """Backward-Euler propagator built from an explicit dense Laplacian.

    Returns ``M`` with ``y_K = M @ y_0`` for row-major flattened fields.
    """
    h = length / (grid_n + 1)
    dt = t_final / n_steps
    t = (2 * np.eye(grid_n) - np.eye(grid_n, k=1) - np.eye(grid_n, k=-1)) / h**2
    lap = np.kron(np.eye(grid_n), t) + np.kron(t, np.eye(grid_n))
    a = np.eye(grid_n**2) + kappa * dt * lap
    step = np.linalg.inv(a)
    return np.linalg.matrix_power(step, n_steps)


def conjugate_posterior(a, noise_var, x_hat):
    """Closed-form latent posterior for ``x = A z + eta``, ``z ~ N(0, I)``."""
    a = np.atleast_2d(a)
    prec = a.T @ a / noise_var + np.eye(a.shape[1])
    cov = np.linalg.inv(prec)
    return cov @ a.T @ x_hat / noise_var, cov


_ACT = {
    "linear": (lambda u: u, lambda u: np.ones_like(u)),
    "tanh": (np.tanh, lambda u: 1 - np.tanh(u) ** 2),
    "leaky_relu": (lambda u: np.where(u > 0, u, 0.2 * u), lambda u: np.where(u > 0, 1.0, 0.2)),
    "relu": (lambda u: np.maximum(u, 0), lambda u: (u > 0).astype(float)),
    "sigmoid": (lambda u: 1 / (1 + np.exp(-u)), lambda u: np.exp(-u) / (1 + np.exp(-u)) ** 2),
}


def mlp_forward(weights, acts, x):
    """Plain numpy MLP with weights ``[(W (in, out), b)]``."""
    h = np.asarray(x, dtype=np.float64)
    for (w, b), act in zip(weights, acts):
        h = _ACT[act][0](h @ w + b)
    return h


def mlp_input_grad(weights, acts, x):
    """Hand-written backprop of a scalar-output MLP with respect to one input row."""
    h = np.asarray(x, dtype=np.float64)
    pre = []
    for (w, b), act in zip(weights, acts):
        u = h @ w + b
        pre.append(u)
        h = _ACT[act][0](u)
    g = np.ones(1)
    for (w, _), act, u in reversed(list(zip(weights, acts, pre))):
        g = (g * _ACT[act][1](u)) @ w.T
    return g


def critic_loss_direct(weights, acts, fake, real, eps, gp_lambda):
    """WGAN-GP critic loss by explicit per-sample summation."""
    total_fake = total_real = total_gp = 0.0
    n = len(fake)
    for i in range(n):
        total_fake += mlp_forward(weights, acts, fake[i])[0]
        total_real += mlp_forward(weights, acts, real[i])[0]
        y_hat = eps[i] * real[i] + (1 - eps[i]) * fake[i]
        norm = np.linalg.norm(mlp_input_grad(weights, acts, y_hat))
        total_gp += (norm - 1.0) ** 2
    return total_fake / n - total_real / n + gp_lambda * total_gp / n
