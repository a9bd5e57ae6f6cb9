"""Forward maps and their adjoint-vector products.

All operators act on the last axis, so a batch of fields is a 2-D array of
rows.  Heat fields live on the interior of a ``grid_n x grid_n`` grid in
row-major order; the zero Dirichlet boundary is implicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError


class ForwardOperator:
    kind = "abstract"
    input_dim: int
    output_dim: int
    linear = True

    def apply(self, y):
        raise NotImplementedError

    def adjoint_vec(self, v):
        raise NotImplementedError

    def _check(self, x, dim, what):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (dim,):
            raise ContractError(f"{self.kind} {what}: expected last axis {dim}, got shape {x.shape}")
        return x


class IdentityOperator(ForwardOperator):
    kind = "identity"

    def __init__(self, dim):
        self.input_dim = self.output_dim = int(dim)

    def apply(self, y):
        return self._check(y, self.input_dim, "apply").copy()

    def adjoint_vec(self, v):
        return self._check(v, self.output_dim, "adjoint").copy()


class LinearOperator(ForwardOperator):
    """Dense matrix ``A`` of shape (output_dim, input_dim)."""

    kind = "linear"

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.output_dim, self.input_dim = self.matrix.shape

    def apply(self, y):
        return self._check(y, self.input_dim, "apply") @ self.matrix.T

    def adjoint_vec(self, v):
        return self._check(v, self.output_dim, "adjoint") @ self.matrix


class Mask:
    """Boolean selection of revealed components."""

    def __init__(self, revealed):
        self.revealed = np.asarray(revealed, dtype=bool).ravel()
        self.indices = np.flatnonzero(self.revealed)

    @classmethod
    def from_indices(cls, indices, dim):
        revealed = np.zeros(dim, dtype=bool)
        revealed[np.asarray(indices, dtype=int)] = True
        return cls(revealed)

    @property
    def dim(self):
        return self.revealed.size

    @property
    def count(self):
        return self.indices.size

    def __or__(self, other):
        return Mask(self.revealed | other.revealed)


class RestrictionOperator(ForwardOperator):
    """Gather of the revealed components; the adjoint scatters with zeros."""

    kind = "restriction"

    def __init__(self, mask):
        if not isinstance(mask, Mask):
            mask = Mask(mask)
        if mask.count == 0:
            raise ContractError("restriction needs at least one revealed component")
        self.mask = mask
        self.input_dim = mask.dim
        self.output_dim = mask.count

    def apply(self, u):
        return self._check(u, self.input_dim, "apply")[..., self.mask.indices]

    def adjoint_vec(self, v):
        v = self._check(v, self.output_dim, "adjoint")
        out = np.zeros(v.shape[:-1] + (self.input_dim,))
        out[..., self.mask.indices] = v
        return out


def restrict_apply(mask, u):
    return RestrictionOperator(mask).apply(u)


def restrict_adjoint(mask, v):
    return RestrictionOperator(mask).adjoint_vec(v)


def linear_apply(matrix, y):
    return LinearOperator(matrix).apply(y)


def linear_adjoint_vec(matrix, v):
    return LinearOperator(matrix).adjoint_vec(v)


# ---------------------------------------------------------------------------
# heat conduction


@dataclass(frozen=True)
class HeatParams:
    grid_n: int = 32
    kappa: float = 0.64
    length: float = 2.0 * np.pi
    t_final: float = 1.0
    n_steps: int = 20
    cg_tol: float = 1e-10
    cg_max_iter: int = 500

    def __post_init__(self):
        if self.grid_n < 3:
            raise ConfigError("grid_n must be >= 3", key="forward.grid_n")
        if self.kappa <= 0:
            raise ConfigError("kappa must be > 0", key="forward.kappa")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1", key="forward.n_steps")
        if self.cg_tol <= 0:
            raise ConfigError("cg_tol must be > 0", key="forward.cg_tol")

    @property
    def h(self):
        return self.length / (self.grid_n + 1)

    @property
    def dt(self):
        return self.t_final / self.n_steps

    def eigenvalue(self, m, n):
        """Eigenvalue of the 5-point negative Laplacian for mode ``(m, n)``."""
        s = np.pi / (self.grid_n + 1)
        return ((2 - 2 * np.cos(m * s)) + (2 - 2 * np.cos(n * s))) / self.h**2


def laplacian(u, h):
    """5-point negative Laplacian of interior fields ``u[..., n, n]``."""
    out = 4.0 * u
    out[..., 1:, :] -= u[..., :-1, :]
    out[..., :-1, :] -= u[..., 1:, :]
    out[..., :, 1:] -= u[..., :, :-1]
    out[..., :, :-1] -= u[..., :, 1:]
    return out / (h * h)


def laplacian_transpose(v, h):
    """Transpose of :func:`laplacian` written in scatter form."""
    out = 4.0 * v
    # each term of laplacian() reads a neighbour; its transpose writes to it
    out[..., :-1, :] -= v[..., 1:, :]
    out[..., 1:, :] -= v[..., :-1, :]
    out[..., :, :-1] -= v[..., :, 1:]
    out[..., :, 1:] -= v[..., :, :-1]
    return out / (h * h)


def cg_solve(matvec, b, tol=1e-10, max_iter=500, x0=None):
    """Conjugate gradients on a batch of SPD systems.

    ``b`` has shape ``(batch, ...)``; each system converges independently to
    ``|r| <= tol * |b|``.  Raises :class:`NumericError` with the worst
    relative residual if ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=np.float64)
    batch = b.shape[0]
    axes = tuple(range(1, b.ndim))
    shape = (batch,) + (1,) * (b.ndim - 1)

    def dot(a, c):
        return np.sum(a * c, axis=axes)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    b_norm = np.sqrt(dot(b, b))
    target = tol * b_norm
    p = r.copy()
    rr = dot(r, r)
    for _ in range(max_iter + 1):
        active = np.sqrt(rr) > target
        if not np.any(active):
            return x
        ap = matvec(p)
        pap = dot(p, ap)
        alpha = np.where(active, rr / np.where(pap > 0, pap, 1.0), 0.0)
        x += alpha.reshape(shape) * p
        r -= alpha.reshape(shape) * ap
        rr_new = dot(r, r)
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        p = r + beta.reshape(shape) * p
        rr = rr_new
    worst = float(np.max(np.sqrt(rr) / np.where(b_norm > 0, b_norm, 1.0)))
    raise NumericError(f"CG did not converge in {max_iter} iterations (relative residual {worst:.3e})")


class HeatOperator(ForwardOperator):
    """Backward-Euler heat conduction on a square with zero Dirichlet walls.

    Each of ``n_steps`` steps solves ``(I + kappa*dt*A) u_next = u`` by CG.
    With ``dense=True`` the operator is assembled once from the matrix-free
    march and later calls are plain matrix products (for repeated use
    inside samplers on small grids).
    """

    kind = "heat"

    def __init__(self, params, dense=False):
        self.params = params
        self.dense = dense
        self.input_dim = self.output_dim = params.grid_n**2

    def _grid(self, y):
        n = self.params.grid_n
        flat = np.asarray(y, dtype=np.float64)
        return flat.reshape((-1, n, n)), flat.shape

    def _march(self, y, stencil):
        p = self.params
        c = p.kappa * p.dt
        u, shape = self._grid(y)

        def matvec(v):
            return v + c * stencil(v, p.h)

        # each step is a contraction, so per-solve errors add up: split the
        # tolerance so cg_tol bounds the relative error of the whole march
        tol = p.cg_tol / p.n_steps
        for _ in range(p.n_steps):
            u = cg_solve(matvec, u, tol, p.cg_max_iter)
        return u.reshape(shape)

    def apply(self, y):
        y = self._check(y, self.input_dim, "apply")
        if self.dense:
            return y @ self.matrix().T
        return self._march(y, laplacian)

    def matrix(self):
        """Dense forward matrix assembled column by column (cached)."""
        if getattr(self, "_matrix", None) is None:
            self._matrix = self._march(np.eye(self.input_dim), laplacian).T
        return self._matrix

    def adjoint_vec(self, v):
        v = self._check(v, self.output_dim, "adjoint")
        if self.dense:
            return v @ self.matrix()
        # F = B^K with B = (I + c A)^-1, so F^T = (B^T)^K: march with A^T.
        return self._march(v, laplacian_transpose)


def heat_apply(params, y0):
    return HeatOperator(params).apply(y0)


def heat_adjoint_vec(params, v):
    return HeatOperator(params).adjoint_vec(v)

