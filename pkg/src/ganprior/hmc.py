"""Hamiltonian Monte Carlo with dual-averaging step-size adaptation.

A target is any object with ``potential_and_grad(z) -> (U, dU/dz)``;
:class:`~ganprior.posterior.LatentPosterior` is one.  Kinetic energy is
``|p|^2 / 2`` (unit mass).

Raw chain dump layout (little-endian)::

    b"CHN1" | u32 latent_dim | u64 n_samples | n_samples x latent_dim f64
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, NumericError
from .utils import child_seeds

log = logging.getLogger(__name__)

CHAIN_MAGIC = b"CHN1"

# dual averaging constants (Hoffman & Gelman)
_GAMMA = 0.05
_T0 = 10.0
_KAPPA = 0.75


@dataclass
class HmcConfig:
    n_samples: int = 64_000
    burn_in_fraction: float = 0.5
    initial_step: float = 1.0
    n_leapfrog: int = 10
    target_accept: float = 0.65
    n_chains: int = 1
    seed: int = 0
    jitter: bool = False
    max_energy_error: float = 1000.0

    def __post_init__(self):
        if not 0 <= self.burn_in_fraction < 1:
            raise ConfigError("burn_in_fraction must lie in [0, 1)", key="hmc.burn_in_fraction")
        if self.initial_step <= 0:
            raise ConfigError("initial_step must be > 0", key="hmc.initial_step")
        if self.n_leapfrog < 1:
            raise ConfigError("n_leapfrog must be >= 1", key="hmc.n_leapfrog")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1", key="hmc.n_chains")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)", key="hmc.target_accept")
        if self.n_samples - self.n_burn < 1:
            raise ConfigError("no samples left after burn-in", key="hmc.n_samples")

    @property
    def n_burn(self):
        return int(self.n_samples * self.burn_in_fraction)


@dataclass
class ChainResult:
    samples: np.ndarray  # (n_chains, n_kept, dim)
    log_density: np.ndarray  # (n_chains, n_kept), -U at each stored sample
    acceptance: np.ndarray  # (n_chains,) post-burn-in acceptance rate
    step_trace: np.ndarray  # (n_chains, n_samples) step used at each iteration
    divergences: np.ndarray  # (n_chains,)
    seeds: list

    @property
    def flat(self):
        return self.samples.reshape(-1, self.samples.shape[-1])

    @property
    def n_chains(self):
        return self.samples.shape[0]

    @property
    def acceptance_rate(self):
        return float(np.mean(self.acceptance))

    def argmax(self):
        """Stored sample with the highest log-density."""
        k = int(np.argmax(self.log_density))
        return self.flat[k]


class _Target:
    """Caches the gradient at the current state between trajectories."""

    def __init__(self, target):
        self.fn = target.potential_and_grad

    def __call__(self, z):
        u, g = self.fn(z)
        return float(u), np.asarray(g, dtype=np.float64)


def _leapfrog(fn, z, p, grad, step, n_steps):
    p = p - 0.5 * step * grad
    u = None
    for i in range(n_steps):
        z = z + step * p
        u, grad = fn(z)
        if not (np.isfinite(u) and np.all(np.isfinite(grad))):
            return z, p, np.inf, grad, False
        p = p - (step if i < n_steps - 1 else 0.5 * step) * grad
    return z, p, u, grad, True


def leapfrog(target, z, momentum, step, n_steps):
    """Symplectic leapfrog integration; returns ``(z', p')``."""
    if step <= 0:
        raise ContractError("leapfrog step must be > 0")
    fn = _Target(target)
    z = np.asarray(z, dtype=np.float64)
    _, grad = fn(z)
    z, p, _, _, _ = _leapfrog(fn, z, np.asarray(momentum, dtype=np.float64), grad, step, n_steps)
    return z, p


def _run_chain(target, cfg, seed):
    rng = np.random.default_rng(seed)
    fn = _Target(target)
    dim = target.latent_dim
    z = rng.standard_normal(dim)
    u, grad = fn(z)
    n_burn, n_keep = cfg.n_burn, cfg.n_samples - cfg.n_burn
    samples = np.empty((n_keep, dim))
    logp = np.empty(n_keep)
    steps = np.empty(cfg.n_samples)

    step = cfg.initial_step
    mu = np.log(10.0 * cfg.initial_step)
    h_bar, log_step_bar = 0.0, 0.0
    accepted = divergent = 0
    for it in range(cfg.n_samples):
        steps[it] = step
        n_leap = int(rng.integers(1, 2 * cfg.n_leapfrog)) if cfg.jitter else cfg.n_leapfrog
        p0 = rng.standard_normal(dim)
        h0 = u + 0.5 * p0 @ p0
        z1, p1, u1, grad1, ok = _leapfrog(fn, z, p0, grad, step, n_leap)
        h1 = u1 + 0.5 * p1 @ p1 if ok else np.inf
        if not ok or not np.isfinite(h1) or h1 - h0 > cfg.max_energy_error:
            divergent += 1
            accept_prob = 0.0
        else:
            accept_prob = float(np.exp(min(0.0, h0 - h1)))
        if rng.uniform() < accept_prob:
            z, u, grad = z1, u1, grad1
            if it >= n_burn:
                accepted += 1
        if it < n_burn:
            m = it + 1
            h_bar = (1.0 - 1.0 / (m + _T0)) * h_bar + (cfg.target_accept - accept_prob) / (m + _T0)
            log_step = mu - np.sqrt(m) / _GAMMA * h_bar
            eta = m**-_KAPPA
            log_step_bar = eta * log_step + (1.0 - eta) * log_step_bar
            step = float(np.exp(log_step_bar)) if m == n_burn else float(np.exp(log_step))
        else:
            samples[it - n_burn] = z
            logp[it - n_burn] = -u
    return samples, logp, accepted / n_keep, steps, divergent


def sample(target, config, threads=1):
    """Run ``config.n_chains`` independent chains; deterministic in the seed."""
    seeds = child_seeds(config.seed, config.n_chains)

    def run(seed):
        return _run_chain(target, config, seed)

    if threads > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    result = ChainResult(
        samples=np.stack([r[0] for r in results]),
        log_density=np.stack([r[1] for r in results]),
        acceptance=np.array([r[2] for r in results]),
        step_trace=np.stack([r[3] for r in results]),
        divergences=np.array([r[4] for r in results]),
        seeds=seeds,
    )
    if np.any(result.acceptance < 0.01):
        raise NumericError(
            f"acceptance rate {result.acceptance.min():.4f} < 0.01 after adaptation; "
            "try a smaller initial_step"
        )
    if np.any(result.divergences):
        log.info("HMC divergences per chain: %s", result.divergences.tolist())
    return result


# ---------------------------------------------------------------------------
# diagnostics


def _autocorr(x):
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] == 0:
        return np.zeros(n)
    return acov / acov[0]


def effective_sample_size(x):
    """Autocorrelation ESS of one chain (Geyer initial monotone sequence).

    Returns ``(ess, clamped)``; estimates above ``n`` (antithetic chains) are
    clamped to ``n`` and flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 4:
        return float(n), False
    rho = _autocorr(x)
    if rho[0] == 0:
        return float(n), False
    pair_sums = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    running = np.inf
    for gamma in pair_sums:
        if gamma <= 0:
            break
        running = min(running, gamma)
        tau += 2.0 * running
    if tau <= 0 or n / tau > n:
        return float(n), True
    return float(n / tau), False


def potential_scale_reduction(chains):
    """Gelman-Rubin R-hat for ``chains`` of shape (n_chains, n)."""
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise ContractError("scale reduction needs at least two chains")
    m, n = chains.shape
    w = chains.var(axis=1, ddof=1).mean()
    b = n * chains.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


@dataclass
class Diagnostics:
    acceptance: float
    ess: np.ndarray
    ess_clamped: np.ndarray
    rhat: np.ndarray | None


def diagnostics(result, scale_reduction=None):
    """Acceptance, per-coordinate ESS (summed over chains) and R-hat.

    R-hat is computed whenever there are several chains, or on request;
    requesting it for a single chain is an error.
    """
    if scale_reduction is None:
        scale_reduction = result.n_chains > 1
    if scale_reduction and result.n_chains < 2:
        raise ContractError("scale reduction requested for a single chain")
    dim = result.samples.shape[-1]
    ess = np.zeros(dim)
    clamped = np.zeros(dim, dtype=bool)
    for c in range(result.n_chains):
        for j in range(dim):
            e, flag = effective_sample_size(result.samples[c, :, j])
            ess[j] += e
            clamped[j] |= flag
    rhat = None
    if scale_reduction:
        rhat = np.array([potential_scale_reduction(result.samples[:, :, j]) for j in range(dim)])
    return Diagnostics(result.acceptance_rate, ess, clamped, rhat)


def write_chain(path, samples):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    header = CHAIN_MAGIC + struct.pack("<IQ", samples.shape[1], samples.shape[0])
    Path(path).write_bytes(header + np.ascontiguousarray(samples, dtype="<f8").tobytes())


def read_chain(path):
    data = Path(path).read_bytes()
    if data[:4] != CHAIN_MAGIC:
        raise FormatError("bad magic, expected b'CHN1'", offset=0)
    if len(data) < 16:
        raise FormatError("truncated chain header", offset=len(data))
    dim, n = struct.unpack_from("<IQ", data, 4)
    if len(data) != 16 + 8 * dim * n:
        raise FormatError("chain payload size mismatch", offset=min(len(data), 16 + 8 * dim * n))
    return np.frombuffer(data, "<f8", offset=16).reshape(n, dim).astype(np.float64)
