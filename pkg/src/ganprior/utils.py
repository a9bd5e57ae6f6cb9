"""Seed splitting and small validation helpers."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def child_seed(seed, counter, stream=0):
    """Deterministic 64-bit child of ``seed``.

    Rule: ``SeedSequence([seed, stream, counter])`` and its first 64-bit
    state word.  ``stream`` separates consumers (chains, restarts, noise)
    so that adding draws to one never shifts another.
    """
    ss = np.random.SeedSequence([int(seed), int(stream), int(counter)])
    return int(ss.generate_state(1, np.uint64)[0])


def child_seeds(seed, n, stream=0):
    return [child_seed(seed, i, stream) for i in range(n)]


def as_rows(x, dim=None, name="input"):
    """2-D float array view of ``x``; a single vector becomes one row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ContractError(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ContractError(f"{name} has {x.shape[1]} columns, expected {dim}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite values")
    return x
