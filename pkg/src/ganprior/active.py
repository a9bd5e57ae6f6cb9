"""Sequential window acquisition for inpainting.

Start from a fully occluded image.  At each iteration reveal one window,
read it once with fresh Gaussian noise, and rerun latent posterior
inference under the enlarged mask.  The ``variance`` strategy reveals the
window with the largest mean posterior variance; ``random`` picks uniformly
among unrevealed windows.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hmc
from .artifacts import write_field_image
from .errors import ConfigError, ContractError, NumericError
from .forward_ops import Mask, RestrictionOperator
from .map_opt import MapConfig, latent_map
from .posterior import LatentPosterior, NoiseModel
from .stats import moments, summarize
from .utils import child_seed

log = logging.getLogger(__name__)

STRATEGIES = ("variance", "random")

# seed streams
_STREAM_NOISE = 11
_STREAM_PICK = 12
_STREAM_HMC = 13
_STREAM_MAP = 14
_STREAM_PRIOR = 15


def candidate_grid(shape, window_size):
    """Window origins on a non-overlapping grid, in row-major order."""
    rows, cols = shape
    return [(r, c) for r in range(0, rows, window_size) for c in range(0, cols, window_size)]


def window_pixels(origin, window_size, shape):
    """Flat indices of a window, clipped at the image boundary."""
    r, c = origin
    rr, cc = np.meshgrid(
        np.arange(r, min(r + window_size, shape[0])),
        np.arange(c, min(c + window_size, shape[1])),
        indexing="ij",
    )
    return np.ravel_multi_index((rr.ravel(), cc.ravel()), shape)


def select_window(variance, window_size, candidates=None, revealed=()):
    """Origin of the unrevealed window with the largest mean variance.

    Window means within a relative ``1e-12`` of the maximum count as ties,
    which go to the first candidate in row-major order.
    """
    variance = np.asarray(variance, dtype=np.float64)
    if variance.ndim != 2:
        raise ContractError("variance must be a 2-D field")
    if candidates is None:
        candidates = candidate_grid(variance.shape, window_size)
    revealed = set(map(tuple, revealed))
    open_ = sorted(tuple(o) for o in candidates if tuple(o) not in revealed)
    if not open_:
        raise ContractError("no unrevealed candidate window")
    flat = variance.ravel()
    means = np.array([flat[window_pixels(o, window_size, variance.shape)].mean() for o in open_])
    best = means.max()
    k = int(np.flatnonzero(means >= best - 1e-12 * abs(best))[0])
    return open_[k]


@dataclass
class ActiveState:
    shape: tuple
    mask: Mask
    measurements: np.ndarray  # noisy readings, NaN where unrevealed
    iteration: int = 0
    windows: list = field(default_factory=list)
    history: list = field(default_factory=list)  # PosteriorSummary per iteration
    errors: list = field(default_factory=list)
    prior_variance: np.ndarray | None = None
    revealed_counts: list = field(default_factory=list)
    files: list = field(default_factory=list)

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "window_row", "window_col", "revealed", "error"])
            rows = zip(self.windows, self.revealed_counts, self.errors)
            for i, ((r, c), count, err) in enumerate(rows, start=1):
                writer.writerow([i, r, c, count, repr(float(err))])


def _prior_variance(generator, n_pix, n_samples, seed):
    rng = np.random.default_rng(child_seed(seed, 0, stream=_STREAM_PRIOR))
    z = rng.standard_normal((n_samples, generator.input_dim))
    out = generator(z)[:, :n_pix]
    return moments(out)[1]


def run_active(
    true_image,
    generator,
    sigma_y=1.0,
    strategy="variance",
    n_windows=6,
    hmc_config=None,
    seed=0,
    window_size=7,
    shape=None,
    map_config=None,
    out_dir=None,
    threads=1,
):
    """Sequential acquisition; returns the final :class:`ActiveState`.

    The generator's first ``prod(shape)`` outputs are the image.  The true
    image is used only to synthesise readings and to score the MAP field.
    Noise is drawn once per pixel from a per-seed stream, so two strategies
    run with the same seed read identical values at shared pixels.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}", key="active.strategy")
    if window_size < 1:
        raise ConfigError("window_size must be >= 1", key="active.window_size")
    truth = np.asarray(true_image, dtype=np.float64).ravel()
    n_pix = truth.size
    if shape is None:
        n = int(round(np.sqrt(n_pix)))
        shape = (n, n)
    if shape[0] * shape[1] != n_pix:
        raise ContractError(f"image of {n_pix} pixels does not fit shape {shape}")
    candidates = candidate_grid(shape, window_size)
    if not 1 <= n_windows <= len(candidates):
        raise ConfigError(f"n_windows must lie in [1, {len(candidates)}]", key="active.n_windows")
    hmc_config = hmc.HmcConfig() if hmc_config is None else hmc_config
    map_config = MapConfig() if map_config is None else map_config
    out_dim = generator.output_dim
    if out_dim < n_pix:
        raise ContractError("generator output is smaller than the image")

    noise = NoiseModel.from_sigma(sigma_y)
    readings = truth + noise.sample(n_pix, np.random.default_rng(child_seed(seed, 0, stream=_STREAM_NOISE)))
    pick_rng = np.random.default_rng(child_seed(seed, 0, stream=_STREAM_PICK))

    state = ActiveState(
        shape=tuple(shape),
        mask=Mask(np.zeros(out_dim, dtype=bool)),
        measurements=np.full(n_pix, np.nan),
    )
    n_prior = hmc_config.n_samples - hmc_config.n_burn
    variance = state.prior_variance = _prior_variance(generator, n_pix, n_prior, seed)
    out = None if out_dir is None else Path(out_dir)
    written = []

    for it in range(1, n_windows + 1):
        if strategy == "variance":
            origin = select_window(variance.reshape(shape), window_size, candidates, state.windows)
        else:
            open_ = [o for o in candidates if o not in state.windows]
            origin = open_[int(pick_rng.integers(len(open_)))]
        pix = window_pixels(origin, window_size, shape)
        revealed = state.mask.revealed.copy()
        revealed[pix] = True
        state.mask = Mask(revealed)
        state.measurements[pix] = readings[pix]
        state.windows.append(origin)
        state.revealed_counts.append(state.mask.count)

        forward = RestrictionOperator(state.mask)
        post = LatentPosterior(generator, forward, noise, state.measurements[state.mask.indices])
        try:
            chain = hmc.sample(
                post, dataclasses.replace(hmc_config, seed=child_seed(seed, it, stream=_STREAM_HMC)), threads
            )
            map_result = latent_map(
                post, dataclasses.replace(map_config, seed=child_seed(seed, it, stream=_STREAM_MAP))
            )
        except NumericError as exc:
            raise NumericError(f"active iteration {it}: {exc}") from exc
        summary = summarize(chain, post, map_result)
        state.history.append(summary)
        state.errors.append(float(np.linalg.norm(summary.map_field[:n_pix] - truth)))
        state.iteration = it
        variance = summary.variance[:n_pix]
        log.info("active %s it %d window %s error %.4f", strategy, it, origin, state.errors[-1])

        if out is not None:
            tag = f"{strategy}_{it:02d}"
            written += write_field_image(summary.map_field[:n_pix], out / f"{tag}_map", shape)
            written += write_field_image(summary.mean[:n_pix], out / f"{tag}_mean", shape)
            written += write_field_image(variance, out / f"{tag}_variance", shape)
            written += write_field_image(state.mask.revealed[:n_pix].astype(float), out / f"{tag}_mask", shape)
    if out is not None:
        trace = out / f"{strategy}_trace.csv"
        state.write_trace(trace)
        written.append(trace)
    state.files = written
    return state
