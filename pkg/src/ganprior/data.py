"""Datasets: rectangle temperature fields, toy shapes, IDX and DSET files,
plus the brute-force importance-sampling posterior for rectangle fields.

DSET layout (little-endian)::

    b"DSET" | u32 version=1 | u32 count | u32 dim | u32 label_dim
    count x (dim + label_dim) f64
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .forward_ops import HeatOperator

log = logging.getLogger(__name__)

DSET_MAGIC = b"DSET"
DSET_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    samples: np.ndarray  # (count, dim)
    labels: np.ndarray | None = None  # (count, label_dim)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ContractError("samples must be a (count, dim) array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.ndim != 2 or self.labels.shape[0] != self.samples.shape[0]:
                raise ContractError("labels must be a (count, label_dim) array")

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    @property
    def label_dim(self):
        return 0 if self.labels is None else self.labels.shape[1]

    def joint(self):
        """Rows ``[x | y]``; the label block is the one-hot in {-1, +1}."""
        if self.labels is None:
            return self.samples
        return np.hstack([self.samples, 2.0 * self.labels - 1.0])

    def __getitem__(self, idx):
        return Dataset(self.samples[idx], None if self.labels is None else self.labels[idx])


def save_dataset(ds, path):
    header = DSET_MAGIC + struct.pack("<IIII", DSET_VERSION, ds.count, ds.dim, ds.label_dim)
    payload = ds.samples if ds.labels is None else np.hstack([ds.samples, ds.labels])
    Path(path).write_bytes(header + np.ascontiguousarray(payload, dtype="<f8").tobytes())


def load_dataset(path):
    data = Path(path).read_bytes()
    if data[:4] != DSET_MAGIC:
        raise FormatError("bad magic, expected b'DSET'", offset=0)
    if len(data) < 20:
        raise FormatError("truncated header", offset=len(data))
    version, count, dim, label_dim = struct.unpack_from("<IIII", data, 4)
    if version != DSET_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    need = 20 + 8 * count * (dim + label_dim)
    if len(data) != need:
        raise FormatError(f"payload size mismatch: expected {need} bytes, found {len(data)}", offset=min(len(data), need))
    payload = np.frombuffer(data, "<f8", offset=20).reshape(count, dim + label_dim).astype(np.float64)
    return Dataset(payload[:, :dim], payload[:, dim:] if label_dim else None)


# ---------------------------------------------------------------------------
# rectangle temperature fields


@dataclass(frozen=True)
class RectParams:
    xi1: float
    xi2: float
    xi3: float
    xi4: float


def default_ranges(length=2.0 * np.pi):
    """Uniform ranges for (xi1, xi2, xi3, xi4) that are always valid."""
    lo, hi = (0.15 * length, 0.45 * length), (0.55 * length, 0.85 * length)
    return np.array([lo, lo, hi, hi])


def grid_coords(grid_n, length):
    h = length / (grid_n + 1)
    return h * np.arange(1, grid_n + 1)


def rect_field(params, grid_n, length=2.0 * np.pi):
    """Zero background; inside the rectangle the value rises linearly from 2
    on the left edge to 4 on the right edge.  Rows index y, columns x."""
    p = params
    if not (p.xi3 > p.xi1 and p.xi4 > p.xi2):
        raise ContractError(f"degenerate rectangle {p}")
    return rect_fields(np.array([[p.xi1, p.xi2, p.xi3, p.xi4]]), grid_n, length)[0]


def rect_fields(xi, grid_n, length=2.0 * np.pi):
    """Vectorised :func:`rect_field` for parameter rows ``xi[k] = (xi1..xi4)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    c = grid_coords(grid_n, length)
    x = c[None, None, :]
    y = c[None, :, None]
    x1, y1, x3, y3 = (xi[:, i, None, None] for i in range(4))
    inside = (x >= x1) & (x <= x3) & (y >= y1) & (y <= y3)
    ramp = 2.0 + 2.0 * (x - x1) / (x3 - x1)
    return np.where(inside, ramp, 0.0).reshape(xi.shape[0], grid_n * grid_n)


def sample_rect_params(count, rng, ranges):
    ranges = np.asarray(ranges, dtype=np.float64)
    return rng.uniform(ranges[:, 0], ranges[:, 1], size=(count, 4))


def _check_ranges(ranges, length):
    ranges = np.asarray(ranges, dtype=np.float64)
    if ranges.shape != (4, 2) or np.any(ranges[:, 0] > ranges[:, 1]):
        raise ConfigError("ranges must be four (low, high) pairs", key="dataset.ranges")
    ok = (
        ranges[0, 0] > 0 and ranges[1, 0] > 0
        and ranges[2, 1] < length and ranges[3, 1] < length
        and ranges[0, 1] < ranges[2, 0] and ranges[1, 1] < ranges[3, 0]
    )
    if not ok:
        raise ConfigError("ranges admit invalid rectangles", key="dataset.ranges")
    return ranges


def sample_rect_dataset(count, seed, ranges=None, grid_n=16, length=2.0 * np.pi, return_params=False):
    ranges = _check_ranges(default_ranges(length) if ranges is None else ranges, length)
    rng = np.random.default_rng(seed)
    xi = sample_rect_params(count, rng, ranges)
    ds = Dataset(rect_fields(xi, grid_n, length) if count else np.zeros((0, grid_n * grid_n)))
    return (ds, xi) if return_params else ds


def rect_to_unit(field):
    """Temperatures in [0, 4] to the generator range [-1, 1]."""
    return np.asarray(field) / 2.0 - 1.0


RECT_DECODE = (2.0, 2.0)  # field = 2 * unit + 2


# ---------------------------------------------------------------------------
# toy two-class shapes


def shapes_dataset(count, seed, kind="rect", size=16, n_labels=10):
    """Binary images in {-1, +1}: filled rectangles (class A) or crosses
    (class B).  The label is the shape width minus 3 (rectangles) or the
    horizontal arm span minus 3, capped at ``n_labels - 1`` (crosses),
    one-hot over ``n_labels``."""
    if kind not in ("rect", "cross"):
        raise ConfigError(f"unknown shape kind {kind!r}", key="dataset.kind")
    if size < 10:
        raise ConfigError("shape images need size >= 10", key="dataset.size")
    rng = np.random.default_rng(seed)
    images = -np.ones((count, size, size))
    labels = np.zeros((count, n_labels))
    for k in range(count):
        if kind == "rect":
            w = min(int(rng.integers(3, 3 + n_labels)), size - 2)
            h = int(rng.integers(3, size - 3))
            r0 = int(rng.integers(0, size - h + 1))
            c0 = int(rng.integers(0, size - w + 1))
            images[k, r0:r0 + h, c0:c0 + w] = 1.0
        else:
            # arms stick out at least two pixels on every side of the bars,
            # so a cross is never itself a filled rectangle
            t = int(rng.integers(2, 4))
            w = min(int(rng.integers(t + 4, max(t + 5, 3 + n_labels))), size - 2)
            span_v = int(rng.integers(t + 4, size - 1))
            r0 = int(rng.integers(0, size - span_v + 1))
            c0 = int(rng.integers(0, size - w + 1))
            rc = r0 + (span_v - t) // 2
            cc = c0 + (w - t) // 2
            images[k, rc:rc + t, c0:c0 + w] = 1.0
            images[k, r0:r0 + span_v, cc:cc + t] = 1.0
        labels[k, min(w - 3, n_labels - 1)] = 1.0
    return Dataset(images.reshape(count, size * size), labels)


# ---------------------------------------------------------------------------
# IDX


def read_idx(path, n_labels=10):
    """Parse a big-endian IDX image (u8, scaled to [-1, 1]) or label file
    (one-hot expanded to ``n_labels``)."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError("truncated IDX header", offset=len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_IMAGES:
        if len(data) < 16:
            raise FormatError("truncated IDX image header", offset=len(data))
        count, rows, cols = struct.unpack_from(">III", data, 4)
        need = 16 + count * rows * cols
        if len(data) < need:
            raise FormatError(f"IDX image payload truncated, expected {need} bytes", offset=len(data))
        pixels = np.frombuffer(data, np.uint8, count * rows * cols, 16).astype(np.float64)
        return Dataset((pixels / 127.5 - 1.0).reshape(count, rows * cols))
    if magic == IDX_LABELS:
        (count,) = struct.unpack_from(">I", data, 4)
        if len(data) < 8 + count:
            raise FormatError(f"IDX label payload truncated, expected {8 + count} bytes", offset=len(data))
        raw = np.frombuffer(data, np.uint8, count, 8)
        if count and raw.max() >= n_labels:
            raise FormatError(f"label {int(raw.max())} exceeds n_labels={n_labels}", offset=8 + int(np.argmax(raw)))
        onehot = np.zeros((count, n_labels))
        onehot[np.arange(count), raw] = 1.0
        return Dataset(np.zeros((count, 0)), onehot)
    raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)


# ---------------------------------------------------------------------------
# importance-sampling oracle


@dataclass
class OracleResult:
    mean: np.ndarray
    variance: np.ndarray
    ess: float
    n_mc: int
    low_ess: bool


def weighted_moments(weights, fields):
    """Self-normalised mean, variance and ESS for unnormalised ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.isfinite(w.sum()) or w.sum() <= 0:
        raise ContractError("weights must be non-negative with a finite positive sum")
    w = w / w.sum()
    mean = w @ fields
    variance = np.maximum(w @ (fields * fields) - mean * mean, 0.0)
    return mean, variance, float(1.0 / np.sum(w * w))


def snis_moments(log_weights, fields):
    """:func:`weighted_moments` from log-weights (shifted by their max)."""
    log_weights = np.asarray(log_weights, dtype=np.float64)
    return weighted_moments(np.exp(log_weights - log_weights.max()), fields)


def oracle_posterior(x_hat, noise_var, heat_params, ranges=None, n_mc=200_000, seed=0, chunk=10_000, min_ess=50):
    """Posterior mean and pixel-wise variance of rectangle fields by
    self-normalised importance sampling from the uniform parameter prior."""
    if n_mc < 1000:
        raise ConfigError("oracle needs n_mc >= 1000", key="oracle.n_mc")
    length = heat_params.length
    ranges = _check_ranges(default_ranges(length) if ranges is None else ranges, length)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    inv_var = 1.0 / np.broadcast_to(np.asarray(noise_var, dtype=np.float64), x_hat.shape)
    forward = HeatOperator(heat_params).matrix().T
    rng = np.random.default_rng(seed)
    xi = sample_rect_params(n_mc, rng, ranges)
    log_w = np.empty(n_mc)
    for start in range(0, n_mc, chunk):
        fields = rect_fields(xi[start:start + chunk], heat_params.grid_n, length)
        res = x_hat - fields @ forward
        log_w[start:start + chunk] = -0.5 * np.sum(res * res * inv_var, axis=1)
    # second pass accumulates moments without holding all fields at once
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    dim = x_hat.size
    s1, s2 = np.zeros(dim), np.zeros(dim)
    for start in range(0, n_mc, chunk):
        fields = rect_fields(xi[start:start + chunk], heat_params.grid_n, length)
        wc = w[start:start + chunk]
        s1 += wc @ fields
        s2 += wc @ (fields * fields)
    ess = float(1.0 / np.sum(w * w))
    if ess < min_ess:
        log.warning("oracle effective sample size %.1f < %d", ess, min_ess)
    return OracleResult(s1, np.maximum(s2 - s1 * s1, 0.0), ess, n_mc, ess < min_ess)
