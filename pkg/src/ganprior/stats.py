"""Posterior summaries from chain samples, OOD scores and rejection rules."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

log = logging.getLogger(__name__)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    variance: np.ndarray
    map_field: np.ndarray | None
    argmax_field: np.ndarray
    x_map: np.ndarray | None  # forward image of map_field, compared with x_hat
    map_residual: float | None
    n_samples: int
    clamp: float = 0.0
    label_mean: np.ndarray | None = None  # on the simplex
    label_var: np.ndarray | None = None
    label_raw_mean: np.ndarray | None = None
    label_raw_var: np.ndarray | None = None

    @property
    def var_norm(self):
        return None if self.label_var is None else float(np.linalg.norm(self.label_var))

    @property
    def predicted(self):
        return None if self.label_mean is None else int(np.argmax(self.label_mean))

    @property
    def mean_variance(self):
        return float(np.mean(self.variance))


def moments(fields):
    """Mean and clamped ``E[d^2] - E[d]^2`` with ``d = y - median(y)``.

    The componentwise median shift is order-independent and makes a
    repeated sample give exactly zero variance.  Also returns the size of
    the clamp applied against roundoff.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.shape[0] == 0:
        raise ContractError("cannot summarise an empty sample set")
    shift = np.median(fields, axis=0)
    d = fields - shift
    d_mean = d.mean(axis=0)
    raw = (d * d).mean(axis=0) - d_mean * d_mean
    clamp = float(np.max(np.maximum(-raw, 0.0), initial=0.0))
    return shift + d_mean, np.maximum(raw, 0.0), clamp


def summarize(samples, post, map_result=None, label_dim=0, log_density=None):
    """Population parameters of ``g(z)`` over latent ``samples``.

    ``samples`` is a :class:`~ganprior.hmc.ChainResult` or an array of latent
    rows.  With ``label_dim = K`` the last ``K`` generator outputs are label
    logits; their softmax gives simplex-valued label statistics.
    """
    if hasattr(samples, "log_density"):
        log_density = samples.log_density.ravel()
        z = samples.flat
    else:
        z = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if z.shape[0] == 0:
        raise ContractError("empty chain")
    fields = post.field(z)
    mean, variance, clamp = moments(fields)
    scale = max(float(np.max(np.abs(mean))), 1.0)
    if clamp > 1e-10 * scale * scale:
        log.warning("variance clamp %.3e exceeds roundoff level", clamp)
    if log_density is None:
        log_density = post.log_density_unnorm(z)
    argmax_field = fields[int(np.argmax(log_density))]

    map_field = x_map = residual = None
    if map_result is not None:
        map_field = map_result.field
        x_map = post.forward.apply(map_field)
        residual = float(np.linalg.norm(post.x_hat - x_map))
    summary = PosteriorSummary(mean, variance, map_field, argmax_field, x_map, residual, z.shape[0], clamp)
    if label_dim:
        logits = fields[:, -label_dim:]
        probs = softmax(logits)
        summary.label_mean, summary.label_var, _ = moments(probs)
        summary.label_raw_mean, summary.label_raw_var, _ = moments(logits)
    return summary


def ood_score(x_hat, summary):
    """Euclidean distance between the measurement and the MAP's forward image."""
    x_map = summary.x_map if isinstance(summary, PosteriorSummary) else summary
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_map = np.asarray(x_map, dtype=np.float64)
    if x_hat.shape != x_map.shape:
        raise ContractError(f"shape mismatch {x_hat.shape} vs {x_map.shape}")
    return float(np.linalg.norm(x_hat - x_map))


@dataclass
class RejectionRules:
    """``score > c1`` (rule ``"score"``) or ``score + |var(y)| > c2``
    (rule ``"combined"``)."""

    c1: float = np.inf
    c2: float = np.inf
    rule: str = "score"
    percentile: float = 99.0

    def __post_init__(self):
        if self.rule not in ("score", "combined", "none", "all"):
            raise ContractError(f"unknown rejection rule {self.rule!r}")

    def rejects(self, score, var_norm=0.0):
        if self.rule == "none":
            return False
        if self.rule == "all":
            return True
        if self.rule == "score":
            return bool(score > self.c1)
        return bool(score + var_norm > self.c2)


def calibrate_rules(scores, var_norms, percentile=99.0, rule="score"):
    """Thresholds at the given percentile of an in-distribution calibration set."""
    scores = np.asarray(scores, dtype=np.float64)
    var_norms = np.asarray(var_norms, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("empty calibration set")
    return RejectionRules(
        c1=float(np.percentile(scores, percentile)),
        c2=float(np.percentile(scores + var_norms, percentile)),
        rule=rule,
        percentile=percentile,
    )


@dataclass
class Classification:
    probabilities: np.ndarray
    rejected: bool
    entropy: float
    predicted: int


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def classify(summary, rules, score=None):
    """Label probabilities with rejection.  A rejected item gets the uniform
    distribution (entropy ``ln K``); otherwise the posterior label mean, and
    the prediction is its argmax (ties to the lowest index)."""
    if summary.label_mean is None:
        raise ContractError("classification needs a summary with a label block")
    k = summary.label_mean.size
    if score is None:
        score = summary.map_residual if summary.map_residual is not None else 0.0
    var_norm = summary.var_norm or 0.0
    if rules.rejects(score, var_norm):
        return Classification(np.full(k, 1.0 / k), True, float(np.log(k)), int(np.argmax(summary.label_mean)))
    p = summary.label_mean
    return Classification(p.copy(), False, min(entropy(p), float(np.log(k))), int(np.argmax(p)))


@dataclass
class ItemResult:
    score: float
    var_norm: float
    label_mean: np.ndarray
    true_label: int | None = None
    item_id: str = ""


@dataclass
class OodMetrics:
    accuracy: float
    n_accepted: int
    fpr: float
    ood_entropy: float
    auc: float


def auc_rank(negatives, positives):
    """Area under the ROC curve via the Mann-Whitney rank statistic
    (ties count one half)."""
    negatives = np.asarray(negatives, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    n_neg, n_pos = negatives.size, positives.size
    if n_neg == 0 or n_pos == 0:
        raise ContractError("AUC needs both classes")
    ranks = rankdata(np.concatenate([negatives, positives]))
    return float((ranks[n_neg:].sum() - n_pos * (n_pos + 1) / 2.0) / (n_neg * n_pos))


def _classify_item(item, rules):
    k = item.label_mean.size
    if rules.rejects(item.score, item.var_norm):
        return Classification(np.full(k, 1.0 / k), True, float(np.log(k)), int(np.argmax(item.label_mean)))
    p = item.label_mean
    return Classification(p, False, min(entropy(p), float(np.log(k))), int(np.argmax(p)))


def eval_ood_suite(in_items, ood_items, rules):
    """Accuracy on accepted in-distribution items, false-positive rate, mean
    entropy on the OOD set and AUC of the OOD score."""
    if not in_items or not ood_items:
        raise ContractError("both item sets must be non-empty")
    in_cls = [_classify_item(it, rules) for it in in_items]
    ood_cls = [_classify_item(it, rules) for it in ood_items]
    accepted = [(it, c) for it, c in zip(in_items, in_cls) if not c.rejected]
    accuracy = float(np.mean([c.predicted == it.true_label for it, c in accepted])) if accepted else float("nan")
    return OodMetrics(
        accuracy=accuracy,
        n_accepted=len(accepted),
        fpr=float(np.mean([c.rejected for c in in_cls])),
        ood_entropy=float(np.mean([c.entropy for c in ood_cls])),
        auc=auc_rank([it.score for it in in_items], [it.score for it in ood_items]),
    )


def write_metrics_csv(path, items, rules):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "score", "var_norm", "rejected", "predicted", "true_label", "entropy"])
        for it in items:
            c = _classify_item(it, rules)
            writer.writerow([
                it.item_id, repr(float(it.score)), repr(float(it.var_norm)), int(c.rejected),
                c.predicted, "" if it.true_label is None else it.true_label, repr(c.entropy),
            ])
