"""scikit-learn style wrappers.

``GanPrior`` learns the prior (``fit`` trains a WGAN-GP, ``sample`` draws
from it).  ``LatentPosteriorRegressor`` turns measurements into posterior
means (``predict``) and pixel-wise variances (``predict_variance``).
``GanPriorClassifier`` does Class 2 classification with OOD rejection.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import hmc, nets
from .data import Dataset
from .forward_ops import IdentityOperator, Mask, RestrictionOperator
from .gan import TrainConfig, train
from .map_opt import MapConfig, latent_map
from .posterior import LatentPosterior, NoiseModel, validate_prior
from .stats import ItemResult, _classify_item, calibrate_rules, summarize
from .utils import child_seed


class GanPrior(TransformerMixin, BaseEstimator):
    """Generative prior fitted by WGAN-GP.

    ``transform`` maps latent rows to data space, so a fitted prior can sit
    at the end of a pipeline that produces latent codes.
    """

    def __init__(self, latent_dim=8, hidden=(256, 256), epochs=200, learning_rate=2e-4, batch_size=64,
                 n_critic=1, gp_lambda=10.0, adam_beta1=0.5, adam_beta2=0.999, seed=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_critic = n_critic
        self.gp_lambda = gp_lambda
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.seed = seed

    def _config(self):
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            n_critic=self.n_critic, gp_lambda=self.gp_lambda, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, seed=self.seed, latent_dim=self.latent_dim, hidden=self.hidden,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.generator_, self.report_ = train(X, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, Z):
        check_is_fitted(self, "generator_")
        Z = check_array(Z, dtype=np.float64)
        return nets.apply(self.generator_, Z)

    def sample(self, n, seed=0):
        check_is_fitted(self, "generator_")
        z = np.random.default_rng(seed).standard_normal((n, self.generator_.input_dim))
        return nets.apply(self.generator_, z)

    def score(self, X, y=None):
        """Negative largest moment gap (higher is better)."""
        check_is_fitted(self, "generator_")
        return -validate_prior(self.generator_, check_array(X, dtype=np.float64), seed=self.seed).max_gap


def _hmc_config(est, seed):
    return hmc.HmcConfig(
        n_samples=est.n_samples, burn_in_fraction=est.burn_in_fraction, initial_step=est.initial_step,
        n_leapfrog=est.n_leapfrog, target_accept=est.target_accept, seed=seed,
    )


class LatentPosteriorRegressor(RegressorMixin, BaseEstimator):
    """Posterior mean field for each measurement row.

    ``fit`` only validates and stores the generator and forward operator
    (the prior is learned separately); ``predict`` runs HMC per row.
    """

    def __init__(self, generator=None, forward=None, noise_sigma=1.0, scale=1.0, shift=0.0,
                 n_samples=4000, burn_in_fraction=0.5, initial_step=1.0, n_leapfrog=10,
                 target_accept=0.65, seed=0):
        self.generator = generator
        self.forward = forward
        self.noise_sigma = noise_sigma
        self.scale = scale
        self.shift = shift
        self.n_samples = n_samples
        self.burn_in_fraction = burn_in_fraction
        self.initial_step = initial_step
        self.n_leapfrog = n_leapfrog
        self.target_accept = target_accept
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.generator is None:
            raise ValueError("a trained generator is required")
        gen = self.generator.generator_ if isinstance(self.generator, GanPrior) else self.generator
        self.generator_ = gen
        self.forward_ = IdentityOperator(gen.output_dim) if self.forward is None else self.forward
        self.noise_ = NoiseModel.from_sigma(self.noise_sigma)
        self.n_features_in_ = self.forward_.output_dim
        return self

    def posterior(self, x_hat):
        check_is_fitted(self, "generator_")
        return LatentPosterior(self.generator_, self.forward_, self.noise_, x_hat, self.scale, self.shift)

    def summarize(self, X):
        check_is_fitted(self, "generator_")
        X = check_array(X, dtype=np.float64)
        out = []
        for i, x_hat in enumerate(X):
            post = self.posterior(x_hat)
            seed = child_seed(self.seed, i)
            chain = hmc.sample(post, _hmc_config(self, seed))
            out.append(summarize(chain, post, latent_map(post, MapConfig(seed=seed))))
        self.summaries_ = out
        return out

    def predict(self, X):
        return np.stack([s.mean for s in self.summarize(X)])

    def predict_variance(self, X):
        return np.stack([s.variance for s in self.summarize(X)])


class GanPriorClassifier(ClassifierMixin, BaseEstimator):
    """Class 2 classifier: a joint prior over ``[x | y]`` is inferred from
    ``x`` alone; the label is the argmax of the posterior label mean.

    Items whose OOD score exceeds the calibrated threshold are rejected and
    get uniform label probabilities.
    """

    def __init__(self, prior=None, n_labels=10, noise_sigma=1.0, rule="score", percentile=99.0,
                 n_calibration=50, n_samples=2000, burn_in_fraction=0.5, initial_step=1.0,
                 n_leapfrog=10, target_accept=0.65, seed=0):
        self.prior = prior
        self.n_labels = n_labels
        self.noise_sigma = noise_sigma
        self.rule = rule
        self.percentile = percentile
        self.n_calibration = n_calibration
        self.n_samples = n_samples
        self.burn_in_fraction = burn_in_fraction
        self.initial_step = initial_step
        self.n_leapfrog = n_leapfrog
        self.target_accept = target_accept
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=int)
        self.classes_ = np.arange(self.n_labels)
        onehot = np.eye(self.n_labels)[y]
        prior = GanPrior(seed=self.seed) if self.prior is None else self.prior
        if not hasattr(prior, "generator_"):
            prior.fit(Dataset(X, onehot).joint())
        self.generator_ = prior.generator_
        self.n_features_in_ = X.shape[1]
        calib = X[-min(self.n_calibration, len(X)):]
        items = self._items(calib, stream=1)
        self.rules_ = calibrate_rules([it.score for it in items], [it.var_norm for it in items],
                                      self.percentile, self.rule)
        return self

    def _items(self, X, stream=0):
        dim = X.shape[1]
        mask = Mask(np.r_[np.ones(dim, bool), np.zeros(self.n_labels, bool)])
        forward = RestrictionOperator(mask)
        noise = NoiseModel.from_sigma(self.noise_sigma)
        items = []
        for i, x in enumerate(X):
            post = LatentPosterior(self.generator_, forward, noise, x)
            seed = child_seed(self.seed, i, stream=stream)
            chain = hmc.sample(post, _hmc_config(self, seed))
            s = summarize(chain, post, latent_map(post, MapConfig(seed=seed)), label_dim=self.n_labels)
            items.append(ItemResult(s.map_residual, s.var_norm, s.label_mean))
        return items

    def predict_proba(self, X):
        check_is_fitted(self, "rules_")
        X = check_array(X, dtype=np.float64)
        self.items_ = self._items(X)
        return np.stack([_classify_item(it, self.rules_).probabilities for it in self.items_])

    def predict(self, X):
        """Argmax of the posterior label mean (ties to the lowest label),
        also for rejected rows; see :attr:`rejected_`."""
        self.predict_proba(X)
        cls = [_classify_item(it, self.rules_) for it in self.items_]
        self.rejected_ = np.array([c.rejected for c in cls])
        return np.array([c.predicted for c in cls])

    def decision_function(self, X):
        """OOD score of each row (larger means further from the prior's range)."""
        check_is_fitted(self, "rules_")
        return np.array([it.score for it in self._items(check_array(X, dtype=np.float64))])


__all__ = ["GanPrior", "LatentPosteriorRegressor", "GanPriorClassifier"]
