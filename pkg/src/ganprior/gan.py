"""WGAN-GP training of a dense generator prior."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, ContractError, NonFiniteError, NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """WGAN-GP settings; the defaults are the small-data setting (200 epochs,
    one critic step per generator step)."""

    epochs: int = 200
    learning_rate: float = 2e-4
    batch_size: int = 64
    n_critic: int = 1
    gp_lambda: float = 10.0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    latent_dim: int = 8
    hidden: tuple = (256, 256)
    checkpoint_every: int = 50

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1", key="gan.n_critic")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0", key="gan.learning_rate")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2", key="gan.batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", key="gan.epochs")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1", key="gan.latent_dim")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    critic_loss: list = field(default_factory=list)
    gen_loss: list = field(default_factory=list)
    gp: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def append(self, epoch, critic_loss, gen_loss, gp, seconds):
        values = (critic_loss, gen_loss, gp)
        if not np.all(np.isfinite(values)):
            raise NumericError(f"non-finite loss summary at epoch {epoch}")
        self.epochs.append(epoch)
        self.critic_loss.append(float(critic_loss))
        self.gen_loss.append(float(gen_loss))
        self.gp.append(float(gp))
        self.seconds.append(float(seconds))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "critic_loss", "gen_loss", "gp", "seconds"])
            for row in zip(self.epochs, self.critic_loss, self.gen_loss, self.gp, self.seconds):
                writer.writerow([row[0], *(repr(v) for v in row[1:])])


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and Adam moments differ in length")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g):
            raise ContractError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def input_gradients(critic, y):
    """Row-wise gradient of the critic output with respect to its input."""
    tape = ad.Tape()
    y_node = tape.leaf(y)
    ad.backward(ad.sum(nets.apply(critic, y_node)))
    return y_node.grad


def _penalty_terms(critic, y_hat, params):
    """Per-row ``|grad d(y_hat)|`` as a node differentiable in ``params``.

    The tangent of the critic along the unit input-gradient direction has the
    gradient norm as its value and the norm's parameter gradient as its
    first derivative.  Rows with an exactly vanishing gradient get the zero
    subgradient.
    """
    g = input_gradients(critic, y_hat)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    direction = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
    out = nets.apply(critic, ad.Dual(y_hat, direction), params=params)
    return out.tangent


def _critic_terms(critic, fake, real, eps, gp_lambda, tape, params):
    batch = real.shape[0]
    scores = nets.apply(critic, tape.leaf(np.vstack([fake, real]), "input"), params=params)
    wdist = ad.mean(scores[:batch]) - ad.mean(scores[batch:])
    y_hat = eps[:, None] * real + (1.0 - eps[:, None]) * fake
    norms = _penalty_terms(critic, y_hat, params)
    gap = norms - 1.0
    gp = ad.mean(gap * gap)
    return wdist + gp_lambda * gp, wdist, gp


def critic_loss(critic, gen, real_batch, z_batch, gp_lambda=10.0, eps=None, rng=None, tape=None, params=None):
    """``E[d(g(z))] - E[d(y)] + gp_lambda * E[(|grad d(y_hat)| - 1)^2]``.

    ``y_hat = eps*y + (1-eps)*g(z)`` with one ``eps ~ U(0, 1)`` per pair
    (drawn from ``rng`` unless given).  The returned node is differentiable
    in the critic weights when ``params`` (from :func:`nets.bind`) are given.
    """
    real_batch = np.atleast_2d(np.asarray(real_batch, dtype=np.float64))
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    if real_batch.shape[0] == 0 or z_batch.shape[0] != real_batch.shape[0]:
        raise ContractError("real and latent batches must be non-empty and equally sized")
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.uniform(size=real_batch.shape[0])
    tape = ad.Tape() if tape is None else tape
    if params is None:
        params = nets.bind(critic, tape)
    fake = nets.apply(gen, z_batch)
    loss, _, _ = _critic_terms(critic, fake, real_batch, np.asarray(eps, dtype=np.float64), gp_lambda, tape, params)
    return loss


def generator_loss(critic, gen, z_batch, tape=None, params=None):
    """``-E[d(g(z))]``, differentiable in the generator weights via ``params``."""
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    if z_batch.shape[0] == 0:
        raise ContractError("empty latent batch")
    tape = ad.Tape() if tape is None else tape
    if params is None:
        params = nets.bind(gen, tape)
    fake = nets.apply(gen, tape.leaf(z_batch, "input"), params=params)
    return -ad.mean(nets.apply(critic, fake))


def _update(net, params, state, cfg):
    grads = [node.grad for pair in params for node in pair]
    new, state = adam_step(
        net.flat_params(), grads, state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2
    )
    net.set_flat_params(new)
    return state


def train(dataset, config, checkpoint_dir=None, generator=None, critic=None):
    """Train a WGAN-GP on the rows of ``dataset``; returns ``(generator, report)``.

    Every batch drives one critic update and every ``n_critic`` critic
    updates are followed by one generator update.  The run is deterministic
    in ``config.seed``.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ContractError("dataset must be a non-empty (count, dim) array")
    count, dim = data.shape
    rng = np.random.default_rng(config.seed)
    init_seeds = rng.integers(0, 2**63 - 1, size=2)
    if generator is None:
        generator = nets.init(nets.generator_spec(config.latent_dim, dim, config.hidden), int(init_seeds[0]))
    if critic is None:
        critic = nets.init(nets.critic_spec(dim, config.hidden), int(init_seeds[1]), role="critic")
    if generator.output_dim != dim or critic.input_dim != dim:
        raise ContractError("network dims do not match the dataset")
    generator.meta.setdefault("latent_dim", generator.input_dim)

    report = TrainReport()
    g_state = AdamState.zeros_like(generator.flat_params())
    c_state = AdamState.zeros_like(critic.flat_params())
    batch = min(config.batch_size, count)
    n_batches = max(count // batch, 1)
    latent = generator.input_dim
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    critic_steps = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(count)
        c_losses, g_losses, gps = [], [], []
        for b in range(n_batches):
            real = data[order[b * batch:(b + 1) * batch]]
            z = rng.standard_normal((real.shape[0], latent))
            eps = rng.uniform(size=real.shape[0])
            try:
                tape = ad.Tape()
                params = nets.bind(critic, tape)
                fake = nets.apply(generator, z)
                loss, _, gp = _critic_terms(critic, fake, real, eps, config.gp_lambda, tape, params)
                ad.backward(loss)
                c_state = _update(critic, params, c_state, config)
                c_losses.append(float(loss.value))
                gps.append(float(gp.value))
                critic_steps += 1
                if critic_steps % config.n_critic == 0:
                    tape = ad.Tape()
                    params = nets.bind(generator, tape)
                    z = rng.standard_normal((batch, latent))
                    loss = generator_loss(critic, generator, z, tape=tape, params=params)
                    ad.backward(loss)
                    g_state = _update(generator, params, g_state, config)
                    g_losses.append(float(loss.value))
            except NonFiniteError as exc:
                raise NumericError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
        report.append(
            epoch,
            np.mean(c_losses),
            np.mean(g_losses) if g_losses else 0.0,
            np.mean(gps),
            time.perf_counter() - start,
        )
        if epoch % 10 == 0 or epoch == config.epochs:
            log.info(
                "epoch %d critic %.4f gen %.4f gp %.4f",
                epoch, report.critic_loss[-1], report.gen_loss[-1], report.gp[-1],
            )
        if ckpt_dir is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            path = ckpt_dir / f"generator_{epoch:04d}.ganp"
            nets.save(generator, path)
            critic_path = ckpt_dir / f"critic_{epoch:04d}.ganp"
            nets.save(critic, critic_path)
            report.checkpoints += [str(path), str(critic_path)]
    return generator, report
