"""Gaussian-mixture priors and the training loop for the ε-predictor.

Also home to :class:`MixtureDenoiser`, the exact ε* of a mixture prior under the forward process.
It follows the same ``predict``/``input_grad`` protocol as the trained model, so every sampler can
run against the true prior score.
"""

from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy.special import softmax
from tqdm import tqdm

from . import rng
from .model import LAYERS, loss_and_param_grads
from .streams.diffusion import check_step, forward_noising

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GmmSpec:
    weights: tuple
    means: tuple
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        if w.ndim != 1 or len(w) < 1:
            raise ValueError("A mixture needs at least one component")
        if mu.shape != (len(w), 2):
            raise ValueError(f"Expected {len(w)} 2D means, got array of shape {mu.shape}")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError(f"Mixture weights must be non-negative and sum to 1, got {w.tolist()}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def equal(cls, means, sigma):
        k = len(means)
        return cls(tuple([1 / k] * k), tuple(tuple(map(float, m)) for m in means), float(sigma))

    def mean(self):
        return np.asarray(self.weights) @ np.asarray(self.means, dtype=float)

    def covariance(self):
        "σ²I plus the between-component covariance of the means."
        w = np.asarray(self.weights)
        centered = np.asarray(self.means, dtype=float) - self.mean()
        return self.sigma**2 * np.eye(2) + (w[:, None] * centered).T @ centered


# Case-study prior: three equally weighted components with σ = 2.
DEFAULT_PRIOR = GmmSpec.equal([(5, 3), (3, 7), (7, 7)], 2.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    dataset_size: int = 10_000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shards: int = 1

    def __post_init__(self):
        if min(self.epochs, self.dataset_size, self.batch_size, self.shards) < 1:
            raise ValueError("epochs, dataset_size, batch_size and shards must be positive")
        if self.batch_size > self.dataset_size:
            raise ValueError(f"batch_size {self.batch_size} exceeds dataset_size {self.dataset_size}")
        if self.learning_rate < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError("Invalid optimizer settings")


def sample_gmm(spec, n, seed):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gen = np.random.default_rng(seed)
    components = gen.choice(len(spec.weights), size=n, p=np.asarray(spec.weights))
    return np.asarray(spec.means, dtype=float)[components] + spec.sigma * gen.standard_normal((n, 2))


class MixtureDenoiser:
    """Exact noise predictor for a mixture prior.

    Under the forward process x_t ~ Σ w_i N(√ᾱ μ_i, v I) with v = ᾱσ² + 1 - ᾱ, and
    ε*(x_t) = -√(1 - ᾱ) ∇ log p_t(x_t) = √(1 - ᾱ) (x_t - √ᾱ Σ r_i μ_i) / v,
    where r_i are the component responsibilities at x_t.
    """

    def __init__(self, spec):
        self.spec = spec
        self.log_weights = np.log(np.maximum(np.asarray(spec.weights, dtype=float), 1e-300))
        self.means = np.asarray(spec.means, dtype=float)

    def _terms(self, x, t, sched):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        check_step(t, sched)
        ab = sched.alpha_bar[np.asarray(t)]
        ab = np.broadcast_to(ab, (len(x),))[:, None]
        v = ab * self.spec.sigma**2 + 1 - ab
        centers = np.sqrt(ab)[:, :, None] * self.means.T[None]     # (n, 2, K)
        sq = np.sum((x[:, :, None] - centers)**2, axis=1)           # (n, K)
        resp = softmax(self.log_weights - sq / (2 * v), axis=1)
        return x, ab, v, resp

    def predict(self, x, t, sched):
        x, ab, v, resp = self._terms(x, t, sched)
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * (resp @ self.means)) / v

    def input_grad(self, x, t, cotangent, sched):
        single = np.ndim(x) == 1
        x, ab, v, resp = self._terms(x, t, sched)
        c = np.atleast_2d(np.asarray(cotangent, dtype=float))
        # ∂(Σ r_i μ_i)/∂x = (√ᾱ / v) · Cov_r(μ); the Jacobian of ε* is symmetric.
        mbar = resp @ self.means
        centered = self.means[None] - mbar[:, None]                 # (n, K, 2)
        cov = np.einsum('nk,nki,nkj->nij', resp, centered, centered)
        jac_c = c - (ab / v) * np.einsum('nij,nj->ni', cov, c)
        out = np.sqrt(1 - ab) / v * jac_c
        return out[0] if single else out


def _adam(params, grads, state, cfg, step):
    m, v = state
    for name in LAYERS:
        m[name] = cfg.beta1 * m[name] + (1 - cfg.beta1) * grads[name]
        v[name] = cfg.beta2 * v[name] + (1 - cfg.beta2) * grads[name]**2
        m_hat = m[name] / (1 - cfg.beta1**step)
        v_hat = v[name] / (1 - cfg.beta2**step)
        params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def train(model, spec, sched, cfg, progress=None):
    """Fit ε_θ to the mixture with the simple ε-prediction loss and Adam.

    Returns the trained copy of `model` and the per-epoch mean loss. The input model is left intact.
    """
    model = model.copy()
    data = sample_gmm(spec, cfg.dataset_size, rng.substream(cfg.seed, rng.DATA))
    gen = np.random.default_rng(cfg.seed)
    state = ({name: np.zeros_like(model.params[name]) for name in LAYERS},
             {name: np.zeros_like(model.params[name]) for name in LAYERS})
    trace = []
    step = 0
    epochs = tqdm(range(cfg.epochs), desc="train", unit="epoch", disable=None if progress is None else not progress)
    for epoch in epochs:
        order = gen.permutation(cfg.dataset_size)
        total, count = 0.0, 0
        for start in range(0, cfg.dataset_size, cfg.batch_size):
            x0 = data[order[start:start + cfg.batch_size]]
            t = gen.integers(1, sched.T + 1, size=len(x0))
            eps = gen.standard_normal(x0.shape)
            bundle = loss_and_param_grads(model, x0, eps, t, sched, shards=cfg.shards)
            if not math.isfinite(bundle.loss):
                raise DivergenceError(f"Non-finite loss {bundle.loss} at epoch {epoch + 1}, step {step + 1}")
            step += 1
            _adam(model.params, bundle.grads, state, cfg, step)
            total += bundle.loss * len(x0)
            count += len(x0)
        trace.append(total / count)
        epochs.set_postfix(loss=f"{trace[-1]:.4f}")
        log.debug("epoch %d: mean loss %.6f", epoch + 1, trace[-1])
    log.info("Trained %d epochs (%d steps); loss %.4f -> %.4f", cfg.epochs, step, trace[0], trace[-1])
    return model, trace


def evaluate_loss(denoiser, spec, sched, n=10_000, seed=0):
    """Mean ε-prediction loss of any denoiser on fresh mixture data, with t uniform on 1..T.

    This is the quantity :func:`train` reports per epoch. For :class:`MixtureDenoiser` it is the
    lowest loss any model can reach on `spec`.
    """
    gen = rng.substream(seed, rng.DATA, 1)
    x0 = sample_gmm(spec, n, gen)
    t = gen.integers(1, sched.T + 1, size=n)
    eps = gen.standard_normal(x0.shape)
    eps_hat = denoiser.predict(forward_noising(x0, t, eps, sched), t, sched)
    return float(np.mean(np.sum((eps - eps_hat)**2, axis=1)))
