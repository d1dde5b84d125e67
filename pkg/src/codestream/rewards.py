"""Reward functions and the Tweedie value estimate used by every guidance method.

Two rewards are provided:

- :class:`GaussianReward`, the density of N(μ_r, σ_r² I) at x: smooth, with a closed-form log and gradient.
- :class:`QuantizedReward`, -δ·floor(‖x - μ_r‖ / δ): piecewise constant, so its gradient is zero
  almost everywhere and gradient guidance cannot use it. Gradient-free selection still works.

Selection only depends on the ordering of values, so it uses the log-density for the Gaussian
reward (numerically stable far from μ_r) and the raw reward for the quantized one.
"""

from dataclasses import dataclass
import math

import numpy as np

from .streams.diffusion import check_step, tweedie_x0


class UnsupportedRewardError(TypeError):
    "The requested operation does not exist for this reward (e.g. gradients of a quantized reward)."


@dataclass(frozen=True)
class GaussianReward:
    mu: tuple
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"Reward sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class QuantizedReward:
    mu: tuple
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"Quantization step must be positive, got {self.delta}")


def _points(x):
    x = np.asarray(x, dtype=float)
    return x.ndim == 1, np.atleast_2d(x)

def _result(single, values):
    return float(values[0]) if single else values


def reward(spec, x):
    single, x = _points(x)
    if isinstance(spec, GaussianReward):
        return _result(single, np.exp(_log_density(spec, x)))
    elif isinstance(spec, QuantizedReward):
        dist = np.linalg.norm(x - np.asarray(spec.mu, dtype=float), axis=1)
        return _result(single, -spec.delta * np.floor(dist / spec.delta))
    raise ValueError(f"Unknown reward spec {spec!r}")


def _log_density(spec, x):
    sq = np.sum((x - np.asarray(spec.mu, dtype=float))**2, axis=1)
    return -sq / (2 * spec.sigma**2) - math.log(2 * math.pi * spec.sigma**2)


def log_reward(spec, x):
    if not isinstance(spec, GaussianReward):
        raise UnsupportedRewardError(f"log_reward is only defined for the Gaussian reward, not {type(spec).__name__}")
    single, x = _points(x)
    return _result(single, _log_density(spec, x))


def reward_grad(spec, x):
    "∇ log r(x) = (μ_r - x) / σ_r²."
    if not isinstance(spec, GaussianReward):
        raise UnsupportedRewardError(f"{type(spec).__name__} has no usable gradient")
    x = np.asarray(x, dtype=float)
    return (np.asarray(spec.mu, dtype=float) - x) / spec.sigma**2


def selection_score(spec, x):
    "The monotone reward transform that selection ranks by."
    if isinstance(spec, GaussianReward):
        return log_reward(spec, x)
    return reward(spec, x)


def estimate_value(model, sched, spec, x_t, t):
    """V(x_t) ≈ score(x̂_0(x_t)), with x̂_0 from Tweedie's formula; at t = 0 the score of x_t itself.

    Values are on the :func:`selection_score` scale, not the density scale of :func:`reward`: for a
    :class:`GaussianReward` they are log-densities (so at t = 0 this is ``log_reward(spec, x_t)``,
    e.g. -log(8π) at μ_r for σ_r = 2), for a :class:`QuantizedReward` the raw reward. The same holds
    for ``Selection.values``. Rankings, and therefore selections, are the same on either scale.
    """
    check_step(t, sched, allow_zero=True)
    single, x = _points(x_t)
    if t == 0:
        return _result(single, np.atleast_1d(selection_score(spec, x)))
    x0 = tweedie_x0(x, model.predict(x, t, sched), t, sched)
    return _result(single, np.atleast_1d(selection_score(spec, x0)))
