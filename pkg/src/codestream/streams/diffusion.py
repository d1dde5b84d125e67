"""Noise schedules, closed-form diffusion math and the ancestral reverse chain.

Steps are indexed 1..T, with ᾱ_0 ≡ 1: the reverse chain moves from step t to step t - 1 and ends at
t = 0 (clean data). All arithmetic is float64.

A *denoiser* is anything with a ``predict(x, t, sched)`` method returning ε̂ for a batch of points
``x`` of shape (n, 2); gradient guidance additionally needs ``input_grad(x, t, cotangent, sched)``.
:class:`codestream.model.EpsModel` and :class:`codestream.trainer.MixtureDenoiser` both qualify.

Example::

    >>> sched = build_linear_schedule(2, 0.1, 0.2)
    >>> sched.alpha_bar[1:].round(4).tolist()
    [0.9, 0.72]
"""

from dataclasses import dataclass
import numbers

import numpy as np

from .core import stream


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed β_t, α_t and ᾱ_t. Arrays have length T + 1; index 0 holds β_0 = 0, α_0 = ᾱ_0 = 1."""
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def build_linear_schedule(T, beta_start=1e-4, beta_end=0.02):
    if not isinstance(T, numbers.Integral) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"Expected 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.empty(T + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), beta, alpha, alpha_bar)


def check_step(t, sched, allow_zero=False):
    "Validate a step index (scalar or array) against the schedule; returns it unchanged."
    lo = 0 if allow_zero else 1
    arr = np.asarray(t)
    if arr.dtype.kind not in 'iu':
        raise ValueError(f"Step index must be an integer, got {t!r}")
    if arr.size and (arr.min() < lo or arr.max() > sched.T):
        raise ValueError(f"Step index out of range [{lo}, {sched.T}]: {t!r}")
    return t


def _at(arr, t):
    # Scalar t gives a scalar coefficient; a batch of t gives a column to broadcast over (n, 2).
    if np.ndim(t) == 0:
        return arr[t]
    return arr[np.asarray(t)][:, None]


def forward_noising(x0, t, eps, sched):
    "x_t = √ᾱ_t x_0 + √(1 - ᾱ_t) ε for a caller-supplied noise draw ε."
    check_step(t, sched)
    ab = _at(sched.alpha_bar, t)
    return np.sqrt(ab) * np.asarray(x0, dtype=float) + np.sqrt(1 - ab) * np.asarray(eps, dtype=float)


def posterior_mean(x_t, eps_hat, t, sched):
    "Mean of the reverse transition p(x_{t-1} | x_t) under the ε-parameterization."
    check_step(t, sched)
    a = _at(sched.alpha, t)
    ab = _at(sched.alpha_bar, t)
    return (np.asarray(x_t, dtype=float) - (1 - a) / np.sqrt(1 - ab) * np.asarray(eps_hat, dtype=float)) / np.sqrt(a)


def tweedie_x0(x_t, eps_hat, t, sched):
    "Predicted clean sample E[x_0 | x_t] from the noise prediction."
    check_step(t, sched)
    ab = _at(sched.alpha_bar, t)
    return (np.asarray(x_t, dtype=float) - np.sqrt(1 - ab) * np.asarray(eps_hat, dtype=float)) / np.sqrt(ab)


def reverse_step(sched, x_t, eps_hat, t, noise):
    """One draw from N(μ(x_t, ε̂), β_t I) given the noise. The final step (t = 1) returns the mean."""
    if not isinstance(t, numbers.Integral):
        raise ValueError(f"reverse_step takes a scalar step index, got {t!r}")
    mean = posterior_mean(x_t, eps_hat, t, sched)
    if t == 1:
        return mean
    return mean + np.sqrt(sched.beta[t]) * noise


def ddpm_step(model, sched, x_t, t, noise):
    return reverse_step(sched, x_t, model.predict(x_t, t, sched), t, noise)


@stream
def denoise(model, sched, x, t, noise):
    """Ancestral reverse chain starting from states `x` at step `t`.

    Yields (t - 1, x_{t-1}), ..., (0, x_0). `noise` has shape (len(x), T, 2): `noise[:, s - 1]`
    drives step s, so a row's noise at a given step does not depend on where the chain started.
    """
    check_step(t, sched, allow_zero=True)
    while t > 0:
        x = ddpm_step(model, sched, x, t, noise[:, t - 1])
        t -= 1
        yield t, x
