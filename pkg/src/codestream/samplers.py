"""Base and guided samplers.

All samplers are built from two streams over vectorized states:

- :func:`codestream.streams.diffusion.denoise`, the ancestral reverse chain, and
- :func:`blockwise`, which unrolls N copies of the chain for B steps, scores each endpoint with the
  Tweedie value estimate and keeps the best one. It yields one :class:`Selection` per block.

Best-of-N is blockwise selection with B = T; SVDD-PM is B = 1. CoDe(η) starts from a reference
point partially noised to step τ = round(ηT) instead of pure noise. Gradient guidance (:func:`guided`)
instead shifts ε̂ along the gradient of the log reward at x̂_0.

Runs are processed in chunks whose size depends only on N; each run draws its randomness from its
own substreams (see :mod:`codestream.rng`), so results never depend on the number of workers.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import math
import numbers
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import softmax

from . import rng
from .rewards import estimate_value, reward_grad, GaussianReward, UnsupportedRewardError
from .streams import denoise, forward_noising, just, reverse_step, stream, tweedie_x0

log = logging.getLogger(__name__)

METHODS = ('Base', 'CoDe', 'CoDeEta', 'BoN', 'SVDDPM', 'GradGuide')
DEFAULT_BLOCK = 100
# Upper bound on N * runs held in memory per chunk (noise tables are rows × T × 2 floats).
ROWS_PER_CHUNK = 4096


@dataclass(frozen=True)
class GuidanceConfig:
    method: str = 'CoDe'
    N: int = 1
    B: Optional[int] = None
    eta: float = 1.0
    scale: float = 0.0
    x_ref: Optional[tuple] = None
    seed: Optional[int] = None
    exact_gradient: bool = True
    temperature: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"Unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not isinstance(self.N, numbers.Integral) or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if self.B is not None and (not isinstance(self.B, numbers.Integral) or self.B < 1):
            raise ValueError(f"B must be a positive integer, got {self.B!r}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.scale < 0:
            raise ValueError(f"Guidance scale must be non-negative, got {self.scale}")
        if self.temperature < 0:
            raise ValueError(f"Selection temperature must be non-negative, got {self.temperature}")

    def steps(self, T):
        "Number of reverse steps a run takes (τ for CoDe(η), T otherwise)."
        return noise_level(self.eta, T) if self.method == 'CoDeEta' else T

    def block_size(self, T):
        if self.method == 'BoN':
            return self.steps(T)
        if self.method == 'SVDDPM':
            return 1
        if self.method in ('CoDe', 'CoDeEta'):
            return self.B if self.B is not None else min(DEFAULT_BLOCK, self.steps(T))
        return None


class RolloutStream(NamedTuple):
    "One of the N candidate chains of a run, as seen at the end of a block."
    run: int
    stream: int
    state: np.ndarray
    value: float


@dataclass(eq=False)
class Selection:
    t: int                   # step reached at the end of the block
    winners: np.ndarray      # (R,) selected stream id per run
    values: np.ndarray       # (R, N) value estimates of the candidates
    candidates: np.ndarray   # (R, N, 2) candidate states
    x: np.ndarray            # (R, 2) selected states

    def rollouts(self, run):
        return [RolloutStream(run, n, self.candidates[run, n], float(self.values[run, n]))
                for n in range(self.values.shape[1])]


def noise_level(eta, T):
    "τ = round(ηT), rounding halves up."
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    tau = int(math.floor(eta * T + 0.5))
    if tau < 1:
        raise ValueError(f"eta={eta} gives τ = 0 for T={T}")
    return tau


def blocks_per_run(tau, B):
    return -(-tau // B)


def _select(values, temperature, select_rngs):
    if temperature == 0:
        # argmax returns the first maximum, so ties go to the lowest stream id.
        return np.argmax(values, axis=1)
    probs = softmax(values / temperature, axis=1)
    return np.array([gen.choice(len(p), p=p) for gen, p in zip(select_rngs, probs)])


@stream
def blockwise(model, sched, spec, x, t, N, B, noise, profile=None, temperature=0.0, select_rngs=None):
    """Controlled denoising from states `x` (one per run) at step `t`.

    Every block unrolls N chains per run for B steps (the last block may be shorter), scores the
    endpoints with :func:`estimate_value` and continues from the best one. `noise` holds one row per
    (run, stream) pair, ordered run-major.
    """
    R = len(x)
    while t > 0:
        t_lo = max(t - B, 0)
        chain = denoise(model, sched, np.repeat(x, N, axis=0), t, noise)
        if profile is not None:
            chain = profile.stream('model_evals', chain, weight=R * N)
        _, xs = chain[t - t_lo - 1]
        values = np.asarray(estimate_value(model, sched, spec, xs, t_lo)).reshape(R, N)
        if profile is not None:
            profile.count('reward_queries', R * N)
            profile.count('selections', R)
        winners = _select(values, temperature, select_rngs)
        candidates = xs.reshape(R, N, 2)
        x = candidates[np.arange(R), winners]
        t = t_lo
        yield Selection(t, winners, values, candidates, x)


@stream
def guided(model, sched, spec, x, t, noise, scale, exact=True, profile=None):
    """Reverse chain with ε̂' = ε̂ - √(1 - ᾱ_t) λ ∇_{x_t} log r(x̂_0(x_t)).

    With `exact` the chain rule goes through ε_θ (via ``model.input_grad``); otherwise ε_θ is
    frozen and ∂x̂_0/∂x_t ≈ I / √ᾱ_t.
    """
    while t > 0:
        eps = model.predict(x, t, sched)
        if scale:
            ab = sched.alpha_bar[t]
            g = reward_grad(spec, tweedie_x0(x, eps, t, sched))
            if exact:
                grad = (g - np.sqrt(1 - ab) * model.input_grad(x, t, g, sched)) / np.sqrt(ab)
            else:
                grad = g / np.sqrt(ab)
            eps = eps - np.sqrt(1 - ab) * scale * grad
            if profile is not None:
                profile.count('reward_queries', len(x))
        if profile is not None:
            profile.count('model_evals', len(x))
        x = reverse_step(sched, x, eps, t, noise[:, t - 1])
        t -= 1
        yield t, x


def _run_chunks(fn, n, N, workers=1):
    if n < 1:
        raise ValueError(f"Number of samples must be >= 1, got {n}")
    per = max(1, ROWS_PER_CHUNK // N)
    chunks = [range(lo, min(lo + per, n)) for lo in range(0, n, per)]
    log.debug("%d runs of %d stream%s in %d chunk%s", n, N, "" if N == 1 else "s", len(chunks), "" if len(chunks) == 1 else "s")
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, chunks))
    else:
        results = [fn(chunk) for chunk in chunks]
    return np.concatenate(results)


def base_sample(model, sched, n, seed, workers=1, profile=None):
    "n independent ancestral rollouts from x_T ~ N(0, I); shape (n, 2)."
    def chunk(runs):
        chain = denoise(model, sched, rng.initial_noise(seed, runs), sched.T, rng.noise_table(seed, runs, 1, sched.T))
        if profile is not None:
            chain = profile.stream('model_evals', chain, weight=len(runs))
        return chain.last()[1]
    return _run_chunks(chunk, n, 1, workers)


def base_trajectory(model, sched, n, seed, every=1):
    "States (t, x_t) of the same rollouts as base_sample, at every `every`-th step from T down to 0."
    runs = range(n)
    x = rng.initial_noise(seed, runs)
    chain = just((sched.T, x)) >> denoise(model, sched, x, sched.T, rng.noise_table(seed, runs, 1, sched.T))
    states = list(chain[::every])
    if states[-1][0] != 0:
        states.append(chain.last())
    return states


def _check_selection(N, B, tau):
    if not isinstance(N, numbers.Integral) or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if not isinstance(B, numbers.Integral) or not 1 <= B <= tau:
        raise ValueError(f"Block size must lie in [1, {tau}], got {B!r}")


def _controlled(model, sched, spec, N, B, tau, x_ref, seed, n, temperature, workers, profile):
    _check_selection(N, B, tau)
    T = sched.T
    if x_ref is not None:
        x_ref = np.asarray(x_ref, dtype=float)
        if x_ref.shape not in ((2,), (n, 2)):
            raise ValueError(f"x_ref must be one point or one point per sample, got shape {x_ref.shape}")

    def chunk(runs):
        z = rng.initial_noise(seed, runs)
        if tau == T:
            # No noise conditioning: start from pure noise.
            x = z
        else:
            ref = x_ref if x_ref.ndim == 1 else x_ref[runs.start:runs.stop]
            x = forward_noising(ref, tau, z, sched)
        select_rngs = [rng.substream(seed, rng.SELECT, run) for run in runs] if temperature else None
        noise = rng.noise_table(seed, runs, N, T)
        selections = blockwise(model, sched, spec, x, tau, N, B, noise, profile, temperature, select_rngs)
        return selections.last().x
    return _run_chunks(chunk, n, N, workers)


def code_samples(model, sched, spec, N, B, seed, n, temperature=0.0, workers=1, profile=None):
    return _controlled(model, sched, spec, N, B, sched.T, None, seed, n, temperature, workers, profile)


def code_sample(model, sched, spec, N, B, seed, **kwargs):
    return code_samples(model, sched, spec, N, B, seed, 1, **kwargs)[0]


def code_eta_samples(model, sched, spec, N, B, eta, x_ref, seed, n, temperature=0.0, workers=1, profile=None):
    tau = noise_level(eta, sched.T)
    if x_ref is None and tau < sched.T:
        raise ValueError("CoDe(η) with η < 1 needs a reference point x_ref")
    return _controlled(model, sched, spec, N, B, tau, x_ref, seed, n, temperature, workers, profile)


def code_eta_sample(model, sched, spec, N, B, eta, x_ref, seed, **kwargs):
    return code_eta_samples(model, sched, spec, N, B, eta, x_ref, seed, 1, **kwargs)[0]


def svdd_samples(model, sched, spec, N, seed, n, **kwargs):
    return code_samples(model, sched, spec, N, 1, seed, n, **kwargs)


def svdd_sample(model, sched, spec, N, seed, **kwargs):
    return code_sample(model, sched, spec, N, 1, seed, **kwargs)


def bon_samples(model, sched, spec, N, seed, n, **kwargs):
    return code_samples(model, sched, spec, N, sched.T, seed, n, **kwargs)


def bon_sample(model, sched, spec, N, seed, **kwargs):
    return code_sample(model, sched, spec, N, sched.T, seed, **kwargs)


def grad_guided_samples(model, sched, spec, scale, seed, n, exact=True, workers=1, profile=None):
    if not isinstance(spec, GaussianReward):
        raise UnsupportedRewardError(f"Gradient guidance needs a differentiable reward; {type(spec).__name__} has none")
    if scale < 0:
        raise ValueError(f"Guidance scale must be non-negative, got {scale}")

    def chunk(runs):
        chain = guided(model, sched, spec, rng.initial_noise(seed, runs), sched.T,
                       rng.noise_table(seed, runs, 1, sched.T), scale, exact, profile)
        return chain.last()[1]
    return _run_chunks(chunk, n, 1, workers)


def grad_guided_sample(model, sched, spec, scale, seed, **kwargs):
    return grad_guided_samples(model, sched, spec, scale, seed, 1, **kwargs)[0]


def reference_points(spec, seed, n):
    "Draws from the reward distribution itself, one per run, for conditioning CoDe(η)."
    scale = spec.sigma if isinstance(spec, GaussianReward) else spec.delta
    mu = np.asarray(spec.mu, dtype=float)
    return np.stack([mu + scale * rng.substream(seed, rng.REFERENCE, run).standard_normal(2) for run in range(n)])


def guided_samples(model, sched, spec, cfg, n, seed=None, x_ref=None, workers=1, profile=None):
    "Dispatch a GuidanceConfig to its sampler; returns (n, 2) samples."
    seed = cfg.seed if cfg.seed is not None else seed
    if seed is None:
        raise ValueError("No seed given")
    T = sched.T
    common = dict(workers=workers, profile=profile)
    if cfg.method == 'Base':
        return base_sample(model, sched, n, seed, **common)
    if cfg.method == 'GradGuide':
        return grad_guided_samples(model, sched, spec, cfg.scale, seed, n, exact=cfg.exact_gradient, **common)
    common['temperature'] = cfg.temperature
    if cfg.method == 'CoDeEta':
        x_ref = x_ref if x_ref is not None else cfg.x_ref
        return code_eta_samples(model, sched, spec, cfg.N, cfg.block_size(T), cfg.eta, x_ref, seed, n, **common)
    return code_samples(model, sched, spec, cfg.N, cfg.block_size(T), seed, n, **common)
