"""Evaluation quantities for batches of samples, and the CSV schemas results are written in.

Rewards are reported in density form. Ratios and paired comparisons are computed on the log scale,
so they survive densities that underflow far from the reward mean. KL divergences are estimated by
fitting a Gaussian to each batch and using the closed form between the two fits;
:func:`kl_upper_bound` gives the analytic bound for the selection samplers.
"""

import csv
from dataclasses import astuple, dataclass, fields
import logging
import math

import numpy as np
from scipy import linalg, special

from .rewards import GaussianReward, log_reward, reward, selection_score

log = logging.getLogger(__name__)

RIDGE = 1e-8
MIN_EIGENVALUE = 1e-10


class SchemaError(ValueError):
    def __init__(self, column, message):
        super().__init__(f"column {column!r}: {message}")
        self.column = column


def _batch(samples, minimum=1):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ValueError(f"Expected a batch of 2D points, got array of shape {samples.shape}")
    if len(samples) < minimum:
        raise ValueError(f"Need at least {minimum} sample{'s' if minimum > 1 else ''}, got {len(samples)}")
    return samples


def expected_reward(samples, spec):
    return float(np.mean(reward(spec, _batch(samples))))


def _log_mean_reward(samples, spec):
    scores = log_reward(spec, _batch(samples))
    return float(special.logsumexp(scores) - math.log(len(scores)))


def normalized_reward(samples, base, spec):
    """Expected reward of `samples` relative to that of the base batch.

    For the Gaussian reward the ratio is taken in log space, so it stays finite when both densities
    underflow. A base batch with zero expected reward gives nan or ±inf and a warning.
    """
    if isinstance(spec, GaussianReward):
        with np.errstate(over='ignore'):
            ratio = float(np.exp(_log_mean_reward(samples, spec) - _log_mean_reward(base, spec)))
    else:
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = float(np.float64(expected_reward(samples, spec)) / np.float64(expected_reward(base, spec)))
    if not math.isfinite(ratio):
        log.warning("Normalized reward is %s: the base batch has (numerically) zero expected reward"
                    " relative to the guided batch", ratio)
    return ratio


def mean_log_reward(samples, spec):
    "Mean log-density reward; None for rewards without a log form."
    if not isinstance(spec, GaussianReward):
        return None
    return float(np.mean(log_reward(spec, _batch(samples))))


def win_rate(guided, base, spec):
    """Fraction of index-paired samples where the guided one has the larger reward; ties count half.

    Pairs are compared on the selection scale (log-density for the Gaussian reward), which orders
    samples like the reward itself but does not underflow far from the reward mean.
    """
    guided, base = _batch(guided), _batch(base)
    if len(guided) != len(base):
        raise ValueError(f"Batches must be paired: {len(guided)} guided vs {len(base)} base samples")
    rg, rb = selection_score(spec, guided), selection_score(spec, base)
    return float(np.mean((rg > rb) + 0.5 * (rg == rb)))


@dataclass(frozen=True, eq=False)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(samples):
    "Sample mean and unbiased covariance; a small ridge keeps collapsed batches positive-definite."
    samples = _batch(samples, minimum=2)
    mean = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False)
    cov = (cov + cov.T) / 2
    if np.linalg.eigvalsh(cov)[0] < MIN_EIGENVALUE:
        cov = cov + RIDGE * np.eye(2)
    return GaussianFit(mean, cov)


def _cholesky(cov, name):
    try:
        return linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError:
        raise ValueError(f"Covariance of {name} is not positive-definite") from None


def gaussian_kl(a, b):
    "KL(a ‖ b) between two Gaussian fits."
    fa = _cholesky(a.cov, "a")
    fb = _cholesky(b.cov, "b")
    k = len(a.mean)
    diff = np.asarray(b.mean) - np.asarray(a.mean)
    trace = np.trace(linalg.cho_solve(fb, a.cov))
    mahalanobis = diff @ linalg.cho_solve(fb, diff)
    logdet_a = 2 * np.sum(np.log(np.diag(fa[0])))
    logdet_b = 2 * np.sum(np.log(np.diag(fb[0])))
    return float(max(0.5 * (trace + mahalanobis - k + logdet_b - logdet_a), 0.0))


def kl_fit(samples, base):
    return gaussian_kl(fit_gaussian(samples), fit_gaussian(base))


def kl_upper_bound(method, N, B, T, eta=1.0):
    """Analytic KL bound of a selection sampler against the base model.

    Best-of-N over full rollouts has KL ≤ log N - (N - 1)/N; selecting every B steps over the ηT steps
    of a run repeats that ηT/B times. Gradient guidance has no such bound (NaN).
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    per_selection = math.log(N) - (N - 1) / N
    if method == 'Base':
        return 0.0
    if method == 'GradGuide':
        return math.nan
    if method == 'BoN':
        return per_selection
    if method == 'SVDDPM':
        return per_selection * eta * T
    if method in ('CoDe', 'CoDeEta'):
        if not 1 <= B <= T:
            raise ValueError(f"Block size must lie in [1, {T}], got {B}")
        return per_selection * eta * T / B
    raise ValueError(f"Unknown method {method!r}")


def batch_variance(samples):
    samples = _batch(samples, minimum=2)
    var = samples.var(axis=0, ddof=1)
    return float(var[0]), float(var[1])


@dataclass
class MetricsRow:
    method: str
    N: int
    B: int
    eta: float
    scale: float
    seed: int
    expected_reward: float
    normalized_reward: float
    win_rate: float
    kl_fit: float
    kl_bound: float
    variance_x: float
    variance_y: float
    model_evals: float
    reward_queries: float
    wall_ms: float


@dataclass
class ShiftRow:
    displacement: float
    method: str
    N: int
    B: int
    eta: float
    mean_reward: float
    normalized_reward: float
    variance_x: float
    variance_y: float
    runs: int


def columns(row_type=MetricsRow):
    return [f.name for f in fields(row_type)]


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(rows, path, row_type=MetricsRow):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns(row_type))
        for row in rows:
            writer.writerow([_format(v) for v in astuple(row)])
    log.info("Wrote %d rows to %s", len(rows), path)


def check_header(header, row_type=MetricsRow):
    expected = columns(row_type)
    for i, name in enumerate(expected):
        if i >= len(header):
            raise SchemaError(name, "missing")
        if header[i] != name:
            raise SchemaError(header[i], f"expected {name!r} at position {i + 1}")
    if len(header) > len(expected):
        raise SchemaError(header[len(expected)], "unexpected extra column")


def read_rows(path, row_type=MetricsRow):
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise SchemaError(columns(row_type)[0], "file has no header")
        check_header(header, row_type)
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if len(record) != len(header):
                raise SchemaError(header[min(len(record), len(header) - 1)], f"line {lineno} has {len(record)} fields")
            values = []
            for field, text in zip(fields(row_type), record):
                try:
                    values.append(field.type(text))
                except ValueError:
                    raise SchemaError(field.name, f"line {lineno}: cannot parse {text!r}") from None
            rows.append(row_type(*values))
    return rows
