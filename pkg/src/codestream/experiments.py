"""Sweep and shift-study drivers.

A sweep evaluates every guidance point of an experiment against one shared base batch and produces a
:class:`~codestream.metrics.MetricsRow` per point. The shift study moves the reward mean away from the
prior along a fixed direction and records mean reward and batch variance per (displacement, cell).
"""

from dataclasses import asdict
import json
import logging
import math
import os
import time

import numpy as np
from tqdm import tqdm

from . import metrics, rng
from .profile import Profile
from .rewards import UnsupportedRewardError
from .samplers import guided_samples, reference_points, base_sample

log = logging.getLogger(__name__)

# derive_seed keys
BASE_KEY = 0
GUIDED_KEY = 1
REFERENCE_KEY = 2
SHIFT_KEY = 3


def describe(point):
    parts = [point.method]
    if point.method not in ('Base', 'GradGuide'):
        parts.append(f"N={point.N}")
    if point.method in ('CoDe', 'CoDeEta') and point.B is not None:
        parts.append(f"B={point.B}")
    if point.method == 'CoDeEta':
        parts.append(f"eta={point.eta:g}")
    if point.method == 'GradGuide':
        parts.append(f"scale={point.scale:g}")
    return " ".join(parts)


def _draw(model, sched, reward, point, n, seed, workers, profile, x_ref_seed):
    x_ref = None
    if point.method == 'CoDeEta' and point.x_ref is None:
        x_ref = reference_points(reward, x_ref_seed, n)
    return guided_samples(model, sched, reward, point, n, seed=seed, x_ref=x_ref, workers=workers, profile=profile)


def evaluate_point(model, sched, exp, point, base):
    """Draw one guided batch for `point` and score it against the base batch.

    Returns the metrics row and a dict of extra figures for the JSON summary.
    """
    n = exp.samples_per_point
    seed = point.seed if point.seed is not None else exp.seed
    prof = Profile()
    start = time.perf_counter()
    samples = _draw(model, sched, exp.reward, point, n, rng.derive_seed(seed, GUIDED_KEY), exp.workers, prof,
                    rng.derive_seed(seed, REFERENCE_KEY))
    elapsed = time.perf_counter() - start
    if not np.all(np.isfinite(samples)):
        raise FloatingPointError(f"{describe(point)} produced non-finite samples")
    k = min(exp.kl_samples, n)
    T = sched.T
    B = point.block_size(T) or 0
    var_x, var_y = metrics.batch_variance(samples)
    row = metrics.MetricsRow(
        method=point.method,
        N=point.N,
        B=B,
        eta=float(point.eta),
        scale=float(point.scale),
        seed=seed,
        expected_reward=metrics.expected_reward(samples, exp.reward),
        normalized_reward=metrics.normalized_reward(samples, base, exp.reward),
        win_rate=metrics.win_rate(samples, base, exp.reward),
        kl_fit=metrics.kl_fit(samples[:k], base[:k]),
        kl_bound=metrics.kl_upper_bound(point.method, point.N, B, T, point.eta if point.method == 'CoDeEta' else 1.0),
        variance_x=var_x,
        variance_y=var_y,
        model_evals=prof['model_evals'] / n,
        reward_queries=prof['reward_queries'] / n,
        wall_ms=elapsed * 1000 if exp.record_wall_time else 0.0,
    )
    extras = {
        'label': describe(point),
        'mean_log_reward': metrics.mean_log_reward(samples, exp.reward),
        'selections_per_run': prof['selections'] / n,
    }
    if log.isEnabledFor(logging.DEBUG):
        prof.dump()
    return row, extras


def run_sweep(model, sched, exp, progress=None):
    "Evaluate every sweep point in config order; returns (rows, summary)."
    base = base_sample(model, sched, exp.samples_per_point, rng.derive_seed(exp.seed, BASE_KEY), workers=exp.workers)
    rows, extras, skipped = [], [], []
    points = tqdm(exp.sweep, desc="sweep", unit="point", disable=None if progress is None else not progress)
    for point in points:
        points.set_postfix_str(describe(point))
        try:
            row, extra = evaluate_point(model, sched, exp, point, base)
        except UnsupportedRewardError as exc:
            log.error("Skipping %s: %s", describe(point), exc)
            skipped.append({'label': describe(point), 'reason': str(exc)})
            continue
        log.info("%s: normalized reward %.3f, win rate %.3f, KL %.4f",
                 extra['label'], row.normalized_reward, row.win_rate, row.kl_fit)
        rows.append(row)
        extras.append(extra)
    summary = {
        'profile': exp.profile,
        'steps': sched.T,
        'base_expected_reward': metrics.expected_reward(base, exp.reward),
        'points': [dict(asdict(row), **extra) for row, extra in zip(rows, extras)],
        'skipped': skipped,
        'config': exp.document,
    }
    return rows, summary


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_json(doc, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(doc), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    log.info("Wrote %s", path)


def write_sweep(rows, summary, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")
    json_path = os.path.join(out_dir, "sweep.json")
    metrics.write_rows(rows, csv_path)
    write_json(summary, json_path)
    return csv_path, json_path


def run_shift_study(model, sched, exp, progress=None):
    """Mean reward and batch variance of every cell as the reward mean moves away from the prior.

    CoDe(η) cells condition each run on a fresh draw from the shifted reward distribution. The base
    batch does not depend on the reward, so one batch serves every displacement.
    """
    study = exp.shift_study
    if study is None:
        raise ValueError("Experiment has no shift_study section")
    n = study.runs
    base = base_sample(model, sched, n, rng.derive_seed(exp.seed, BASE_KEY), workers=exp.workers)
    rows = []
    cells = [(d, cell) for d in study.displacements for cell in study.cells]
    for d, cell in tqdm(cells, desc="shift study", unit="cell", disable=None if progress is None else not progress):
        reward = study.reward_at(exp.reward, d)
        seed = cell.seed if cell.seed is not None else exp.seed
        try:
            samples = _draw(model, sched, reward, cell, n, rng.derive_seed(seed, SHIFT_KEY), exp.workers, None,
                            rng.derive_seed(seed, REFERENCE_KEY))
        except UnsupportedRewardError as exc:
            log.error("Skipping %s at d=%g: %s", describe(cell), d, exc)
            continue
        var_x, var_y = metrics.batch_variance(samples)
        rows.append(metrics.ShiftRow(
            displacement=float(d),
            method=cell.method,
            N=cell.N,
            B=cell.block_size(sched.T) or 0,
            eta=float(cell.eta),
            mean_reward=metrics.expected_reward(samples, reward),
            normalized_reward=metrics.normalized_reward(samples, base, reward),
            variance_x=var_x,
            variance_y=var_y,
            runs=n,
        ))
        log.debug("d=%g %s: reward %.4g, variance %.3g", d, describe(cell), rows[-1].mean_reward, var_x + var_y)
    return rows


def write_shift_study(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "shift_study.csv")
    metrics.write_rows(rows, path, metrics.ShiftRow)
    return path
