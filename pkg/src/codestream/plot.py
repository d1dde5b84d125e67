"""SVG rendering of sweep and shift-study results.

Output is byte-for-byte reproducible: the SVG backend is given a fixed hash salt and no date stamp.
Each curve is an SVG group with id ``<panel>-<i>`` (``win``, ``reward`` or ``variance``).
"""

import csv
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from . import metrics
from .metrics import MetricsRow, ShiftRow

log = logging.getLogger(__name__)

plt.rcParams['svg.hashsalt'] = 'codestream'
plt.rcParams['svg.fonttype'] = 'path'

MARKERS = 'osD^v<>ph*'


def _sweep_key(row):
    # Points along a curve follow the swept parameter.
    return (row.scale, row.N, -row.B, row.eta) if row.method == 'GradGuide' else (row.N, -row.B, row.eta, row.scale)


def _curve_label(row):
    if row.method in ('CoDe', 'CoDeEta'):
        return f"{row.method} (B={row.B}{f', η={row.eta:g}' if row.method == 'CoDeEta' else ''})"
    return row.method


def _groups(rows, label):
    groups = {}
    for row in rows:
        groups.setdefault(label(row), []).append(row)
    return groups


def _save(fig, path):
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    log.info("Wrote %s", path)


def plot_tradeoff(rows, path):
    "Win rate and normalized reward against the fitted KL, one curve per method."
    fig, (ax_win, ax_reward) = plt.subplots(1, 2, figsize=(10, 4))
    for i, (label, group) in enumerate(_groups(rows, _curve_label).items()):
        group = sorted(group, key=_sweep_key)
        kl = [r.kl_fit for r in group]
        style = dict(marker=MARKERS[i % len(MARKERS)], label=label)
        ax_win.plot(kl, [r.win_rate for r in group], gid=f"win-{i}", **style)
        ax_reward.plot(kl, [r.normalized_reward for r in group], gid=f"reward-{i}", **style)
    ax_win.set_xlabel("KL divergence (Gaussian fit)")
    ax_win.set_ylabel("win rate")
    ax_reward.set_xlabel("KL divergence (Gaussian fit)")
    ax_reward.set_ylabel("normalized expected reward")
    for ax in (ax_win, ax_reward):
        ax.grid(True, alpha=0.3)
        if rows:
            ax.legend(fontsize='small')
    fig.tight_layout()
    _save(fig, path)


def _cell_label(row):
    label = f"{row.method} N={row.N}"
    if row.method in ('CoDe', 'CoDeEta'):
        label += f" B={row.B}"
    if row.method == 'CoDeEta':
        label += f" η={row.eta:g}"
    return label


def plot_shift(rows, path):
    "Mean reward and total batch variance against the reward displacement, one curve per cell."
    fig, (ax_reward, ax_var) = plt.subplots(1, 2, figsize=(10, 4))
    positive = True
    for i, (label, group) in enumerate(_groups(rows, _cell_label).items()):
        group = sorted(group, key=lambda r: r.displacement)
        d = [r.displacement for r in group]
        var = [r.variance_x + r.variance_y for r in group]
        positive = positive and all(v > 0 for v in var)
        style = dict(marker=MARKERS[i % len(MARKERS)], label=label)
        ax_reward.plot(d, [r.mean_reward for r in group], gid=f"reward-{i}", **style)
        ax_var.plot(d, var, gid=f"variance-{i}", **style)
    ax_reward.set_xlabel("reward displacement")
    ax_reward.set_ylabel("mean reward")
    ax_var.set_xlabel("reward displacement")
    ax_var.set_ylabel("batch variance")
    if rows and positive:
        ax_var.set_yscale('log')
    for ax in (ax_reward, ax_var):
        ax.grid(True, alpha=0.3)
        if rows:
            ax.legend(fontsize='small')
    fig.tight_layout()
    _save(fig, path)


def read_header(path):
    with open(path, "r", newline="", encoding="utf-8") as f:
        return next(csv.reader(f), None) or []


def plot_csv(path, out_dir=None):
    """Render a results CSV; the kind of plot follows from its header. Returns the SVG paths written."""
    out_dir = out_dir or os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(path))[0]
    out = os.path.join(out_dir, f"{stem}.svg")
    if read_header(path)[:1] == metrics.columns(ShiftRow)[:1]:
        plot_shift(metrics.read_rows(path, ShiftRow), out)
    else:
        plot_tradeoff(metrics.read_rows(path, MetricsRow), out)
    return [out]
