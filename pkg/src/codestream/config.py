"""Experiment configuration files.

A config is a YAML document (JSON works too, being a subset) with these sections::

    seed: 0
    output_dir: results/case_study
    prior: {weights: [...], means: [[5, 3], [3, 7], [7, 7]], sigma: 2.0}
    reward: {kind: gaussian, mu: [14, 3], sigma: 2.0}      # or {kind: quantized, mu: ..., delta: 1.0}
    schedule: {steps: 1000, beta_start: 1e-4, beta_end: 0.02}
    model: {hidden_width: 128, embed_width: 32, activation: silu, frequency_base: 1000.0, init_seed: 0}
    train: {epochs: 200, dataset_size: 10000, batch_size: 256, learning_rate: 1e-3, seed: 0}
    sweep:
      - {method: BoN, N: [2, 5, 10, 30, 100, 500]}
      - {method: CoDe, N: [2, 4, 6, 8, 10], B: 100}
      - {method: GradGuide, scale: [1, 5, 10, 25, 50]}
    samples_per_point: 1000
    kl_samples: 1000
    shift_study:
      displacements: [0, 2, 4, 6, 8, 10, 12]
      runs: 500
      cells:
        - {method: BoN, N: 50}
        - {method: CoDeEta, N: 50, B: 80, eta: 0.6}

List values in a sweep entry expand into one point per combination, in file order.
"""

from dataclasses import dataclass, field, replace
import itertools
import logging
import math
from typing import Optional

import numpy as np
import yaml

from .model import ACTIVATIONS, init_model
from .rewards import GaussianReward, QuantizedReward
from .samplers import DEFAULT_BLOCK, GuidanceConfig
from .streams.diffusion import build_linear_schedule
from .trainer import GmmSpec, DEFAULT_PRIOR, TrainConfig

log = logging.getLogger(__name__)

PROFILES = ('full', 'ci')
CI_STEPS = 100
CI_EPOCHS = 20
CI_SAMPLES = 200
CI_RUNS = 100

# Far reward of the case study and the point the shift direction aims at.
DEFAULT_REWARD = GaussianReward((14.0, 3.0), 2.0)
DEFAULT_DISPLACEMENTS = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return build_linear_schedule(self.steps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ModelParams:
    hidden_width: int = 128
    embed_width: int = 32
    activation: str = 'silu'
    frequency_base: float = 1000.0
    init_seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if self.hidden_width < 1 or self.embed_width < 2 or self.embed_width % 2:
            raise ValueError("hidden_width must be >= 1 and embed_width an even integer >= 2")

    def build(self):
        return init_model(self.hidden_width, self.embed_width, self.init_seed, self.activation, self.frequency_base)


@dataclass(frozen=True)
class ShiftStudyConfig:
    displacements: tuple = DEFAULT_DISPLACEMENTS
    origin: tuple = tuple(float(m) for m in DEFAULT_PRIOR.mean())
    toward: tuple = DEFAULT_REWARD.mu
    runs: int = 500
    cells: tuple = ()

    def direction(self):
        u = np.asarray(self.toward, dtype=float) - np.asarray(self.origin, dtype=float)
        norm = np.linalg.norm(u)
        if norm == 0:
            raise ConfigError("shift_study: origin and toward must differ")
        return u / norm

    def reward_at(self, reward, displacement):
        "`reward` with its mean moved to origin + displacement along the shift direction."
        mu = np.asarray(self.origin, dtype=float) + displacement * self.direction()
        return replace(reward, mu=tuple(float(m) for m in mu))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = 'results'
    prior: GmmSpec = DEFAULT_PRIOR
    reward: object = DEFAULT_REWARD
    schedule: ScheduleParams = ScheduleParams()
    model: ModelParams = ModelParams()
    train: TrainConfig = TrainConfig()
    sweep: tuple = ()
    samples_per_point: int = 1000
    kl_samples: int = 1000
    workers: int = 1
    record_wall_time: bool = False
    shift_study: Optional[ShiftStudyConfig] = None
    profile: str = 'full'
    document: dict = field(default_factory=dict, compare=False)


def _number(value, key, kind=float):
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    try:
        number = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {'an integer' if kind is int else 'a number'}, got {value!r}") from None
    if kind is int and float(value) != number:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if kind is float and not math.isfinite(number):
        raise ConfigError(f"{key}: expected a finite number, got {value!r}")
    return number


def _point(value, key):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{key}: expected a 2D point [x, y], got {value!r}")
    return (_number(value[0], key), _number(value[1], key))


def _section(doc, key, known):
    section = doc.get(key) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"{key}: expected a mapping")
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}: unknown key")
    return section


def _prior(doc):
    section = _section(doc, 'prior', ('weights', 'means', 'sigma'))
    if not section:
        return DEFAULT_PRIOR
    means = tuple(_point(m, f'prior.means[{i}]') for i, m in enumerate(section.get('means', DEFAULT_PRIOR.means)))
    weights = section.get('weights')
    weights = tuple([1 / len(means)] * len(means)) if weights is None else \
        tuple(_number(w, f'prior.weights[{i}]') for i, w in enumerate(weights))
    try:
        return GmmSpec(weights, means, _number(section.get('sigma', DEFAULT_PRIOR.sigma), 'prior.sigma'))
    except ValueError as exc:
        raise ConfigError(f"prior: {exc}") from None


def _reward(doc):
    section = _section(doc, 'reward', ('kind', 'mu', 'sigma', 'delta'))
    kind = section.get('kind', 'gaussian')
    mu = _point(section.get('mu', DEFAULT_REWARD.mu), 'reward.mu')
    try:
        if kind == 'gaussian':
            return GaussianReward(mu, _number(section.get('sigma', DEFAULT_REWARD.sigma), 'reward.sigma'))
        elif kind == 'quantized':
            return QuantizedReward(mu, _number(section.get('delta', 1.0), 'reward.delta'))
    except ValueError as exc:
        raise ConfigError(f"reward: {exc}") from None
    raise ConfigError(f"reward.kind: expected 'gaussian' or 'quantized', got {kind!r}")


def _dataclass_section(doc, key, cls, kinds):
    section = _section(doc, key, kinds)
    values = {name: _number(section[name], f'{key}.{name}', kind) if kind in (int, float) else section[name]
              for name, kind in kinds.items() if name in section}
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


GUIDANCE_KEYS = {'method': str, 'N': int, 'B': int, 'eta': float, 'scale': float, 'x_ref': None,
                 'seed': int, 'exact_gradient': bool, 'temperature': float}
EXPANDABLE = ('N', 'B', 'eta', 'scale')


def expand_points(entries, key):
    "Expand sweep entries with list-valued N/B/eta/scale into one GuidanceConfig per combination."
    if not isinstance(entries, list):
        raise ConfigError(f"{key}: expected a list of guidance points")
    points = []
    for i, entry in enumerate(entries):
        where = f"{key}[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: expected a mapping")
        unknown = set(entry) - set(GUIDANCE_KEYS)
        if unknown:
            raise ConfigError(f"{where}.{sorted(unknown)[0]}: unknown key")
        if 'method' not in entry:
            raise ConfigError(f"{where}.method: missing")
        axes = [entry[name] if isinstance(entry.get(name), list) else [entry[name]]
                for name in EXPANDABLE if name in entry]
        names = [name for name in EXPANDABLE if name in entry]
        for combo in itertools.product(*axes):
            values = {name: _number(v, f'{where}.{name}', GUIDANCE_KEYS[name]) for name, v in zip(names, combo)}
            if 'x_ref' in entry:
                values['x_ref'] = _point(entry['x_ref'], f'{where}.x_ref')
            if 'seed' in entry:
                values['seed'] = _number(entry['seed'], f'{where}.seed', int)
            if 'temperature' in entry:
                values['temperature'] = _number(entry['temperature'], f'{where}.temperature')
            if 'exact_gradient' in entry:
                values['exact_gradient'] = bool(entry['exact_gradient'])
            if entry['method'] in ('CoDe', 'CoDeEta') and 'B' not in values:
                values['B'] = DEFAULT_BLOCK
            try:
                points.append(GuidanceConfig(method=entry['method'], **values))
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
    return tuple(points)


def _shift_study(doc):
    if doc.get('shift_study') is None:
        return None
    section = _section(doc, 'shift_study', ('displacements', 'origin', 'toward', 'runs', 'cells'))
    defaults = ShiftStudyConfig()
    displacements = tuple(_number(d, f'shift_study.displacements[{i}]')
                          for i, d in enumerate(section.get('displacements', defaults.displacements)))
    if not displacements:
        raise ConfigError("shift_study.displacements: empty")
    if list(displacements) != sorted(displacements):
        raise ConfigError("shift_study.displacements: must be sorted ascending")
    runs = _number(section.get('runs', defaults.runs), 'shift_study.runs', int)
    if runs < 2:
        raise ConfigError("shift_study.runs: must be >= 2")
    cells = expand_points(section.get('cells', []), 'shift_study.cells')
    if not cells:
        raise ConfigError("shift_study.cells: empty")
    study = ShiftStudyConfig(
        displacements,
        _point(section['origin'], 'shift_study.origin') if 'origin' in section else defaults.origin,
        _point(section['toward'], 'shift_study.toward') if 'toward' in section else defaults.toward,
        runs, cells)
    study.direction()
    return study


def _check_blocks(points, T, key):
    for i, point in enumerate(points):
        B = point.block_size(T)
        if B is not None and B > point.steps(T):
            raise ConfigError(f"{key}[{i}]: block size {B} exceeds the {point.steps(T)} steps of a {point.method} run")


def parse_config(doc, profile='full'):
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a mapping at the top level")
    known = ('seed', 'output_dir', 'prior', 'reward', 'schedule', 'model', 'train', 'sweep',
             'samples_per_point', 'kl_samples', 'workers', 'record_wall_time', 'shift_study')
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    sweep = expand_points(doc.get('sweep', []), 'sweep')
    shift = _shift_study(doc)
    if not sweep and shift is None:
        raise ConfigError("sweep: empty (and no shift_study given)")
    cfg = ExperimentConfig(
        seed=_number(doc.get('seed', 0), 'seed', int),
        output_dir=str(doc.get('output_dir', 'results')),
        prior=_prior(doc),
        reward=_reward(doc),
        schedule=_dataclass_section(doc, 'schedule', ScheduleParams,
                                    {'steps': int, 'beta_start': float, 'beta_end': float}),
        model=_dataclass_section(doc, 'model', ModelParams,
                                 {'hidden_width': int, 'embed_width': int, 'activation': str,
                                  'frequency_base': float, 'init_seed': int}),
        train=_dataclass_section(doc, 'train', TrainConfig,
                                 {'epochs': int, 'dataset_size': int, 'batch_size': int, 'learning_rate': float,
                                  'beta1': float, 'beta2': float, 'eps': float, 'seed': int, 'shards': int}),
        sweep=sweep,
        samples_per_point=_number(doc.get('samples_per_point', 1000), 'samples_per_point', int),
        kl_samples=_number(doc.get('kl_samples', 1000), 'kl_samples', int),
        workers=_number(doc.get('workers', 1), 'workers', int),
        record_wall_time=bool(doc.get('record_wall_time', False)),
        shift_study=shift,
        document=doc,
    )
    if cfg.samples_per_point < 2:
        raise ConfigError("samples_per_point: must be >= 2")
    if cfg.kl_samples < 2:
        raise ConfigError("kl_samples: must be >= 2")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    try:
        cfg.schedule.build()
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    return apply_profile(cfg, profile)


def _validated(cfg):
    _check_blocks(cfg.sweep, cfg.schedule.steps, 'sweep')
    if cfg.shift_study is not None:
        _check_blocks(cfg.shift_study.cells, cfg.schedule.steps, 'shift_study.cells')
    return cfg


def _rescale_points(points, T_full, T_ci):
    return tuple(replace(p, B=max(1, int(math.floor(p.B * T_ci / T_full + 0.5)))) if p.B is not None else p
                 for p in points)


def apply_profile(cfg, profile):
    "Apply a run profile: 'full' leaves the config as written, 'ci' shrinks it to a smoke-test scale."
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {', '.join(PROFILES)}, got {profile!r}")
    if profile == 'full':
        return _validated(cfg)
    T_full = cfg.schedule.steps
    T_ci = min(CI_STEPS, T_full)
    shift = cfg.shift_study
    if shift is not None:
        shift = replace(shift, runs=min(shift.runs, CI_RUNS), cells=_rescale_points(shift.cells, T_full, T_ci))
    ci = replace(
        cfg,
        schedule=replace(cfg.schedule, steps=T_ci),
        train=replace(cfg.train, epochs=min(cfg.train.epochs, CI_EPOCHS)),
        sweep=_rescale_points(cfg.sweep, T_full, T_ci),
        samples_per_point=min(cfg.samples_per_point, CI_SAMPLES),
        kl_samples=min(cfg.kl_samples, CI_SAMPLES),
        shift_study=shift,
        profile='ci',
    )
    log.info("CI profile: T=%d, %d epochs, %d samples per point", T_ci, ci.train.epochs, ci.samples_per_point)
    return _validated(ci)


def load_config(path, profile='full'):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    log.debug("Loaded config %s", path)
    return parse_config(doc, profile)
