import configparser
import dataclasses
import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from . import ssm_keys as sk
from .harness import TrainConfig
from .model import ModelConfig
from .start_augment import AugmentPolicy
from .synthetic import SynthDGConfig


logger = logging.getLogger(__name__)


DEFAULT_SEEDS = (0, 1, 2, 3, 4)

_SECTION_TYPES = {
    sk.SECTION_SYNTH: SynthDGConfig,
    sk.SECTION_MODEL: ModelConfig,
    sk.SECTION_TRAIN: TrainConfig,
    sk.SECTION_AUGMENT: AugmentPolicy,
}

# keys holding comma separated integer tuples
_TUPLE_KEYS = {'blocks', 'seeds'}


@dataclass
class ExperimentConfig:
    synth: SynthDGConfig = field(default_factory=SynthDGConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    # block whose quantities are compared across domains; negative counts from the end
    gap_layer: int = -1
    # 'median' or a fixed positive kernel bandwidth
    gamma: Union[str, float] = sk.GAMMA_MEDIAN

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError('at least one seed is needed')
        if self.synth.D != self.model.D:
            raise ValueError(f'synthetic data has D={self.synth.D} but the model has D={self.model.D}')
        if self.synth.num_classes != self.model.num_classes:
            raise ValueError(f'synthetic data has {self.synth.num_classes} classes '
                             f'but the model has num_classes={self.model.num_classes}')
        if not -self.model.depth <= self.gap_layer < self.model.depth:
            raise ValueError(f'gap_layer={self.gap_layer} out of range for depth={self.model.depth}')
        blocks = self.train.policy.blocks
        if blocks is not None and any(b >= self.model.depth for b in blocks):
            raise ValueError(f'augmented blocks={blocks} out of range for depth={self.model.depth}')
        self.gamma = parse_gamma(self.gamma)

    @property
    def policy(self) -> AugmentPolicy:
        return self.train.policy

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = {
            sk.SECTION_SYNTH: dataclasses.asdict(self.synth),
            sk.SECTION_MODEL: dataclasses.asdict(self.model),
            sk.SECTION_TRAIN: {k: v for k, v in dataclasses.asdict(self.train).items() if k != 'policy'},
            sk.SECTION_AUGMENT: dataclasses.asdict(self.train.policy),
            sk.SECTION_EXPERIMENT: {'seeds': list(self.seeds), 'gap_layer': self.gap_layer, 'gamma': self.gamma},
        }
        blocks = d[sk.SECTION_AUGMENT]['blocks']
        d[sk.SECTION_AUGMENT]['blocks'] = None if blocks is None else list(blocks)
        return d


def parse_gamma(value):
    if isinstance(value, str):
        if value.strip().lower() == sk.GAMMA_MEDIAN:
            return sk.GAMMA_MEDIAN
        value = float(value)
    value = float(value)
    if not value > 0.:
        raise ValueError(f'gamma must be {sk.GAMMA_MEDIAN!r} or a positive number; got {value}')
    return value


def parse_variant(value):
    """Accepts both the command line spelling (start-m) and the internal one (start_m)."""
    value = value.strip()
    if value in sk.CLI_VARIANT_NAMES:
        return sk.CLI_VARIANT_NAMES[value]
    if value in sk.VARIANTS:
        return value
    raise ValueError(f'unknown augmentation variant {value!r}; '
                     f'expected one of {sorted(sk.CLI_VARIANT_NAMES)} or {sk.VARIANTS}')


def _parse_int_tuple(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    value = value.strip()
    if value.lower() in ('', 'none', 'all'):
        return None
    return tuple(int(v) for v in value.split(','))


def _convert(section, key, value, field_type):
    if key in _TUPLE_KEYS:
        return _parse_int_tuple(value)
    if key == 'gamma':
        return parse_gamma(value)
    if key == 'variant':
        return parse_variant(value)
    if not isinstance(value, str):
        return value
    if field_type is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if value.lower() not in states:
            raise ValueError(f'[{section}] {key} must be a boolean; got {value!r}')
        return states[value.lower()]
    if field_type is int:
        return int(value)
    if field_type is float:
        return float(value)
    return value


def _section_kwargs(section, values: Mapping[str, Any], cls):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    if cls is TrainConfig:
        del known['policy']
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f'unknown key {key!r} in section [{section}]; expected one of {sorted(known)}')
        try:
            kwargs[key] = _convert(section, key, value, known[key])
        except ValueError as e:
            raise ValueError(f'[{section}] {key}={value!r}: {e}') from e
    return kwargs


def build_config(sections: Mapping[str, Mapping[str, Any]]) -> ExperimentConfig:
    """
    :param sections: dict section name -> dict key -> value (strings or native values)
    :return: ExperimentConfig
    """
    allowed = set(_SECTION_TYPES) | {sk.SECTION_EXPERIMENT}
    unknown = set(sections) - allowed
    if unknown:
        raise ValueError(f'unknown config section(s) {sorted(unknown)}; expected {sorted(allowed)}')
    kw = {name: _section_kwargs(name, sections.get(name, {}), cls) for name, cls in _SECTION_TYPES.items()}
    train = TrainConfig(policy=AugmentPolicy(**kw[sk.SECTION_AUGMENT]), **kw[sk.SECTION_TRAIN])
    experiment = dict(sections.get(sk.SECTION_EXPERIMENT, {}))
    allowed_experiment = {'seeds', 'gap_layer', 'gamma'}
    if set(experiment) - allowed_experiment:
        raise ValueError(f'unknown key(s) {sorted(set(experiment) - allowed_experiment)} in section '
                         f'[{sk.SECTION_EXPERIMENT}]; expected one of {sorted(allowed_experiment)}')
    kwargs = {}
    if 'seeds' in experiment:
        kwargs['seeds'] = _parse_int_tuple(experiment['seeds'])
    if 'gap_layer' in experiment:
        kwargs['gap_layer'] = int(experiment['gap_layer'])
    if 'gamma' in experiment:
        kwargs['gamma'] = parse_gamma(experiment['gamma'])
    return ExperimentConfig(synth=SynthDGConfig(**kw[sk.SECTION_SYNTH]), model=ModelConfig(**kw[sk.SECTION_MODEL]),
                            train=train, **kwargs)


def load_config(path) -> ExperimentConfig:
    """
    Reads an INI-style config (sections synth, model, train, augment, experiment) or, for a
    .json suffix, the same layout as nested JSON objects.
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'config file not found: {path}')
    if path.suffix == '.json':
        sections = json.loads(path.read_text())
        if not isinstance(sections, dict) or not all(isinstance(v, dict) for v in sections.values()):
            raise ValueError(f'{path}: a JSON config must map section names to objects')
    else:
        parser = configparser.ConfigParser(interpolation=None)
        # keys are case sensitive (B, C, L, D, N)
        parser.optionxform = str
        parser.read(path)
        sections = {name: dict(parser[name]) for name in parser.sections()}
    cfg = build_config(sections)
    logger.debug(f'loaded config from {path}: {cfg}')
    return cfg


def apply_overrides(cfg: ExperimentConfig, variant=None, p_token=None, apply_prob=None, seed=None, seeds=None,
                    epochs=None) -> ExperimentConfig:
    """
    Command line overrides. seed sets the first seed and seeds the number of consecutive seeds;
    either keeps the other from the config.
    """
    policy_changes = {}
    if variant is not None:
        policy_changes['variant'] = parse_variant(variant)
    if p_token is not None:
        policy_changes['p_token'] = p_token
    if apply_prob is not None:
        policy_changes['apply_prob'] = apply_prob
    train_changes = {}
    if policy_changes:
        train_changes['policy'] = cfg.train.policy.replace(**policy_changes)
    if epochs is not None:
        train_changes['epochs'] = epochs
    changes = {}
    if train_changes:
        changes['train'] = cfg.train.replace(**train_changes)
    if seed is not None or seeds is not None:
        first = cfg.seeds[0] if seed is None else seed
        count = len(cfg.seeds) if seeds is None else seeds
        if count < 1:
            raise ValueError(f'--seeds must be >= 1; got {count}')
        changes['seeds'] = tuple(range(first, first + count))
    return cfg.replace(**changes) if changes else cfg
