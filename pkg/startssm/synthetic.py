import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import xarray as xr

from . import ssm_keys as sk


logger = logging.getLogger(__name__)


X_VAR = 'x'
LABEL_VAR = 'label'
DOMAIN_VAR = 'domain'


@dataclass
class SynthDGConfig:
    num_domains: int = 4
    num_classes: int = 5
    L: int = 32
    D: int = 8
    samples_per_domain_per_class: int = 40
    # magnitude of the per-domain per-channel log-scale and shift
    domain_style_strength: float = 1.0
    noise_std: float = 0.3
    # number of sinusoidal harmonics mixed into every class template
    num_harmonics: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 3:
            raise ValueError(f'leave-one-domain-out needs num_domains >= 3; got {self.num_domains}')
        for name in ('num_classes', 'L', 'D', 'samples_per_domain_per_class', 'num_harmonics'):
            if getattr(self, name) < 1:
                raise ValueError(f'{name} must be >= 1; got {getattr(self, name)}')
        if self.num_classes < 2:
            raise ValueError(f'num_classes must be >= 2; got {self.num_classes}')
        if self.domain_style_strength < 0. or self.noise_std < 0.:
            raise ValueError(f'domain_style_strength and noise_std must be >= 0; '
                             f'got {self.domain_style_strength}, {self.noise_std}')

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def class_templates(cfg: SynthDGConfig, rng: np.random.Generator):
    """
    Smooth token templates, one per class: random low-frequency sinusoid mixtures scaled to
    unit standard deviation per channel.

    :return: numpy.ndarray (num_classes, L, D)
    """
    t = np.arange(cfg.L) / cfg.L
    harmonics = np.arange(1, cfg.num_harmonics + 1)
    amplitude = rng.normal(size=(cfg.num_classes, cfg.num_harmonics, cfg.D)) / harmonics[:, np.newaxis]
    phase = rng.uniform(0., 2. * np.pi, size=(cfg.num_classes, cfg.num_harmonics, cfg.D))
    # (class, harmonic, token, channel)
    waves = np.sin(2. * np.pi * harmonics[np.newaxis, :, np.newaxis, np.newaxis] * t[np.newaxis, np.newaxis, :, np.newaxis]
                   + phase[:, :, np.newaxis, :])
    templates = np.sum(amplitude[:, :, np.newaxis, :] * waves, axis=1)
    std = templates.std(axis=1, keepdims=True)
    return templates / np.where(std > 0., std, 1.)


def domain_styles(cfg: SynthDGConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-domain per-channel affine style.

    :return: (scale, shift), each (num_domains, D)
    """
    scale = np.exp(cfg.domain_style_strength * rng.normal(size=(cfg.num_domains, cfg.D)))
    shift = cfg.domain_style_strength * rng.normal(size=(cfg.num_domains, cfg.D))
    return scale, shift


def synth_dataset(cfg: SynthDGConfig) -> xr.Dataset:
    """
    Multi-domain sequence classification data: samples are scale_d * template_class + shift_d
    plus i.i.d. Gaussian noise, with the class templates shared by every domain.

    :param cfg: SynthDGConfig
    :return: xarray.Dataset with variables x (sample, token, channel), label (sample), domain (sample)
    """
    rng = np.random.default_rng(cfg.seed)
    templates = class_templates(cfg, rng)
    scale, shift = domain_styles(cfg, rng)
    m = cfg.samples_per_domain_per_class

    xs, labels, domains = [], [], []
    for d in range(cfg.num_domains):
        for k in range(cfg.num_classes):
            noise = cfg.noise_std * rng.normal(size=(m, cfg.L, cfg.D))
            xs.append(scale[d] * templates[k] + shift[d] + noise)
            labels.append(np.full(m, k))
            domains.append(np.full(m, d))
    ds = xr.Dataset(
        {
            X_VAR: ((sk.SAMPLE_DIM, sk.TOKEN_DIM, sk.CHANNEL_DIM), np.concatenate(xs)),
            LABEL_VAR: (sk.SAMPLE_DIM, np.concatenate(labels)),
            DOMAIN_VAR: (sk.SAMPLE_DIM, np.concatenate(domains)),
        },
        attrs={name: value for name, value in dataclasses.asdict(cfg).items()},
    )
    logger.debug(f'synthetic dataset: {cfg.num_domains} domains x {cfg.num_classes} classes x {m} samples, '
                 f'L={cfg.L}, D={cfg.D}, seed={cfg.seed}')
    return ds


def domain_split(ds: xr.Dataset, held_out) -> Tuple[xr.Dataset, xr.Dataset]:
    """
    :return: (source samples, samples of the held-out domain)
    """
    is_target = ds[DOMAIN_VAR] == held_out
    if not bool(is_target.any()):
        raise ValueError(f'domain {held_out} is not in the dataset; domains={np.unique(ds[DOMAIN_VAR].values)}')
    return ds.isel({sk.SAMPLE_DIM: np.flatnonzero(~is_target.values)}), \
        ds.isel({sk.SAMPLE_DIM: np.flatnonzero(is_target.values)})


def domain_batches(ds: xr.Dataset) -> Dict[int, np.ndarray]:
    """
    :return: dict domain -> inputs (M, L, D) of that domain
    """
    domain = ds[DOMAIN_VAR].values
    return {int(d): ds[X_VAR].values[domain == d] for d in np.unique(domain)}
