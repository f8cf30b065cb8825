import json

import pytest

import startssm.ssm_keys as sk
from startssm.config import (
    DEFAULT_SEEDS, ExperimentConfig, apply_overrides, build_config, load_config, parse_gamma, parse_variant,
)
from startssm.model import ModelConfig
from startssm.synthetic import SynthDGConfig


INI = """
[synth]
num_domains = 3
num_classes = 2
L = 8
D = 3
samples_per_domain_per_class = 6

[model]
depth = 2
D = 3
N = 2
num_classes = 2
mode = euler

[train]
epochs = 3
batch_size = 4
lr0 = 0.01

[augment]
variant = start-x
p_token = 0.5
training = yes
blocks = 0,1

[experiment]
seeds = 3,4
gap_layer = 0
gamma = 2.5
"""


def _write(tmp_path, text, name='experiment.ini'):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.seeds == DEFAULT_SEEDS
    assert cfg.gamma == sk.GAMMA_MEDIAN
    assert cfg.gap_layer == -1
    assert cfg.policy.variant == sk.VARIANT_START_M and cfg.policy.p_token == 0.75


def test_load_ini(tmp_path):
    cfg = load_config(_write(tmp_path, INI))
    assert cfg.synth.L == 8 and cfg.synth.D == 3
    assert cfg.model.depth == 2 and cfg.model.mode == sk.DISCRETIZATION_EULER
    assert cfg.train.epochs == 3 and cfg.train.lr0 == 0.01
    assert cfg.policy.variant == sk.VARIANT_START_X
    assert cfg.policy.blocks == (0, 1)
    assert cfg.policy.training is True
    assert cfg.seeds == (3, 4)
    assert cfg.gap_layer == 0
    assert cfg.gamma == 2.5


def test_json_matches_ini(tmp_path):
    ini = load_config(_write(tmp_path, INI))
    path = _write(tmp_path, json.dumps(ini.to_dict()), name='experiment.json')
    assert load_config(path).to_dict() == ini.to_dict()


def test_to_dict_is_json_serializable():
    d = ExperimentConfig().to_dict()
    assert json.loads(json.dumps(d)) == d
    assert set(d) == {sk.SECTION_SYNTH, sk.SECTION_MODEL, sk.SECTION_TRAIN, sk.SECTION_AUGMENT, sk.SECTION_EXPERIMENT}


def test_blocks_all_means_every_block(tmp_path):
    cfg = load_config(_write(tmp_path, INI.replace('blocks = 0,1', 'blocks = all')))
    assert cfg.policy.blocks is None


@pytest.mark.parametrize('old, new', [
    ('lr0 = 0.01', 'lr0 = 0.01\nmomentum = 0.9'),
    ('[experiment]', '[logging]\nlevel = 1\n[experiment]'),
    ('training = yes', 'training = perhaps'),
    ('variant = start-x', 'variant = cutmix'),
    ('gamma = 2.5', 'gamma = -1'),
    ('epochs = 3', 'epochs = three'),
    ('blocks = 0,1', 'blocks = -1'),
    ('blocks = 0,1', 'blocks = 0,2'),
])
def test_invalid_files(tmp_path, old, new):
    with pytest.raises(ValueError):
        load_config(_write(tmp_path, INI.replace(old, new)))


def test_mismatched_sections():
    with pytest.raises(ValueError, match='D=4'):
        ExperimentConfig(synth=SynthDGConfig(D=4), model=ModelConfig(D=8))
    with pytest.raises(ValueError):
        ExperimentConfig(model=ModelConfig(depth=2), gap_layer=2)
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match='missing.ini'):
        load_config(tmp_path / 'missing.ini')


def test_build_config_native_values():
    cfg = build_config({'augment': {'variant': 'random_token', 'apply_prob': 1.0}, 'experiment': {'seeds': [7]}})
    assert cfg.policy.variant == sk.VARIANT_RANDOM_TOKEN
    assert cfg.policy.apply_prob == 1.
    assert cfg.seeds == (7, )


def test_parse_helpers():
    assert parse_gamma('Median') == sk.GAMMA_MEDIAN
    assert parse_gamma('1.5') == 1.5
    with pytest.raises(ValueError):
        parse_gamma(0.)
    assert parse_variant('full-seq') == sk.VARIANT_FULL_SEQUENCE
    assert parse_variant('start_mx') == sk.VARIANT_START_MX
    with pytest.raises(ValueError):
        parse_variant('start')


def test_seed_overrides():
    cfg = ExperimentConfig()
    assert apply_overrides(cfg) is cfg
    assert apply_overrides(cfg, seed=3).seeds == (3, 4, 5, 6, 7)
    assert apply_overrides(cfg, seeds=2).seeds == (0, 1)
    assert apply_overrides(cfg, seed=10, seeds=1).seeds == (10, )
    with pytest.raises(ValueError):
        apply_overrides(cfg, seeds=0)


def test_policy_and_epoch_overrides():
    cfg = apply_overrides(ExperimentConfig(), variant='none', p_token=0.25, apply_prob=1., epochs=4)
    assert cfg.policy.variant == sk.VARIANT_NONE
    assert cfg.policy.p_token == 0.25 and cfg.policy.apply_prob == 1.
    assert cfg.train.epochs == 4
    with pytest.raises(ValueError):
        apply_overrides(ExperimentConfig(), p_token=2.)
