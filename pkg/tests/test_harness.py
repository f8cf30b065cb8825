import json
import logging

import numpy as np
import pandas as pd
import pytest

import startssm.ssm_keys as sk
from startssm import synthetic
from startssm.config import ExperimentConfig
from startssm.harness import (
    TrainConfig, default_ablation_policies, p_token_sweep, run_ablation, run_lodo, train,
)
from startssm.model import ModelConfig, init_model
from startssm.start_augment import AugmentPolicy
from startssm.synthetic import SynthDGConfig


logging.basicConfig(format='%(asctime)s - %(levelname)s - %(name)s - %(message)s', level=logging.INFO)
logger = logging.getLogger(__name__)


def _config(variant=sk.VARIANT_START_M, epochs=2, **policy):
    return ExperimentConfig(
        synth=SynthDGConfig(num_domains=3, num_classes=2, L=8, D=3, samples_per_domain_per_class=6),
        model=ModelConfig(depth=1, D=3, N=2, num_classes=2),
        train=TrainConfig(epochs=epochs, batch_size=4, lr0=1e-2, policy=AugmentPolicy(variant=variant, **policy)),
        seeds=(0, ),
    )


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=1e-3, lr_min=1e-2)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.)
    cfg = TrainConfig(policy={'variant': sk.VARIANT_START_X, 'p_token': 0.5})
    assert isinstance(cfg.policy, AugmentPolicy) and cfg.policy.p_token == 0.5


def test_run_lodo_tables():
    result = run_lodo(_config())
    assert list(result.metrics.columns) == sk.METRICS_COLUMNS
    assert len(result.metrics) == 3 * 2
    assert set(result.metrics['variant']) == {sk.VARIANT_START_M}
    assert len(result.final) == 3
    assert len(result.gaps) == 3
    assert list(result.accuracy_table().index) == [0, 1, 2]
    summary = result.summary()
    assert sorted(summary['per_domain']) == ['0', '1', '2']
    assert all(len(entry['accuracies']) == 1 for entry in summary['per_domain'].values())
    assert set(summary['gaps']) == set(sk.GAP_QUANTITIES)
    assert json.loads(result.summary_json()) == json.loads(json.dumps(summary))


def test_run_lodo_is_deterministic():
    first, second = run_lodo(_config()), run_lodo(_config())
    pd.testing.assert_frame_equal(first.metrics, second.metrics)
    assert first.summary_json() == second.summary_json()


def test_run_lodo_keeps_models():
    result = run_lodo(_config(epochs=1), keep_models=True)
    assert sorted(result.models) == [(0, 0), (0, 1), (0, 2)]


def test_untrained_model_is_at_chance_level():
    cfg = ExperimentConfig(
        synth=SynthDGConfig(num_domains=3, num_classes=5, L=16, D=4, samples_per_domain_per_class=20),
        model=ModelConfig(depth=1, D=4, N=2, num_classes=5),
        seeds=(0, ),
    )
    result = run_lodo(cfg, epochs=0)
    assert (result.metrics['epoch'] == 0).all()
    n = 5 * 20
    sigma = np.sqrt(0.2 * 0.8 / n)
    assert np.all(np.abs(result.final['target_acc'] - 0.2) <= 3. * sigma)


def test_training_loss_decreases():
    cfg = _config(variant=sk.VARIANT_NONE, epochs=6)
    ds = synthetic.synth_dataset(cfg.synth)
    x, y = ds[synthetic.X_VAR].values, ds[synthetic.LABEL_VAR].values
    model = init_model(cfg.model, np.random.default_rng(0))
    for policy in (cfg.train.policy, cfg.train.policy.replace(variant=sk.VARIANT_START_M, apply_prob=0.5)):
        _, history = train(model, x, y, cfg.train.replace(policy=policy))
        assert len(history) == 6
        assert history[-1]['train_loss'] < history[0]['train_loss']


def test_train_with_zero_epochs_returns_the_model():
    cfg = _config()
    ds = synthetic.synth_dataset(cfg.synth)
    model = init_model(cfg.model, np.random.default_rng(0))
    trained, history = train(model, ds[synthetic.X_VAR].values, ds[synthetic.LABEL_VAR].values, cfg.train, epochs=0)
    assert trained is model and history == []
    with pytest.raises(ValueError):
        train(model, ds[synthetic.X_VAR].values, ds[synthetic.LABEL_VAR].values, cfg.train, epochs=-1)


def test_full_sequence_matches_start_m_with_every_token():
    full = run_lodo(_config(variant=sk.VARIANT_FULL_SEQUENCE, p_token=0.3))
    start_m = run_lodo(_config(variant=sk.VARIANT_START_M, p_token=1.))
    columns = ['seed', 'held_out_domain', 'epoch', 'train_loss', 'target_acc']
    pd.testing.assert_frame_equal(full.metrics[columns], start_m.metrics[columns])


def test_ablation_policies():
    base = AugmentPolicy(p_token=0.5)
    policies = default_ablation_policies(base)
    assert set(policies) == set(sk.CLI_VARIANT_NAMES)
    assert policies['random-token'].variant == sk.VARIANT_RANDOM_TOKEN
    assert all(policy.p_token == 0.5 for policy in policies.values())
    sweep = p_token_sweep(base, [0.25, 1.])
    assert list(sweep) == ['start_m@p_token=0.25', 'start_m@p_token=1']


def test_run_ablation():
    cfg = _config(epochs=1)
    policies = {'none': cfg.policy.replace(variant=sk.VARIANT_NONE),
                'start-x': cfg.policy.replace(variant=sk.VARIANT_START_X)}
    table = run_ablation(cfg, policies)
    assert list(table.index) == ['none', 'start-x']
    assert {'acc_mean', 'acc_std', 'gap_delta', 'gap_features'} <= set(table.columns)
    assert table.loc['start-x', 'variant'] == sk.VARIANT_START_X
