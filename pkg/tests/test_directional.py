"""
Directional experiments on the default synthetic benchmark (five seeds, minutes of CPU).
Run with: pytest -m slow
"""
import logging

import pytest

import startssm.ssm_keys as sk
from startssm.config import ExperimentConfig
from startssm.harness import run_lodo


logging.basicConfig(format='%(asctime)s - %(levelname)s - %(name)s - %(message)s', level=logging.INFO)
logger = logging.getLogger(__name__)


@pytest.fixture(scope='module')
def results():
    cfg = ExperimentConfig()
    return {variant: run_lodo(cfg.replace(train=cfg.train.replace(policy=cfg.policy.replace(variant=variant))))
            for variant in (sk.VARIANT_NONE, sk.VARIANT_START_M, sk.VARIANT_START_X, sk.VARIANT_RANDOM_TOKEN)}


@pytest.mark.slow
def test_start_m_narrows_matrix_gaps(results):
    baseline = results[sk.VARIANT_NONE].mean_gaps()
    start_m = results[sk.VARIANT_START_M].mean_gaps()
    logger.info(f'mean gaps, none: {baseline}; start_m: {start_m}')
    for quantity in (sk.QUANTITY_DELTA, sk.QUANTITY_B, sk.QUANTITY_C, sk.QUANTITY_FEATURES):
        assert start_m[quantity] < baseline[quantity], quantity


@pytest.mark.slow
def test_start_improves_target_accuracy(results):
    accuracy = {variant: result.mean_accuracy for variant, result in results.items()}
    logger.info(f'mean target accuracy: {accuracy}')
    assert accuracy[sk.VARIANT_START_M] > accuracy[sk.VARIANT_NONE]
    assert accuracy[sk.VARIANT_START_X] > accuracy[sk.VARIANT_NONE]
    assert accuracy[sk.VARIANT_START_M] > accuracy[sk.VARIANT_RANDOM_TOKEN]


@pytest.mark.slow
def test_no_style_shift_means_no_gain():
    cfg = ExperimentConfig()
    cfg = cfg.replace(synth=cfg.synth.replace(domain_style_strength=0.), seeds=(0, 1))
    accuracy = {}
    for variant in (sk.VARIANT_NONE, sk.VARIANT_START_M):
        accuracy[variant] = run_lodo(cfg.replace(train=cfg.train.replace(policy=cfg.policy.replace(variant=variant))),
                                     epochs=10).final['target_acc']
    # without a domain shift the difference stays within the spread of the runs
    spread = max(accuracy[sk.VARIANT_NONE].std(ddof=0), accuracy[sk.VARIANT_START_M].std(ddof=0), 0.05)
    assert abs(accuracy[sk.VARIANT_START_M].mean() - accuracy[sk.VARIANT_NONE].mean()) <= 3. * spread
