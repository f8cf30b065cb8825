import logging

import numpy as np
import pytest

import startssm.ssm_keys as sk
from startssm import utils
from startssm.model import (
    ModelConfig, SelectiveClassifier, cross_entropy, init_model, layer_scan_cache, load_model, model_backward,
    model_forward, predict, save_model,
)
from startssm.ssm_core import s6_forward
from startssm.start_augment import AugmentPolicy
from startssm.verify import model_gradient_errors, numeric_gradient, random_classifier


logging.basicConfig(format='%(asctime)s - %(levelname)s - %(name)s - %(message)s', level=logging.INFO)
logger = logging.getLogger(__name__)


def _model(seed=0, depth=2, D=3, N=2, num_classes=4):
    return random_classifier(np.random.default_rng(seed), depth, D, N, num_classes)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=0)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(mode='bilinear')


def test_init_model_shapes():
    model = init_model(ModelConfig(depth=3, D=5, N=2, num_classes=4), np.random.default_rng(0))
    assert model.depth == 3 and model.D == 5 and model.num_classes == 4
    assert model.w_out.shape == (5, 4)
    assert not model.b_out.any()
    assert len(model.named_arrays()) == 3 * 7 + 2


def test_classifier_rejects_inconsistent_shapes():
    model = _model()
    with pytest.raises(ValueError):
        SelectiveClassifier(blocks=model.blocks, w_out=np.zeros((4, 2)), b_out=np.zeros(2))
    with pytest.raises(ValueError):
        SelectiveClassifier(blocks=[], w_out=np.zeros((3, 2)), b_out=np.zeros(2))


def test_single_block_by_hand():
    model = _model(depth=1)
    x = np.random.default_rng(1).normal(size=(2, 6, 3))
    u = x + utils.silu(s6_forward(x, model.blocks[0]).output)
    expected = u.mean(axis=-2) @ model.w_out + model.b_out
    logits, _ = model_forward(x, model)
    np.testing.assert_allclose(logits, expected, rtol=1e-13, atol=1e-13)


def test_zero_classifier_gives_zero_logits():
    model = _model()
    model = SelectiveClassifier(blocks=model.blocks, w_out=np.zeros((3, 4)), b_out=np.zeros(4))
    logits, _ = model_forward(np.random.default_rng(2).normal(size=(3, 5, 3)), model)
    assert not logits.any()


def test_single_sequence_matches_batch_row():
    model = _model()
    x = np.random.default_rng(3).normal(size=(3, 5, 3))
    batched, _ = model_forward(x, model)
    single, cache = model_forward(x[1], model)
    assert single.shape == (4, )
    assert cache.single
    np.testing.assert_allclose(single, batched[1], rtol=1e-13, atol=1e-13)


def test_inference_ignores_augmentation():
    model = _model()
    x = np.random.default_rng(4).normal(size=(4, 6, 3))
    plain, _ = model_forward(x, model)
    policy = AugmentPolicy(variant=sk.VARIANT_START_M, apply_prob=1., training=False)
    augmented, cache = model_forward(x, model, policy, np.random.default_rng(0))
    np.testing.assert_array_equal(plain, augmented)
    assert all(not block.plan for block in cache.blocks)


def test_training_augmentation_changes_the_forward_pass():
    model = _model()
    x = np.random.default_rng(5).normal(size=(4, 6, 3))
    plain, _ = model_forward(x, model)
    policy = AugmentPolicy(variant=sk.VARIANT_START_X, apply_prob=1.)
    augmented, cache = model_forward(x, model, policy, np.random.default_rng(0))
    assert all(len(block.plan) == 4 for block in cache.blocks)
    assert not np.array_equal(plain, augmented)
    with pytest.raises(ValueError):
        model_forward(x, model, policy)


def test_augmentation_restricted_to_one_block():
    model = _model()
    x = np.random.default_rng(6).normal(size=(4, 6, 3))
    policy = AugmentPolicy(variant=sk.VARIANT_START_X, apply_prob=1., blocks=(1, ))
    _, cache = model_forward(x, model, policy, np.random.default_rng(0))
    assert cache.blocks[0].plan == [] and len(cache.blocks[1].plan) == 4


def test_cross_entropy_uniform_logits():
    loss, dlogits = cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert abs(loss - np.log(4.)) < 1e-15
    np.testing.assert_allclose(dlogits.sum(axis=1), 0., atol=1e-15)
    assert dlogits[0, 0] == pytest.approx((0.25 - 1.) / 3)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(3, size=5)
    _, dlogits = cross_entropy(logits, labels)
    expected = numeric_gradient(lambda: cross_entropy(logits, labels)[0], logits)
    assert utils.relative_error(dlogits, expected) <= 1e-8


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((3, 4)), np.array([0, 1]))


def test_model_backward_finite_differences():
    rng = np.random.default_rng(8)
    model = _model(seed=9, num_classes=3)
    x = rng.normal(size=(3, 5, 3))
    labels = rng.integers(3, size=3)
    errors = model_gradient_errors(x, labels, model)
    logger.info(f'worst model gradient error: {max(errors.values()):.3g}')
    assert max(errors.values()) <= 1e-5


def test_model_backward_finite_differences_with_augmentation():
    rng = np.random.default_rng(10)
    model = _model(seed=11, num_classes=3)
    x = rng.normal(size=(4, 5, 3))
    labels = rng.integers(3, size=4)
    policy = AugmentPolicy(variant=sk.VARIANT_RANDOM_TOKEN, p_token=0.6, apply_prob=1.)
    errors = model_gradient_errors(x, labels, model, policy, seed=3)
    assert max(errors.values()) <= 1e-5


def test_model_backward_finite_differences_twenty_instances():
    policies = (None,
                AugmentPolicy(variant=sk.VARIANT_RANDOM_TOKEN, p_token=0.5, apply_prob=1.),
                AugmentPolicy(variant=sk.VARIANT_FULL_SEQUENCE, apply_prob=1.))
    worst = 0.
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        depth = 1 + seed % 2
        model = random_classifier(rng, depth, 3, 2, 3, mode=sk.DISCRETIZATION_MODES[seed % 2])
        x = rng.normal(size=(4, int(rng.integers(2, 7)), 3))
        labels = rng.integers(3, size=4)
        errors = model_gradient_errors(x, labels, model, policies[seed % 3], seed=seed)
        worst = max(worst, max(errors.values()))
    logger.info(f'worst model gradient error over 20 instances: {worst:.3g}')
    assert worst <= 1e-5


def test_model_backward_is_linear():
    model = _model()
    x = np.random.default_rng(12).normal(size=(3, 5, 3))
    _, cache = model_forward(x, model)
    dlogits = np.random.default_rng(13).normal(size=(3, 4))
    g1 = model_backward(cache, model, dlogits).named_arrays()
    g2 = model_backward(cache, model, 2. * dlogits).named_arrays()
    for name, arr in g1.items():
        np.testing.assert_array_equal(g2[name], 2. * arr)
    with pytest.raises(ValueError):
        model_backward(cache, model, dlogits[:2])


def test_map_and_with_arrays():
    model = _model()
    doubled = model.map(lambda a: 2. * a)
    np.testing.assert_array_equal(doubled.blocks[1].W_B, 2. * model.blocks[1].W_B)
    zeros = model.zeros_like()
    assert all(not arr.any() for arr in zeros.named_arrays().values())
    summed = model.map(np.add, doubled)
    np.testing.assert_array_equal(summed.w_out, 3. * model.w_out)


def test_save_and_load(tmp_path):
    model = _model()
    save_model(model, tmp_path / 'model.json')
    loaded = load_model(tmp_path / 'model.json')
    assert loaded.mode == model.mode
    for name, arr in model.named_arrays().items():
        np.testing.assert_array_equal(loaded.named_arrays()[name], arr)
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / 'missing.json')


def test_predict_and_layer_cache():
    model = _model()
    x = np.random.default_rng(14).normal(size=(7, 5, 3))
    predictions = predict(model, x, batch_size=3)
    assert predictions.shape == (7, )
    np.testing.assert_array_equal(predictions, np.argmax(model_forward(x, model)[0], axis=-1))
    cache = layer_scan_cache(model, x, -1)
    assert cache.output.shape == (7, 5, 3)
    with pytest.raises(ValueError):
        layer_scan_cache(model, x, 2)


def _naive_layer(x, p):
    # token-by-token recurrence written out with python loops
    L, D = x.shape
    A = -np.exp(p.A_log)
    h = np.zeros((D, p.N))
    y = np.zeros((L, D))
    for t in range(L):
        B = x[t] @ p.W_B + p.b_B
        C = x[t] @ p.W_C + p.b_C
        delta = np.log1p(np.exp(x[t] @ p.W_delta + p.b_delta))
        for d in range(D):
            for n in range(p.N):
                z = delta[d] * A[d, n]
                h[d, n] = np.exp(z) * h[d, n] + (np.expm1(z) / A[d, n]) * B[n] * x[t, d]
            y[t, d] = C @ h[d]
    return y


def test_straight_line_reimplementation():
    model = _model(seed=15)
    x = np.random.default_rng(16).normal(size=(6, 3))
    u = x
    for block in model.blocks:
        s = _naive_layer(u, block)
        u = u + s / (1. + np.exp(-s))
    expected = u.mean(axis=0) @ model.w_out + model.b_out
    logits, _ = model_forward(x, model)
    assert utils.relative_error(logits, expected) <= 1e-10


def test_zero_dlogits_give_zero_gradients():
    model = _model()
    _, cache = model_forward(np.random.default_rng(17).normal(size=(2, 4, 3)), model)
    grads = model_backward(cache, model, np.zeros((2, 4)))
    assert all(not arr.any() for arr in grads.named_arrays().values())
