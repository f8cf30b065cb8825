import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from . import utils
from . import ssm_keys as sk
from .ssm_core import (
    SelectiveLayerParams, discretize, materialize_alpha, project_params, scan_parallel, scan_sequential,
    s6_forward, s6_backward,
)
from .start_augment import AugmentPolicy, apply_start, mix_styles, top_p_mask
from .domain_gap import accumulation_trace, mmd2
from .model import SelectiveClassifier, model_forward, model_backward, cross_entropy


logger = logging.getLogger(__name__)


SCAN_TOLERANCE = 1e-10
GRAD_TOLERANCE = 1e-5
FD_STEP = 1e-5
# relative perturbation applied to the parallel scan output by --break-scan
BREAK_SCAN_FACTOR = 1. + 1e-6


def random_layer(rng: np.random.Generator, D, N, scale=0.5) -> SelectiveLayerParams:
    return SelectiveLayerParams(
        A_log=rng.normal(scale=0.5, size=(D, N)),
        W_B=rng.normal(scale=scale, size=(D, N)),
        b_B=rng.normal(scale=scale, size=N),
        W_C=rng.normal(scale=scale, size=(D, N)),
        b_C=rng.normal(scale=scale, size=N),
        W_delta=rng.normal(scale=scale, size=(D, D)),
        b_delta=rng.normal(size=D),
    )


def random_classifier(rng: np.random.Generator, depth, D, N, num_classes, mode=sk.DISCRETIZATION_ZOH):
    return SelectiveClassifier(
        blocks=[random_layer(rng, D, N) for _ in range(depth)],
        w_out=rng.normal(size=(D, num_classes)),
        b_out=rng.normal(size=num_classes),
        mode=mode,
    )


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step=FD_STEP):
    """
    Central differences of f() with respect to every entry of arr; arr is perturbed in place
    and restored.
    """
    grad = np.zeros(arr.shape)
    for i in range(arr.size):
        original = arr.flat[i]
        arr.flat[i] = original + step
        f_plus = f()
        arr.flat[i] = original - step
        f_minus = f()
        arr.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2. * step)
    return grad


def s6_gradient_errors(x, p: SelectiveLayerParams, dy, mode=sk.DISCRETIZATION_ZOH):
    """
    :return: dict block name -> relative error of s6_backward against central differences
    """
    x = np.array(x, dtype=np.float64)
    cache = s6_forward(x, p, mode=mode)
    dx, grads = s6_backward(cache, p, dy)

    def f():
        return float(np.sum(dy * s6_forward(x, p, mode=mode).output))

    errors = {'x': utils.relative_error(dx, numeric_gradient(f, x))}
    for name, arr in p.arrays().items():
        errors[name] = utils.relative_error(grads.arrays()[name], numeric_gradient(f, arr))
    return errors


def model_gradient_errors(x, labels, model: SelectiveClassifier, policy: Optional[AugmentPolicy] = None, seed=0):
    """
    Relative errors of model_backward against central differences of the cross-entropy loss;
    the augmentation rng is re-seeded for every evaluation so the plan stays fixed.
    """
    def loss():
        logits, _ = model_forward(x, model, policy, np.random.default_rng(seed))
        return cross_entropy(logits, labels)[0]

    logits, cache = model_forward(x, model, policy, np.random.default_rng(seed))
    _, dlogits = cross_entropy(logits, labels)
    grads = model_backward(cache, model, dlogits).named_arrays()
    return {name: utils.relative_error(grads[name], numeric_gradient(loss, arr))
            for name, arr in model.named_arrays().items()}


@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class VerifyContext:
    break_scan: bool = False


@dataclass
class Check:
    name: str
    group: str
    func: Callable[[VerifyContext], tuple]

    def run(self, ctx: VerifyContext) -> CheckResult:
        start = time.perf_counter()
        try:
            passed, detail = self.func(ctx)
        except Exception as e:
            logger.exception(f'check {self.name} raised')
            passed, detail = False, f'{type(e).__name__}: {e}'
        return CheckResult(self.name, self.group, bool(passed), detail, time.perf_counter() - start)


CHECKS: List[Check] = []


def check(group, name):
    def register(func):
        CHECKS.append(Check(name=f'{group}.{name}', group=group, func=func))
        return func
    return register


def _parallel_output(ops, x, ctx: VerifyContext):
    y = scan_parallel(ops, x).output
    return y * BREAK_SCAN_FACTOR if ctx.break_scan else y


def _random_ops(rng, L, D, N):
    p = random_layer(rng, D, N)
    x = rng.normal(size=(L, D))
    delta_raw, B, C = project_params(x, p)
    return x, discretize(delta_raw, B, p, C=C)


@check('scan', 'three_way_equivalence')
def _check_three_way(ctx):
    rng = np.random.default_rng(0)
    worst = 0.
    for _ in range(200):
        L, D, N = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x, ops = _random_ops(rng, L, D, N)
        y_seq = scan_sequential(ops, x).output
        y_alpha = materialize_alpha(ops).apply(x)
        y_par = _parallel_output(ops, x, ctx)
        worst = max(worst, utils.relative_error(y_alpha, y_seq), utils.relative_error(y_par, y_seq))
    return worst <= SCAN_TOLERANCE, f'max relative error {worst:.3g} over 200 instances'


@check('scan', 'long_parallel')
def _check_long_parallel(ctx):
    x, ops = _random_ops(np.random.default_rng(13), 1024, 4, 4)
    err = utils.relative_error(_parallel_output(ops, x, ctx), scan_sequential(ops, x).output)
    return err <= SCAN_TOLERANCE, f'L=1024 relative error {err:.3g}'


@check('scan', 'alpha_structure')
def _check_alpha_structure(ctx):
    x, ops = _random_ops(np.random.default_rng(11), 8, 2, 3)
    alpha = materialize_alpha(ops).values
    upper_zero = all(np.all(np.triu(alpha[d], k=1) == 0.) for d in range(alpha.shape[0]))
    diag = np.stack([np.sum(ops.C * ops.B_bar[:, d, :], axis=-1) for d in range(alpha.shape[0])])
    diag_exact = np.array_equal(np.diagonal(alpha, axis1=1, axis2=2), diag)
    return upper_zero and diag_exact, f'strictly upper zero: {upper_zero}, diagonal exact: {diag_exact}'


@check('discretize', 'scalar_zoh')
def _check_scalar_zoh(ctx):
    p = SelectiveLayerParams.zeros(1, 1)
    # softplus^{-1}(1)
    ops = discretize(np.array([[np.log(np.e - 1.)]]), np.array([[1.]]), p)
    err = max(abs(ops.A_bar.item() - np.exp(-1.)), abs(ops.B_bar.item() - (1. - np.exp(-1.))))
    return err <= 1e-12, f'max abs error {err:.3g}'


@check('discretize', 'taylor_branch')
def _check_taylor_branch(ctx):
    z = -1e-5
    series_err = abs((1. + z / 2. + z * z / 6.) - np.expm1(z) / z)
    p = SelectiveLayerParams.zeros(1, 1)
    p.A_log[...] = np.log(1e-9)
    delta_raw = np.array([[np.log(np.e - 1.)]])
    zoh = discretize(delta_raw, np.array([[1.]]), p).B_bar.item()
    euler = discretize(delta_raw, np.array([[1.]]), p, mode=sk.DISCRETIZATION_EULER).B_bar.item()
    return series_err <= 1e-9 and abs(zoh - euler) <= 1e-9, \
        f'series vs direct at |z|=1e-5: {series_err:.3g}; zoh vs euler at A=-1e-9: {abs(zoh - euler):.3g}'


@check('grad', 's6_backward')
def _check_s6_backward(ctx):
    worst = 0.
    for seed in range(20):
        rng = np.random.default_rng(17 + seed)
        L, D, N = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        p = random_layer(rng, D, N)
        x = rng.normal(size=(L, D))
        dy = rng.normal(size=(L, D))
        mode = sk.DISCRETIZATION_MODES[seed % 2]
        worst = max(worst, max(s6_gradient_errors(x, p, dy, mode=mode).values()))
    return worst <= GRAD_TOLERANCE, f'max relative error {worst:.3g} over 20 instances'


def _gradient_policy(seed):
    # token choice must not depend on the parameters, or a finite-difference step could flip the mask
    variants = (None, sk.VARIANT_RANDOM_TOKEN, sk.VARIANT_FULL_SEQUENCE)
    variant = variants[seed % len(variants)]
    if variant is None:
        return None
    return AugmentPolicy(variant=variant, p_token=0.5, apply_prob=1.)


@check('grad', 'model_backward')
def _check_model_backward(ctx):
    worst = 0.
    for seed in range(20):
        rng = np.random.default_rng(23 + seed)
        model = random_classifier(rng, depth=2, D=3, N=2, num_classes=3)
        x = rng.normal(size=(4, 5, 3))
        labels = rng.integers(3, size=4)
        errors = model_gradient_errors(x, labels, model, _gradient_policy(seed), seed=seed)
        worst = max(worst, max(errors.values()))
    return worst <= GRAD_TOLERANCE, f'max relative error {worst:.3g} over 20 instances (plain and augmented)'


@check('augment', 'inference_noop')
def _check_inference_noop(ctx):
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(4, 8, 3))
    p = random_layer(rng, 3, 2)
    policy = AugmentPolicy(variant=sk.VARIANT_START_M, apply_prob=1., training=False)
    out = apply_start(batch, p, policy, np.random.default_rng(0))
    return np.array_equal(out, batch), 'inference output bit-identical to input'


@check('augment', 'mask_cardinality')
def _check_mask_cardinality(ctx):
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(100):
        L = int(rng.integers(1, 40))
        p_token = float(rng.uniform())
        mask = top_p_mask(rng.normal(size=L), p_token)
        if mask.count != min(utils.round_half_up(p_token * L), L):
            bad += 1
    return bad == 0, f'{bad} of 100 masks with the wrong cardinality'


@check('augment', 'eps_one_identity')
def _check_eps_one(ctx):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(10, 4))
    return np.array_equal(mix_styles(x, rng.normal(size=(10, 4)) * 3. + 1., 1.), x), 'eps=1 returns x exactly'


@check('augment', 'full_sequence_degeneracy')
def _check_full_sequence(ctx):
    rng = np.random.default_rng(8)
    batch = rng.normal(size=(6, 10, 3))
    p = random_layer(rng, 3, 2)
    full = AugmentPolicy(variant=sk.VARIANT_FULL_SEQUENCE, apply_prob=0.5)
    start_m = AugmentPolicy(variant=sk.VARIANT_START_M, p_token=1., apply_prob=0.5)
    out_full = apply_start(batch, p, full, np.random.default_rng(1))
    out_m = apply_start(batch, p, start_m, np.random.default_rng(1))
    return np.array_equal(out_full, out_m), 'full_sequence equals start_m with p_token=1'


@check('mmd', 'identical_sets')
def _check_mmd_zero(ctx):
    X = np.random.default_rng(9).normal(size=(20, 3))
    value = mmd2(X, X[::-1], 1.)
    return value == 0., f'mmd2 of a permuted copy = {value}'


@check('mmd', 'singleton_closed_form')
def _check_mmd_singleton(ctx):
    a, b, gamma = np.array([0., 1.]), np.array([1.5, -0.5]), 2.
    d2 = float(np.sum((a - b) ** 2))
    err = abs(mmd2(a[np.newaxis], b[np.newaxis], gamma) - (2. - 2. * np.exp(-d2 / gamma)))
    return err <= 1e-12, f'abs error {err:.3g}'


@check('mmd', 'monotone_separation')
def _check_mmd_monotone(ctx):
    failures = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(50, 2))
        Y = rng.normal(size=(50, 2))
        values = [mmd2(X, Y + np.array([s, 0.]), 2.) for s in (0., 1., 2., 4.)]
        failures += not all(v1 < v2 for v1, v2 in zip(values, values[1:]))
    return failures == 0, f'{failures} of 10 seeds not strictly increasing'


@check('mmd', 'symmetry')
def _check_mmd_symmetry(ctx):
    rng = np.random.default_rng(10)
    X, Y = rng.normal(size=(15, 3)), rng.normal(size=(11, 3)) + 0.5
    return mmd2(X, Y, 1.5) == mmd2(Y, X, 1.5), 'mmd2(X, Y) == mmd2(Y, X)'


@check('trace', 'accumulation_identity')
def _check_trace_identity(ctx):
    rng = np.random.default_rng(12)
    p = random_layer(rng, 3, 2)
    xS, xT = rng.normal(size=(16, 3)), rng.normal(size=(16, 3)) + 0.5
    trace = accumulation_trace(xS, xT, p)
    exact = np.abs(s6_forward(xS, p, method=sk.SCAN_PARALLEL).output - s6_forward(xT, p, method=sk.SCAN_PARALLEL).output)
    err = max(float(np.max(np.abs(step.exact_gap - exact[i]))) for i, step in enumerate(trace))
    # the decomposition is exact once both residuals are added back
    closure = max(float(np.max(np.abs(step.signed_gap - step.reconstructed - step.exp_residual
                                      - step.c_ratio_residual))) for step in trace)
    return err <= 1e-12 and closure <= 1e-12, f'two-pass error {err:.3g}; decomposition closure {closure:.3g}'


@check('trace', 'small_delta_recurrence')
def _check_trace_small_delta(ctx):
    rng = np.random.default_rng(14)
    D, N = 3, 2
    p = random_layer(rng, D, N)
    p.A_log[...] = 0.
    p.W_C[...] = 0.
    p.W_delta[...] = 0.01 * rng.normal(size=(D, D))
    # softplus(-8) ~ 3.4e-4, so softplus(delta) * |A| stays below 1e-3
    p.b_delta[...] = -8.
    xS, xT = rng.normal(size=(16, D)), rng.normal(size=(16, D)) + 1.
    worst = max(step.relative_error for step in accumulation_trace(xS, xT, p))
    return worst <= 1e-4, f'max per-token relative error {worst:.3g}'


@check('trace', 'small_delta_closure')
def _check_trace_small_delta_closure(ctx):
    # W_C != 0: the C step residual is first order, only the exp residual vanishes with delta
    rng = np.random.default_rng(15)
    D, N = 3, 2
    p = random_layer(rng, D, N)
    p.A_log[...] = 0.
    p.W_delta[...] = 0.01 * rng.normal(size=(D, D))
    p.b_delta[...] = -8.
    xS, xT = rng.normal(size=(16, D)), rng.normal(size=(16, D)) + 1.
    trace = accumulation_trace(xS, xT, p)
    scale = max(np.linalg.norm(step.signed_gap) for step in trace)
    closure = max(np.linalg.norm(step.reconstructed + step.exp_residual + step.c_ratio_residual - step.signed_gap)
                  for step in trace) / scale
    exp_share = max(np.linalg.norm(step.exp_residual) for step in trace) / scale
    c_share = max(np.linalg.norm(step.c_ratio_residual) for step in trace) / scale
    passed = closure <= 1e-12 and exp_share <= 1e-5 and c_share > 0.
    return passed, f'closure {closure:.3g}, exp residual {exp_share:.3g}, C residual {c_share:.3g}'


def run_checks(filter=None, break_scan=False) -> List[CheckResult]:
    """
    :param filter: keep checks whose group equals filter or whose name contains it
    :param break_scan: scale the parallel scan output by BREAK_SCAN_FACTOR to prove the suite notices
    :return: list of CheckResult
    """
    ctx = VerifyContext(break_scan=break_scan)
    selected = [c for c in CHECKS if filter is None or c.group == filter or filter in c.name]
    if not selected:
        raise ValueError(f'no check matches filter={filter!r}; groups={sorted({c.group for c in CHECKS})}')
    results = []
    for c in selected:
        result = c.run(ctx)
        logger.info(f'{"PASS" if result.passed else "FAIL"} {result.name}: {result.detail}')
        results.append(result)
    for group, group_results in utils.groupby(results, lambda r: r.group).items():
        passed = sum(r.passed for r in group_results)
        logger.info(f'group {group}: {passed}/{len(group_results)} passed')
    return results


def results_table(results: List[CheckResult]) -> pd.DataFrame:
    return pd.DataFrame([
        {'check': r.name, 'status': 'PASS' if r.passed else 'FAIL', 'seconds': round(r.seconds, 3), 'detail': r.detail}
        for r in results
    ])
