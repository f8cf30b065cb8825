import dataclasses
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import utils
from . import ssm_keys as sk
from .ssm_core import SelectiveLayerParams, project_params


logger = logging.getLogger(__name__)


STYLE_VARIANCE_FLOOR = 1e-6
DEFAULT_P_TOKEN = 0.75
DEFAULT_APPLY_PROB = 0.5
DEFAULT_BETA_PARAM = 0.1


@dataclass(eq=False)
class StyleStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(eq=False)
class SaliencyMask:
    scores: np.ndarray
    mask: np.ndarray
    p_token: float

    @property
    def count(self):
        return int(np.count_nonzero(self.mask))


@dataclass
class AugmentPolicy:
    variant: str = sk.VARIANT_START_M
    p_token: float = DEFAULT_P_TOKEN
    apply_prob: float = DEFAULT_APPLY_PROB
    beta_param: float = DEFAULT_BETA_PARAM
    training: bool = True
    # indices of the blocks whose input is augmented; None means every block
    blocks: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.variant not in sk.VARIANTS:
            raise ValueError(f'unknown augmentation variant={self.variant}; expected one of {sk.VARIANTS}')
        utils.check_fraction(self.p_token, 'p_token')
        utils.check_fraction(self.apply_prob, 'apply_prob')
        if not self.beta_param > 0.:
            raise ValueError(f'beta_param must be > 0; got {self.beta_param}')
        self.blocks = utils.ensure_tuple(self.blocks)
        if self.blocks is not None and any(b < 0 for b in self.blocks):
            raise ValueError(f'block indices must be >= 0; got blocks={self.blocks}')

    def active_at(self, block_index):
        return self.training and self.variant != sk.VARIANT_NONE and \
            (self.blocks is None or block_index in self.blocks)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(eq=False)
class AugmentRecord:
    """What happened to one augmented sample: the mask, the mixing weight and the partner."""
    index: int
    partner: int
    eps: float
    mask: SaliencyMask
    # scoring variant actually used (start_mx resolves to start_m or start_x)
    variant: str


def style_stats(x) -> StyleStats:
    """
    Per-channel mean and floored standard deviation over the token axis.

    :param x: (..., L, D)
    :return: StyleStats with mu, sigma of shape (..., D)
    """
    x = utils.as_token_sequence(x)
    mu = x.mean(axis=-2)
    var = np.mean((x - mu[..., np.newaxis, :]) ** 2, axis=-2)
    return StyleStats(mu=mu, sigma=np.sqrt(var + STYLE_VARIANCE_FLOOR))


def _check_pair(x, x_other):
    x = utils.as_token_sequence(x, 'x')
    x_other = utils.as_token_sequence(x_other, 'x_other')
    if x.shape != x_other.shape:
        raise ValueError(f'x and x_other must have the same shape; got {x.shape} and {x_other.shape}')
    return x, x_other


def mix_styles(x, x_other, eps):
    """
    Re-styles x with statistics mixed from x and x_other:
    sigma_mix * (x - mu) / sigma + mu_mix, with mu_mix = eps * mu + (1 - eps) * mu_other
    (the same for sigma).

    Evaluated as x + ((sigma_mix / sigma - 1) * (x - mu) + (mu_mix - mu)) so that eps = 1
    returns x bit for bit.
    """
    x, x_other = _check_pair(x, x_other)
    utils.check_fraction(eps, 'eps')
    own, other = style_stats(x), style_stats(x_other)
    mu_mix = eps * own.mu + (1. - eps) * other.mu
    sigma_mix = eps * own.sigma + (1. - eps) * other.sigma
    ratio = sigma_mix / own.sigma
    return x + ((ratio - 1.)[..., np.newaxis, :] * (x - own.mu[..., np.newaxis, :])
                + (mu_mix - own.mu)[..., np.newaxis, :])


def mix_styles_backward(grad, x, x_other, eps):
    """
    Gradients of sum(grad * mix_styles(x, x_other, eps)) with respect to x and x_other;
    both statistics are differentiated (nothing is detached).

    :return: (dx, dx_other)
    """
    x, x_other = _check_pair(x, x_other)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError(f'grad.shape={grad.shape} must equal x.shape={x.shape}')
    n = x.shape[-2]
    own, other = style_stats(x), style_stats(x_other)
    x_hat = (x - own.mu[..., np.newaxis, :]) / own.sigma[..., np.newaxis, :]
    x_other_hat = (x_other - other.mu[..., np.newaxis, :]) / other.sigma[..., np.newaxis, :]
    sigma_mix = eps * own.sigma + (1. - eps) * other.sigma

    d_sigma_mix = np.sum(grad * x_hat, axis=-2)
    d_mu_mix = np.sum(grad, axis=-2)
    d_x_hat = grad * sigma_mix[..., np.newaxis, :]
    dx = (d_x_hat
          - d_x_hat.mean(axis=-2, keepdims=True)
          - x_hat * np.mean(d_x_hat * x_hat, axis=-2, keepdims=True)) / own.sigma[..., np.newaxis, :]
    dx = dx + eps * (d_mu_mix[..., np.newaxis, :] + d_sigma_mix[..., np.newaxis, :] * x_hat) / n
    dx_other = (1. - eps) * (d_mu_mix[..., np.newaxis, :] + d_sigma_mix[..., np.newaxis, :] * x_other_hat) / n
    return dx, dx_other


def saliency_m(x, p: SelectiveLayerParams):
    """
    Per-token saliency from the input-dependent matrices: the magnitude of the diagonal
    attention response, |<C_i, B_i>| * mean_d(softplus(S_Δ(x_i))_d * |x_i,d|).

    :param x: (..., L, D)
    :return: (..., L)
    """
    delta_raw, B, C = project_params(x, p)
    attention = np.abs(np.sum(C * B, axis=-1))
    response = np.mean(utils.softplus(delta_raw) * np.abs(x), axis=-1)
    return attention * response


def saliency_x(x):
    x = utils.as_token_sequence(x)
    return np.mean(np.abs(x), axis=-1)


def top_p_mask(scores, p_token) -> SaliencyMask:
    """
    Marks the round(p_token * L) highest-scoring tokens (half-up rounding); ties go to the
    lower index.
    """
    scores = utils.check_finite(np.asarray(scores, dtype=np.float64), 'scores')
    if scores.ndim != 1:
        raise ValueError(f'scores must be one value per token; got shape={scores.shape}')
    utils.check_fraction(p_token, 'p_token')
    L = scores.shape[0]
    k = min(max(utils.round_half_up(p_token * L), 0), L)
    order = np.argsort(-scores, kind='stable')
    mask = np.zeros(L, dtype=bool)
    mask[order[:k]] = True
    return SaliencyMask(scores=scores, mask=mask, p_token=p_token)


def sample_beta(rng: np.random.Generator, beta_param):
    """
    Symmetric Beta(beta_param, beta_param) draw as g1 / (g1 + g2) of two Gamma(beta_param, 1)
    draws; both gammas underflowing to zero is retried.
    """
    while True:
        g1 = rng.gamma(beta_param)
        g2 = rng.gamma(beta_param)
        total = g1 + g2
        if total > 0.:
            return g1 / total
        logger.warning(f'both Gamma({beta_param}) draws underflowed to 0; drawing again')


def _draw_partner(rng: np.random.Generator, index, n):
    partner = int(rng.integers(n - 1))
    return partner + 1 if partner >= index else partner


def _token_scores(variant, x, params, rng):
    if variant == sk.VARIANT_START_M:
        if params is None:
            raise ValueError('start_m needs the layer parameters to score tokens')
        return saliency_m(x, params)
    if variant == sk.VARIANT_START_X:
        return saliency_x(x)
    if variant == sk.VARIANT_RANDOM_TOKEN:
        return rng.random(x.shape[0])
    # full_sequence: every token is masked, scores are irrelevant
    return np.zeros(x.shape[0])


def plan_start(batch, params: Optional[SelectiveLayerParams], policy: AugmentPolicy,
               rng: np.random.Generator) -> List[AugmentRecord]:
    """
    Decides which samples of the batch are augmented and how.

    Draw order per sample: firing coin, token scores (random_token only), eps, partner.
    start_mx draws one extra coin per call to choose between start_m and start_x.

    :param batch: (n, L, D)
    :param params: parameters of the layer that receives the batch (used by start_m)
    :param policy: AugmentPolicy
    :param rng: numpy.random.Generator
    :return: list of AugmentRecord, one per fired sample
    """
    batch = utils.as_token_sequence(batch, 'batch')
    if batch.ndim != 3:
        raise ValueError(f'batch must have shape (n, L, D); got {batch.shape}')
    if not policy.training or policy.variant == sk.VARIANT_NONE:
        return []
    n = batch.shape[0]
    if n < 2 and policy.apply_prob > 0.:
        raise ValueError('augmentation draws a partner from the batch; a batch of size 1 cannot be augmented')

    variant = policy.variant
    if variant == sk.VARIANT_START_MX:
        variant = sk.VARIANT_START_M if rng.random() < 0.5 else sk.VARIANT_START_X
    p_token = 1. if variant == sk.VARIANT_FULL_SEQUENCE else policy.p_token

    plan = []
    for i in range(n):
        if rng.random() >= policy.apply_prob:
            continue
        mask = top_p_mask(_token_scores(variant, batch[i], params, rng), p_token)
        eps = sample_beta(rng, policy.beta_param)
        partner = _draw_partner(rng, i, n)
        plan.append(AugmentRecord(index=i, partner=partner, eps=eps, mask=mask, variant=variant))
    logger.debug(f'{policy.variant}: {len(plan)} of {n} samples augmented')
    return plan


def apply_plan(batch, plan: List[AugmentRecord]):
    batch = utils.as_token_sequence(batch, 'batch')
    out = batch.copy()
    for record in plan:
        m = record.mask.mask
        if not m.any():
            continue
        mixed = mix_styles(batch[record.index], batch[record.partner], record.eps)
        out[record.index, m] = mixed[m]
    return out


def apply_plan_backward(grad_out, batch, plan: List[AugmentRecord]):
    """
    Gradient with respect to the batch of sum(grad_out * apply_plan(batch, plan)); the plan
    (masks, eps, partners) is a constant.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_in = grad_out.copy()
    for record in plan:
        grad_in[record.index, record.mask.mask] = 0.
    for record in plan:
        m = record.mask.mask
        if not m.any():
            continue
        g = np.zeros_like(grad_out[record.index])
        g[m] = grad_out[record.index, m]
        dx, dx_other = mix_styles_backward(g, batch[record.index], batch[record.partner], record.eps)
        grad_in[record.index] += dx
        grad_in[record.partner] += dx_other
    return grad_in


def apply_start(batch, params: Optional[SelectiveLayerParams], policy: AugmentPolicy, rng: np.random.Generator):
    """
    Saliency-driven token-aware augmentation of a batch; identity outside training.

    :return: numpy.ndarray (n, L, D)
    """
    batch = utils.as_token_sequence(batch, 'batch')
    return apply_plan(batch, plan_start(batch, params, policy, rng))
