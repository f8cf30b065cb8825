import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import xarray as xr
import scipy.spatial.distance

from . import utils
from . import ssm_keys as sk
from .ssm_core import SelectiveLayerParams, ScanCache, s6_forward


logger = logging.getLogger(__name__)


def gaussian_kernel(a, b, gamma):
    """
    k(a, b) = exp(-||a - b||^2 / gamma)
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f'vectors must have equal lengths; got {a.shape} and {b.shape}')
    _check_gamma(gamma)
    return float(np.exp(-np.sum((a - b) ** 2) / gamma))


def _check_gamma(gamma):
    if not gamma > 0.:
        raise ValueError(f'kernel bandwidth gamma must be > 0; got {gamma}')


def _as_vector_set(X, name):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, np.newaxis]
    if X.ndim != 2:
        raise ValueError(f'{name} must be a set of vectors of shape (n, k); got shape={X.shape}')
    if X.shape[0] < 1:
        raise ValueError(f'{name} is empty')
    return utils.check_finite(X, name)


def _kernel_mean(X, Y, gamma):
    sq_dist = scipy.spatial.distance.cdist(X, Y, metric='sqeuclidean')
    return utils.compensated_mean(np.exp(-sq_dist / gamma))


def mmd2(X, Y, gamma):
    """
    Biased (V-statistic) estimate of the squared maximum mean discrepancy with a Gaussian kernel,
    clamped at 0 from below.

    :param X: (m, k) set of vectors
    :param Y: (n, k) set of vectors
    :param gamma: kernel bandwidth
    :return: float
    """
    X = _as_vector_set(X, 'X')
    Y = _as_vector_set(Y, 'Y')
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f'X and Y must hold vectors of the same length; got {X.shape} and {Y.shape}')
    _check_gamma(gamma)
    value = (_kernel_mean(X, X, gamma) + _kernel_mean(Y, Y, gamma)) - 2. * _kernel_mean(X, Y, gamma)
    return max(value, 0.)


def make_feature_bank(values, domain_id, feature_dim=sk.CHANNEL_DIM) -> xr.DataArray:
    """
    Wraps per-sample token features of one domain.

    :param values: array-like (M, L, K)
    :param domain_id: label of the domain
    :param feature_dim: name of the last dimension
    :return: xarray.DataArray with dims (sample, token, feature_dim)
    """
    values = utils.check_finite(np.asarray(values, dtype=np.float64), f'feature bank {domain_id}')
    if values.ndim != 3 or min(values.shape) < 1:
        raise ValueError(f'a feature bank must have shape (M, L, K) with M, L, K >= 1; got {values.shape}')
    return xr.DataArray(values, dims=(sk.SAMPLE_DIM, sk.TOKEN_DIM, feature_dim), attrs={sk.DOMAIN_ATTR: domain_id})


def _bank_values(bank):
    if isinstance(bank, xr.DataArray):
        other_dims = [dim for dim in bank.dims if dim not in (sk.SAMPLE_DIM, sk.TOKEN_DIM)]
        return bank.transpose(sk.SAMPLE_DIM, sk.TOKEN_DIM, *other_dims).values
    return make_feature_bank(bank, None).values


def _bank_domain(bank, default):
    if isinstance(bank, xr.DataArray):
        return bank.attrs.get(sk.DOMAIN_ATTR, default)
    return default


def _check_bank_pair(S, T):
    if S.shape[1:] != T.shape[1:]:
        raise ValueError(f'feature banks must share L and feature size; got {S.shape} and {T.shape}')


def median_gamma(S, T):
    """
    Median heuristic: the median of the squared distances between all pairs of vectors sharing
    a token position, pooled over the positions and over both banks; 1 if that median is 0.
    """
    S, T = _bank_values(S), _bank_values(T)
    _check_bank_pair(S, T)
    pooled = np.concatenate([S, T], axis=0)
    if pooled.shape[0] < 2:
        logger.warning('median heuristic needs at least two vectors per token; using gamma=1')
        return 1.
    sq_dist = np.concatenate([scipy.spatial.distance.pdist(pooled[:, t, :], metric='sqeuclidean')
                              for t in range(pooled.shape[1])])
    gamma = float(np.median(sq_dist))
    if gamma == 0.:
        logger.warning('median pairwise squared distance is 0; using gamma=1')
        return 1.
    return gamma


def resolve_gamma(gamma_mode, S, T):
    if isinstance(gamma_mode, str):
        if gamma_mode != sk.GAMMA_MEDIAN:
            raise ValueError(f'gamma_mode must be {sk.GAMMA_MEDIAN!r} or a positive number; got {gamma_mode!r}')
        gamma = median_gamma(S, T)
        logger.debug(f'median heuristic gamma={gamma}')
        return gamma
    gamma = float(gamma_mode)
    _check_gamma(gamma)
    return gamma


def _to_mmd(S, T, gamma):
    return utils.compensated_mean([mmd2(S[:, t, :], T[:, t, :], gamma) for t in range(S.shape[1])])


def to_mmd(S, T, gamma_mode=sk.GAMMA_MEDIAN):
    """
    Token-level MMD: the mean over token positions t of mmd2 between the t-th token features
    of the two banks.

    :param S: feature bank (M_S, L, K); xarray.DataArray or array-like
    :param T: feature bank (M_T, L, K)
    :param gamma_mode: 'median' or a fixed positive bandwidth
    :return: float
    """
    S_values, T_values = _bank_values(S), _bank_values(T)
    _check_bank_pair(S_values, T_values)
    return _to_mmd(S_values, T_values, resolve_gamma(gamma_mode, S_values, T_values))


@dataclass
class DomainGapReport:
    gap_delta: float
    gap_B: float
    gap_C: float
    gap_features: float
    gap_inputs: float
    # one row per (quantity, domain pair); columns ssm_keys.GAP_COLUMNS
    pairs: pd.DataFrame = field(repr=False)
    layer: Optional[int] = None

    def __post_init__(self):
        for quantity, value in self.gaps.items():
            if not value >= 0.:
                raise ValueError(f'domain gap of {quantity} must be >= 0; got {value}')

    @property
    def gaps(self) -> Dict[str, float]:
        return {
            sk.QUANTITY_DELTA: self.gap_delta,
            sk.QUANTITY_B: self.gap_B,
            sk.QUANTITY_C: self.gap_C,
            sk.QUANTITY_FEATURES: self.gap_features,
            sk.QUANTITY_INPUTS: self.gap_inputs,
        }

    def to_dict(self):
        return {
            'layer': self.layer,
            'gaps': self.gaps,
            'pairs': [
                {column: _json_scalar(row[column]) for column in sk.GAP_COLUMNS}
                for _, row in self.pairs.iterrows()
            ],
        }

    def to_json(self, path=None):
        s = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, 'w', newline='\n') as f:
                f.write(s + '\n')
        return s

    def to_csv(self, path=None):
        return self.pairs.to_csv(path, index=False, lineterminator='\n')


def _json_scalar(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def _domain_pairs(domains):
    return list(itertools.combinations(domains, 2))


def pairwise_gaps(banks: Mapping, gamma_mode=sk.GAMMA_MEDIAN, quantity=sk.QUANTITY_FEATURES) -> pd.DataFrame:
    """
    To-MMD of every unordered pair of banks.

    :param banks: mapping domain_id -> feature bank
    :return: pandas.DataFrame with columns ssm_keys.GAP_COLUMNS
    """
    if len(banks) < 2:
        raise ValueError(f'at least two domains are needed; got {len(banks)}')
    values = {domain: _bank_values(bank) for domain, bank in banks.items()}
    rows = []
    for domain_a, domain_b in _domain_pairs(list(values)):
        S, T = values[domain_a], values[domain_b]
        _check_bank_pair(S, T)
        gamma = resolve_gamma(gamma_mode, S, T)
        rows.append((quantity, domain_a, domain_b, _to_mmd(S, T, gamma), gamma))
    return pd.DataFrame(rows, columns=sk.GAP_COLUMNS)


def estimate_kappa_s(banks, gamma_mode=sk.GAMMA_MEDIAN):
    """
    The largest To-MMD over unordered pairs of source banks.

    :param banks: sequence of feature banks, or a mapping domain_id -> feature bank
    :return: float
    """
    if not isinstance(banks, Mapping):
        banks = {_bank_domain(bank, i): bank for i, bank in enumerate(banks)}
    if len(banks) < 2:
        raise ValueError(f'kappa_S needs at least two banks; got {len(banks)}')
    return float(pairwise_gaps(banks, gamma_mode)['value'].max())


def _harvest(cache: ScanCache) -> Dict[str, np.ndarray]:
    return {
        sk.QUANTITY_DELTA: cache.ops.delta,
        sk.QUANTITY_B: cache.ops.B,
        sk.QUANTITY_C: cache.ops.C,
        sk.QUANTITY_FEATURES: cache.output,
        sk.QUANTITY_INPUTS: cache.input,
    }


def _layer_cache(model, x, layer, method):
    if isinstance(model, SelectiveLayerParams):
        if layer not in (0, -1):
            raise ValueError(f'a single layer has only layer index 0 (or -1); got layer={layer}')
        return s6_forward(x, model, method=method)
    from .model import layer_scan_cache
    return layer_scan_cache(model, x, layer)


def matrix_domain_gaps(model, banks: Mapping, layer=-1, gamma_mode=sk.GAMMA_MEDIAN,
                       method=sk.SCAN_SEQUENTIAL) -> DomainGapReport:
    """
    Domain gaps of the quantities seen by one selective layer: Δ (post-softplus), B, C,
    the layer output and the layer input.

    :param model: a SelectiveClassifier or a single SelectiveLayerParams
    :param banks: mapping domain_id -> input batch (M, L, D) of that domain
    :param layer: index of the block to inspect (negative counts from the end)
    :param gamma_mode: 'median' or a fixed positive bandwidth
    :return: DomainGapReport; each gap is the maximum over domain pairs
    """
    if len(banks) < 2:
        raise ValueError(f'domain gaps need at least two domains; got {len(banks)}')
    harvested = {}
    for domain, batch in banks.items():
        batch = utils.as_token_sequence(_bank_values(batch), f'bank {domain}')
        harvested[domain] = _harvest(_layer_cache(model, batch, layer, method))
        logger.debug(f'harvested layer={layer} quantities for domain={domain}; batch shape={batch.shape}')

    tables = []
    for quantity in sk.GAP_QUANTITIES:
        quantity_banks = {domain: make_feature_bank(q[quantity], domain) for domain, q in harvested.items()}
        tables.append(pairwise_gaps(quantity_banks, gamma_mode, quantity=quantity))
    pairs = pd.concat(tables, ignore_index=True)
    gap = pairs.groupby('quantity')['value'].max()
    report = DomainGapReport(
        gap_delta=float(gap[sk.QUANTITY_DELTA]),
        gap_B=float(gap[sk.QUANTITY_B]),
        gap_C=float(gap[sk.QUANTITY_C]),
        gap_features=float(gap[sk.QUANTITY_FEATURES]),
        gap_inputs=float(gap[sk.QUANTITY_INPUTS]),
        pairs=pairs,
        layer=layer,
    )
    logger.info(f'domain gaps at layer={layer}: {report.gaps}')
    return report


@dataclass(eq=False)
class AccumulationTrace:
    """
    Decomposition of the output gap of one token. All arrays are per channel (D,).

    The signed gap g_i = y_i^S - y_i^T satisfies exactly
    g_i = carry + term_delta + term_cdbx + exp_residual + c_ratio_residual,
    where the two residuals are what the first-order recurrence drops: the linearisation
    exp(Δ A) ~ 1 + Δ A and the step C_i ~ C_{i-1}.
    """
    token_index: int
    exact_gap: np.ndarray
    signed_gap: np.ndarray
    carry: np.ndarray
    term_delta: np.ndarray
    term_cdbx: np.ndarray
    exp_residual: np.ndarray
    c_ratio_residual: np.ndarray
    approx_error: np.ndarray

    @property
    def reconstructed(self):
        return self.carry + self.term_delta + self.term_cdbx

    @property
    def relative_error(self):
        scale = np.linalg.norm(self.signed_gap)
        if scale == 0.:
            return 0. if np.linalg.norm(self.approx_error) == 0. else np.inf
        return float(np.linalg.norm(self.approx_error) / scale)


def accumulation_trace(xS, xT, p: SelectiveLayerParams, mode=sk.DISCRETIZATION_ZOH) -> List[AccumulationTrace]:
    """
    Follows how the gap between the outputs for two (mean-embedded) sequences builds up token
    by token.

    For token i+1 the first-order recurrence is
    g_{i+1} ~ g_i + Δ^S_{i+1} sum_n A_n (z^S_i - z^T_i)_n                (carry)
            + (Δ^S_{i+1} - Δ^T_{i+1}) sum_n A_n (z^T_i)_n               (term_delta)
            + C^S_{i+1} B̄^S_{i+1} x^S_{i+1} - C^T_{i+1} B̄^T_{i+1} x^T_{i+1}   (term_cdbx)
    with z_{i,n} = C_{i,n} h_{i,n} the per-state output contributions (sum_n z_{i,n} = y_i).

    :param xS: (L, D) mean embedding of the first domain
    :param xT: (L, D) mean embedding of the second domain
    :param p: SelectiveLayerParams
    :return: list of AccumulationTrace, token_index 1..L
    """
    xS = utils.as_token_sequence(xS, 'xS')
    xT = utils.as_token_sequence(xT, 'xT')
    if xS.ndim != 2 or xS.shape != xT.shape:
        raise ValueError(f'xS and xT must be single sequences of equal shape (L, D); got {xS.shape} and {xT.shape}')
    if xS.shape[1] != p.D:
        raise ValueError(f'sequences have D={xS.shape[1]} but the layer has D={p.D}')
    cS = s6_forward(xS, p, mode=mode)
    cT = s6_forward(xT, p, mode=mode)
    A = p.A

    def parts(cache, x):
        ops = cache.ops
        z = ops.C[:, np.newaxis, :] * cache.hidden
        diag = np.sum(ops.C[:, np.newaxis, :] * ops.B_bar, axis=-1) * x
        return ops, z, diag

    opsS, zS, diagS = parts(cS, xS)
    opsT, zT, diagT = parts(cT, xT)
    signed = cS.output - cT.output

    def residuals(ops, cache, z, t):
        exp_part = np.sum((np.expm1(ops.delta_A[t]) - ops.delta_A[t]) * z[t - 1], axis=-1)
        c_part = np.sum((ops.C[t] - ops.C[t - 1])[np.newaxis, :] * ops.A_bar[t] * cache.hidden[t - 1], axis=-1)
        return exp_part, c_part

    trace = []
    zero = np.zeros(xS.shape[1])
    for t in range(xS.shape[0]):
        term_cdbx = diagS[t] - diagT[t]
        if t == 0:
            carry, term_delta = zero.copy(), zero.copy()
            exp_residual, c_ratio_residual = zero.copy(), zero.copy()
        else:
            carry = signed[t - 1] + opsS.delta[t] * np.sum(A * (zS[t - 1] - zT[t - 1]), axis=-1)
            term_delta = (opsS.delta[t] - opsT.delta[t]) * np.sum(A * zT[t - 1], axis=-1)
            eS, cS_res = residuals(opsS, cS, zS, t)
            eT, cT_res = residuals(opsT, cT, zT, t)
            exp_residual, c_ratio_residual = eS - eT, cS_res - cT_res
        trace.append(AccumulationTrace(
            token_index=t + 1,
            exact_gap=np.abs(signed[t]),
            signed_gap=signed[t],
            carry=carry,
            term_delta=term_delta,
            term_cdbx=term_cdbx,
            exp_residual=exp_residual,
            c_ratio_residual=c_ratio_residual,
            approx_error=np.abs(signed[t] - (carry + term_delta + term_cdbx)),
        ))
    return trace


TRACE_COLUMNS = ['token_index', 'channel', 'exact_gap', 'carry', 'term_delta', 'term_cdbx',
                 'exp_residual', 'c_ratio_residual', 'approx_error']


def trace_to_dataframe(trace: Sequence[AccumulationTrace]) -> pd.DataFrame:
    """
    Long table of an accumulation trace, one row per (token, channel).
    """
    rows = []
    for step in trace:
        for d in range(step.exact_gap.shape[0]):
            rows.append((step.token_index, d) + tuple(
                float(getattr(step, column)[d]) for column in TRACE_COLUMNS[2:]))
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)
