import logging
import time

import numpy as np
import pandas as pd

from . import ssm_keys as sk
from .ssm_core import SelectiveLayerParams, discretize, project_params, scan


logger = logging.getLogger(__name__)


BENCH_LENGTHS = (256, 1024, 4096, 16384)
# allowed growth exponent of the sequential scan time in L
LINEARITY_EXPONENT = 1.15
# largest allowed ratio between the slowest and the fastest sequential ns/token across L
SPREAD_LIMIT = 2.
# informational only: parallel slower than this many times the sequential scan is logged
PARALLEL_SLOWDOWN_WARNING = 4.


def time_scans(lengths=BENCH_LENGTHS, D=4, N=4, repeats=3, seed=0) -> pd.DataFrame:
    """
    Best-of-repeats wall time of both scan variants.

    :return: pandas.DataFrame with columns ssm_keys.BENCH_COLUMNS
    """
    rng = np.random.default_rng(seed)
    p = SelectiveLayerParams.initialize(D, N, rng)
    rows = []
    for L in lengths:
        x = rng.normal(size=(L, D))
        delta_raw, B, C = project_params(x, p)
        ops = discretize(delta_raw, B, p, C=C)
        for method in sk.SCAN_METHODS:
            best = np.inf
            for _ in range(repeats):
                start = time.perf_counter_ns()
                scan(ops, x, method=method)
                best = min(best, time.perf_counter_ns() - start)
            rows.append((L, method, best / L))
            logger.info(f'L={L}, {method}: {best / L:.1f} ns/token')
    return pd.DataFrame(rows, columns=sk.BENCH_COLUMNS)


def growth_exponent(table: pd.DataFrame, variant=sk.SCAN_SEQUENTIAL):
    """
    Slope of log(total time) against log(L) for one variant.
    """
    rows = table[table['variant'] == variant]
    if len(rows) < 2:
        raise ValueError(f'need at least two lengths to fit a growth exponent; got {len(rows)}')
    L = rows['L'].to_numpy(dtype=np.float64)
    total = rows['ns_per_token'].to_numpy() * L
    return float(np.polyfit(np.log(L), np.log(total), 1)[0])


def check_linearity(table: pd.DataFrame):
    """
    :return: (passed, detail); passes when the sequential scan grows at most like L^LINEARITY_EXPONENT
        and its ns/token varies by less than SPREAD_LIMIT across L
    """
    exponent = growth_exponent(table)
    seq = table[table['variant'] == sk.SCAN_SEQUENTIAL].set_index('L')['ns_per_token']
    par = table[table['variant'] == sk.SCAN_PARALLEL].set_index('L')['ns_per_token']
    spread = float(seq.max() / seq.min())
    longest = seq.index.max()
    if longest in par.index and par[longest] > PARALLEL_SLOWDOWN_WARNING * seq[longest]:
        logger.warning(f'parallel scan is {par[longest] / seq[longest]:.1f}x slower than sequential at L={longest}')
    detail = (f'sequential growth exponent {exponent:.3f} (limit {LINEARITY_EXPONENT}); '
              f'ns/token spread {spread:.2f}x (limit {SPREAD_LIMIT:g}x)')
    return exponent <= LINEARITY_EXPONENT and spread < SPREAD_LIMIT, detail
