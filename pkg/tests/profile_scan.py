import logging
import cProfile
import pstats
from pstats import SortKey

import numpy as np

import startssm as ss
import startssm.ssm_keys as sk
from startssm.verify import random_layer


logging.basicConfig(format='%(asctime)s - %(levelname)s - %(name)s - %(message)s', level=logging.INFO)


L = 4096
D, N = 8, 4


def profile_scans(n, method):
    for i in range(n):
        x = rng.normal(size=(L, D))
        cache = ss.s6_forward(x, p, method=method)
        ss.s6_backward(cache, p, np.ones_like(x))


if __name__ == '__main__':
    rng = np.random.default_rng(0)
    p = random_layer(rng, D, N)

    for method in sk.SCAN_METHODS:
        print(method)
        cProfile.run(f'profile_scans(10, {method!r})', 'my_stats')
        stats = pstats.Stats('my_stats')
        stats.strip_dirs().sort_stats(SortKey.TIME).print_stats(15)
