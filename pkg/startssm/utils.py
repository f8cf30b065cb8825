import math
import numpy as np
import scipy.special


def ensure_tuple(indices):
    if indices is None:
        return None
    if not isinstance(indices, (tuple, list)):
        return indices,
    return tuple(indices)


def groupby(an_iterable, key_func):
    """
    Group an iterable according to a result on key_func

    :param an_iterable: an iterable to group
    :param key_func: a callable
    :return: a dictionary (key, list of items)
    """

    group_by_key = {}
    for item in an_iterable:
        k = key_func(item)
        group_by_key.setdefault(k, []).append(item)
    return group_by_key


def check_finite(arr, name):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        count = arr.size - np.count_nonzero(np.isfinite(arr))
        raise ValueError(f'{name} contains {count} non-finite value(s); shape={arr.shape}')
    return arr


def as_token_sequence(x, name='x'):
    """
    Validates a token sequence (or a batch of them) and returns it as a float64 array.

    :param x: array-like of shape (..., L, D)
    :param name: used in error messages
    :return: numpy.ndarray of dtype float64
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f'{name} must have shape (..., L, D); got shape={x.shape}')
    if x.shape[-2] < 1 or x.shape[-1] < 1:
        raise ValueError(f'{name} must have L >= 1 and D >= 1; got shape={x.shape}')
    return check_finite(x, name)


def softplus(x):
    return np.logaddexp(0., x)


def sigmoid(x):
    return scipy.special.expit(x)


def silu(x):
    return x * scipy.special.expit(x)


def silu_grad(x):
    s = scipy.special.expit(x)
    return s * (1. + x * (1. - s))


def compensated_mean(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0:
        raise ValueError('mean of an empty array')
    return math.fsum(arr.ravel()) / arr.size


def relative_error(actual, expected):
    """
    ||actual - expected|| / max(||actual||, ||expected||), with 0 for two zero arrays.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ValueError(f'shapes differ: {actual.shape} vs {expected.shape}')
    scale = max(np.linalg.norm(actual), np.linalg.norm(expected))
    if scale == 0.:
        return 0.
    return float(np.linalg.norm(actual - expected) / scale)


def round_half_up(value):
    return int(math.floor(value + 0.5))


def check_fraction(value, name):
    if not (0. <= value <= 1.):
        raise ValueError(f'{name} must be in [0, 1]; got {value}')
    return value
