import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np


logger = logging.getLogger(__name__)


@dataclass(eq=False)
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]):
        return cls(m={name: np.zeros_like(p) for name, p in params.items()},
                   v={name: np.zeros_like(p) for name, p in params.items()})


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamWState, t, lr_t,
               cfg) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """
    One AdamW update with decoupled weight decay:
    p <- p * (1 - lr_t * weight_decay) - lr_t * m_hat / (sqrt(v_hat) + adam_eps)

    :param params: dict name -> array
    :param grads: dict name -> gradient, same keys and shapes as params
    :param state: AdamWState (zero moments before the first step)
    :param t: 1-based step number used for bias correction
    :param lr_t: learning rate of this step
    :param cfg: anything with beta1, beta2, adam_eps, weight_decay attributes (e.g. TrainConfig)
    :return: (new params, new state)
    """
    if t < 1:
        raise ValueError(f'AdamW step number must be >= 1; got t={t}')
    if params.keys() != grads.keys():
        raise ValueError(f'params and grads have different keys: {sorted(set(params) ^ set(grads))}')
    correction1 = 1. - cfg.beta1 ** t
    correction2 = 1. - cfg.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f'non-finite gradient for {name} at step t={t}')
        m = cfg.beta1 * state.m.get(name, 0.) + (1. - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.) + (1. - cfg.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = p * (1. - lr_t * cfg.weight_decay) - lr_t * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamWState(m=new_m, v=new_v)


def cosine_lr(t, T, lr0, lr_min=0.):
    """
    Cosine decay from lr0 at t = 0 to lr_min at t = T.
    """
    if t < 0 or t > T:
        raise ValueError(f'schedule step must satisfy 0 <= t <= T; got t={t}, T={T}')
    if T == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1. + math.cos(math.pi * t / T))
