import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.special

from . import utils
from . import ssm_keys as sk
from .ssm_core import SelectiveLayerParams, ScanCache, s6_forward, s6_backward
from .start_augment import AugmentPolicy, AugmentRecord, plan_start, apply_plan, apply_plan_backward


logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    depth: int = 2
    D: int = 8
    N: int = 4
    num_classes: int = 5
    mode: str = sk.DISCRETIZATION_ZOH
    scan_method: str = sk.SCAN_SEQUENTIAL

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f'depth must be >= 1; got {self.depth}')
        if self.D < 1 or self.N < 1 or self.num_classes < 2:
            raise ValueError(f'need D >= 1, N >= 1, num_classes >= 2; got D={self.D}, N={self.N}, '
                             f'num_classes={self.num_classes}')
        if self.mode not in sk.DISCRETIZATION_MODES:
            raise ValueError(f'unknown discretization mode={self.mode}; expected one of {sk.DISCRETIZATION_MODES}')
        if self.scan_method not in sk.SCAN_METHODS:
            raise ValueError(f'unknown scan method={self.scan_method}; expected one of {sk.SCAN_METHODS}')


@dataclass(eq=False)
class SelectiveClassifier:
    """
    Stack of selective layers, each wrapped as out = u + SiLU(S6(u)), followed by mean pooling
    over tokens and an affine classifier. The same container holds gradients.
    """
    blocks: List[SelectiveLayerParams]
    w_out: np.ndarray
    b_out: np.ndarray
    mode: str = sk.DISCRETIZATION_ZOH
    scan_method: str = sk.SCAN_SEQUENTIAL

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValueError('a classifier needs at least one block')
        self.w_out = np.array(self.w_out, dtype=np.float64)
        self.b_out = np.array(self.b_out, dtype=np.float64)
        D = self.blocks[0].D
        if any(block.D != D for block in self.blocks):
            raise ValueError(f'all blocks must share D; got {[block.D for block in self.blocks]}')
        if self.w_out.ndim != 2 or self.w_out.shape[0] != D or self.b_out.shape != self.w_out.shape[1:]:
            raise ValueError(f'classifier weights must be (D={D}, K) and (K, ); '
                             f'got {self.w_out.shape} and {self.b_out.shape}')

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def D(self):
        return self.blocks[0].D

    @property
    def num_classes(self):
        return self.w_out.shape[1]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for i, block in enumerate(self.blocks):
            arrays.update({f'blocks.{i}.{name}': arr for name, arr in block.arrays().items()})
        arrays['w_out'] = self.w_out
        arrays['b_out'] = self.b_out
        return arrays

    def with_arrays(self, arrays: Dict[str, np.ndarray]):
        blocks = []
        for i, block in enumerate(self.blocks):
            blocks.append(SelectiveLayerParams(**{name: arrays[f'blocks.{i}.{name}'] for name in block.arrays()}))
        return SelectiveClassifier(blocks=blocks, w_out=arrays['w_out'], b_out=arrays['b_out'],
                                   mode=self.mode, scan_method=self.scan_method)

    def map(self, func, *others):
        mine = self.named_arrays()
        theirs = [other.named_arrays() for other in others]
        return self.with_arrays({name: func(arr, *(t[name] for t in theirs)) for name, arr in mine.items()})

    def zeros_like(self):
        return self.map(np.zeros_like)

    def to_dict(self):
        return {
            'mode': self.mode,
            'scan_method': self.scan_method,
            'blocks': [block.to_dict() for block in self.blocks],
            'w_out': self.w_out.tolist(),
            'b_out': self.b_out.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            blocks=[SelectiveLayerParams.from_dict(block) for block in d['blocks']],
            w_out=d['w_out'],
            b_out=d['b_out'],
            mode=d.get('mode', sk.DISCRETIZATION_ZOH),
            scan_method=d.get('scan_method', sk.SCAN_SEQUENTIAL),
        )

    def __repr__(self):
        dump = [repr(type(self))]
        dump.append(f'\tdepth={self.depth}, D={self.D}, N={self.blocks[0].N}, num_classes={self.num_classes}')
        dump.append(f'\tdiscretization={self.mode}, scan={self.scan_method}')
        return '\n'.join(dump)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> SelectiveClassifier:
    blocks = [SelectiveLayerParams.initialize(cfg.D, cfg.N, rng) for _ in range(cfg.depth)]
    w_out = rng.normal(scale=1. / np.sqrt(cfg.D), size=(cfg.D, cfg.num_classes))
    return SelectiveClassifier(blocks=blocks, w_out=w_out, b_out=np.zeros(cfg.num_classes),
                               mode=cfg.mode, scan_method=cfg.scan_method)


def save_model(model: SelectiveClassifier, path):
    pathlib.Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path) -> SelectiveClassifier:
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f'model file not found: {path}')
    return SelectiveClassifier.from_dict(json.loads(path.read_text()))


@dataclass(eq=False)
class BlockCache:
    # block input before augmentation
    input: np.ndarray
    plan: List[AugmentRecord]
    scan: ScanCache


@dataclass(eq=False)
class ModelCache:
    blocks: List[BlockCache]
    # output of the last block, (n, L, D)
    features: np.ndarray
    pooled: np.ndarray
    # the input had no batch axis
    single: bool = False


def model_forward(x, model: SelectiveClassifier, policy: Optional[AugmentPolicy] = None,
                  rng: Optional[np.random.Generator] = None):
    """
    :param x: (n, L, D) batch or a single (L, D) sequence
    :param model: SelectiveClassifier
    :param policy: AugmentPolicy; None or a non-training policy means no augmentation
    :param rng: numpy.random.Generator, needed when the policy augments
    :return: (logits (n, K) or (K, ), ModelCache)
    """
    x = utils.as_token_sequence(x)
    single = x.ndim == 2
    if single:
        x = x[np.newaxis]
    if x.ndim != 3:
        raise ValueError(f'x must have shape (n, L, D) or (L, D); got {x.shape}')
    if x.shape[-1] != model.D:
        raise ValueError(f'x has D={x.shape[-1]} but the model has D={model.D}')

    caches = []
    u = x
    for i, block in enumerate(model.blocks):
        plan = []
        if policy is not None and policy.active_at(i):
            if rng is None:
                raise ValueError('an augmenting policy needs a random generator')
            plan = plan_start(u, block, policy, rng)
        v = apply_plan(u, plan) if plan else u
        scan_cache = s6_forward(v, block, mode=model.mode, method=model.scan_method)
        caches.append(BlockCache(input=u, plan=plan, scan=scan_cache))
        u = v + utils.silu(scan_cache.output)
    pooled = u.mean(axis=-2)
    logits = pooled @ model.w_out + model.b_out
    cache = ModelCache(blocks=caches, features=u, pooled=pooled, single=single)
    return (logits[0] if single else logits), cache


def model_backward(cache: ModelCache, model: SelectiveClassifier, dlogits) -> SelectiveClassifier:
    """
    Gradients of sum(dlogits * logits) with respect to every model array; the augmentation plan
    of the forward pass is held constant.

    :return: gradients as a SelectiveClassifier
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if cache.single:
        dlogits = dlogits[np.newaxis]
    if dlogits.shape != (cache.pooled.shape[0], model.num_classes):
        raise ValueError(f'dlogits.shape={dlogits.shape} does not match the cached batch '
                         f'({cache.pooled.shape[0]}, {model.num_classes})')
    if len(cache.blocks) != model.depth:
        raise ValueError(f'cache has {len(cache.blocks)} blocks, the model has {model.depth}')

    dw_out = cache.pooled.T @ dlogits
    db_out = dlogits.sum(axis=0)
    L = cache.features.shape[-2]
    du = np.broadcast_to((dlogits @ model.w_out.T)[:, np.newaxis, :] / L, cache.features.shape).copy()

    block_grads = [None] * model.depth
    for i in reversed(range(model.depth)):
        block_cache = cache.blocks[i]
        scan_cache = block_cache.scan
        ds = du * utils.silu_grad(scan_cache.output)
        dv_scan, block_grads[i] = s6_backward(scan_cache, model.blocks[i], ds)
        dv = du + dv_scan
        du = apply_plan_backward(dv, block_cache.input, block_cache.plan) if block_cache.plan else dv
    return SelectiveClassifier(blocks=block_grads, w_out=dw_out, b_out=db_out,
                               mode=model.mode, scan_method=model.scan_method)


def cross_entropy(logits, labels):
    """
    Mean softmax cross-entropy over the batch.

    :return: (loss, dlogits)
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ValueError(f'logits must be (n, K) with one label per row; got {logits.shape} and {labels.shape}')
    n = logits.shape[0]
    log_p = scipy.special.log_softmax(logits, axis=-1)
    loss = -float(np.mean(log_p[np.arange(n), labels]))
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1.
    return loss, dlogits / n


def predict(model: SelectiveClassifier, x, batch_size=256):
    x = utils.as_token_sequence(x)
    predictions = [np.argmax(model_forward(x[i:i + batch_size], model)[0], axis=-1)
                   for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(predictions)


def layer_scan_cache(model: SelectiveClassifier, x, layer) -> ScanCache:
    """
    ScanCache of one block for an inference pass over x.
    """
    if not -model.depth <= layer < model.depth:
        raise ValueError(f'layer index {layer} out of range for a model of depth {model.depth}')
    _, cache = model_forward(x, model)
    return cache.blocks[layer].scan
