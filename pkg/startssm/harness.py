import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import ssm_keys as sk
from . import synthetic
from .domain_gap import DomainGapReport, matrix_domain_gaps
from .model import SelectiveClassifier, init_model, model_forward, model_backward, cross_entropy, predict
from .optim import AdamWState, adamw_step, cosine_lr
from .start_augment import AugmentPolicy


logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr0: float = 5e-4
    lr_min: float = 0.
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f'epochs must be >= 1; got {self.epochs}')
        if self.batch_size < 1:
            raise ValueError(f'batch_size must be >= 1; got {self.batch_size}')
        for name in ('lr0', 'weight_decay', 'adam_eps'):
            if not getattr(self, name) > 0.:
                raise ValueError(f'{name} must be > 0; got {getattr(self, name)}')
        if not 0. <= self.lr_min <= self.lr0:
            raise ValueError(f'lr_min must be in [0, lr0={self.lr0}]; got {self.lr_min}')
        for name in ('beta1', 'beta2'):
            if not 0. < getattr(self, name) < 1.:
                raise ValueError(f'{name} must be in (0, 1); got {getattr(self, name)}')
        if isinstance(self.policy, Mapping):
            self.policy = AugmentPolicy(**self.policy)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _fold_rngs(seed, held_out):
    # independent streams: initialisation, batch order, augmentation
    return tuple(np.random.default_rng([seed, held_out, stream]) for stream in range(3))


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return np.array_split(perm, max(1, n // batch_size))


def evaluate(model: SelectiveClassifier, x, y):
    """
    :return: classification accuracy of the model on (x, y)
    """
    return float(np.mean(predict(model, x) == np.asarray(y)))


def train(model: SelectiveClassifier, x, y, cfg: TrainConfig, shuffle_rng=None, augment_rng=None,
          epochs=None, eval_fn=None):
    """
    Trains the model with AdamW and a per-step cosine schedule.

    :param model: SelectiveClassifier, not modified
    :param x: (n, L, D) training inputs
    :param y: (n, ) labels
    :param cfg: TrainConfig
    :param epochs: overrides cfg.epochs (0 returns the model unchanged)
    :param eval_fn: optional callable(model) -> float evaluated after every epoch
    :return: (trained model, list of per-epoch dicts with epoch, train_loss and eval)
    """
    shuffle_rng = shuffle_rng if shuffle_rng is not None else np.random.default_rng(cfg.seed)
    augment_rng = augment_rng if augment_rng is not None else np.random.default_rng([cfg.seed, 1])
    epochs = cfg.epochs if epochs is None else epochs
    if epochs < 0:
        raise ValueError(f'epochs must be >= 0; got {epochs}')
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    policy = cfg.policy.replace(training=True)

    params = model.named_arrays()
    state = AdamWState.zeros_like(params)
    history = []
    step = 0
    for epoch in range(1, epochs + 1):
        losses = []
        for batch in _batches(n, cfg.batch_size, shuffle_rng):
            logits, cache = model_forward(x[batch], model, policy, augment_rng)
            loss, dlogits = cross_entropy(logits, y[batch])
            grads = model_backward(cache, model, dlogits).named_arrays()
            lr_t = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            step += 1
            params, state = adamw_step(params, grads, state, step, lr_t, cfg)
            model = model.with_arrays(params)
            losses.append(loss)
        record = {'epoch': epoch, 'train_loss': float(np.mean(losses))}
        if eval_fn is not None:
            record['eval'] = eval_fn(model)
        history.append(record)
        logger.debug(f'epoch {epoch}/{epochs}: {record}')
    return model, history


@dataclass(eq=False)
class LodoResult:
    variant: str
    # per (seed, held-out domain, epoch); columns ssm_keys.METRICS_COLUMNS
    metrics: pd.DataFrame
    gaps: List[DomainGapReport]
    seeds: Sequence[int]
    models: Dict = field(default_factory=dict, repr=False)

    @property
    def final(self) -> pd.DataFrame:
        """Last-epoch accuracy per (seed, held-out domain)."""
        last = self.metrics.groupby(['seed', 'held_out_domain'])['epoch'].transform('max')
        return self.metrics[self.metrics['epoch'] == last].reset_index(drop=True)

    def accuracy_table(self) -> pd.DataFrame:
        table = self.final.groupby('held_out_domain')['target_acc'].agg(['mean', lambda s: s.std(ddof=0)])
        table.columns = ['mean', 'std']
        return table

    @property
    def mean_accuracy(self):
        return float(self.final['target_acc'].mean())

    def mean_gaps(self) -> Dict[str, float]:
        if not self.gaps:
            return {}
        return {quantity: float(np.mean([report.gaps[quantity] for report in self.gaps]))
                for quantity in sk.GAP_QUANTITIES}

    def summary(self):
        final = self.final
        per_domain = {}
        for domain, group in final.groupby('held_out_domain'):
            accuracies = [float(a) for a in group['target_acc']]
            per_domain[str(domain)] = {
                'accuracies': accuracies,
                'mean': float(np.mean(accuracies)),
                'std': float(np.std(accuracies)),
            }
        per_seed = final.groupby('seed')['target_acc'].mean()
        return {
            'variant': self.variant,
            'seeds': [int(s) for s in self.seeds],
            'per_domain': per_domain,
            'overall': {'mean': float(per_seed.mean()), 'std': float(per_seed.std(ddof=0))},
            'gaps': self.mean_gaps(),
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def run_lodo(cfg, epochs=None, keep_models=False) -> LodoResult:
    """
    Leave-one-domain-out experiment: for every seed and every held-out domain, trains on the
    remaining domains and records the target accuracy after each epoch and the domain gaps
    of the last-epoch model on the source domains.

    :param cfg: ExperimentConfig
    :param epochs: overrides cfg.train.epochs (0 evaluates the initialisation)
    :param keep_models: keep the last-epoch models, keyed by (seed, held-out domain)
    :return: LodoResult
    """
    variant = cfg.train.policy.variant
    rows, gaps, models = [], [], {}
    ds = synthetic.synth_dataset(cfg.synth)
    for seed in cfg.seeds:
        for held_out in range(cfg.synth.num_domains):
            source, target = synthetic.domain_split(ds, held_out)
            x_source = source[synthetic.X_VAR].values
            y_source = source[synthetic.LABEL_VAR].values
            x_target = target[synthetic.X_VAR].values
            y_target = target[synthetic.LABEL_VAR].values
            init_rng, shuffle_rng, augment_rng = _fold_rngs(seed, held_out)
            model = init_model(cfg.model, init_rng)

            model, history = train(model, x_source, y_source, cfg.train, shuffle_rng=shuffle_rng,
                                   augment_rng=augment_rng, epochs=epochs,
                                   eval_fn=lambda m: evaluate(m, x_target, y_target))
            if not history:
                history = [{'epoch': 0, 'train_loss': np.nan, 'eval': evaluate(model, x_target, y_target)}]
            for record in history:
                rows.append((seed, held_out, variant, record['epoch'], record['train_loss'], record['eval']))
            logger.info(f'seed={seed}, held-out domain={held_out}, variant={variant}: '
                        f'target accuracy={history[-1]["eval"]:.4f}')

            report = matrix_domain_gaps(model, synthetic.domain_batches(source), layer=cfg.gap_layer,
                                        gamma_mode=cfg.gamma)
            gaps.append(report)
            if keep_models:
                models[(seed, held_out)] = model
    metrics = pd.DataFrame(rows, columns=sk.METRICS_COLUMNS)
    return LodoResult(variant=variant, metrics=metrics, gaps=gaps, seeds=list(cfg.seeds), models=models)


def default_ablation_policies(base: AugmentPolicy) -> Dict[str, AugmentPolicy]:
    """
    The ablation matrix: no augmentation, saliency from the matrices, saliency from the
    activations, random tokens, whole sequences and the random mix of the two saliencies.
    """
    return {name: base.replace(variant=variant) for name, variant in sk.CLI_VARIANT_NAMES.items()}


def p_token_sweep(base: AugmentPolicy, values) -> Dict[str, AugmentPolicy]:
    return {f'{base.variant}@p_token={value:g}': base.replace(p_token=value) for value in values}


def run_ablation(cfg, policies: Mapping[str, AugmentPolicy], epochs=None) -> pd.DataFrame:
    """
    Runs run_lodo once per named policy.

    :return: pandas.DataFrame indexed by policy name with mean/std target accuracy and the
        mean domain gap of every quantity
    """
    rows = []
    for name, policy in policies.items():
        logger.info(f'ablation: running policy {name}')
        result = run_lodo(cfg.replace(train=cfg.train.replace(policy=policy)), epochs=epochs)
        summary = result.summary()
        row = {'policy': name, 'variant': policy.variant, 'p_token': policy.p_token,
               'acc_mean': summary['overall']['mean'], 'acc_std': summary['overall']['std']}
        row.update({f'gap_{quantity}': value for quantity, value in summary['gaps'].items()})
        rows.append(row)
    return pd.DataFrame(rows).set_index('policy')
