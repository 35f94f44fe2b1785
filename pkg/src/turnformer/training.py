import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from typing_extensions import Self

from turnformer.blocks import EVAL, Mode
from turnformer.config import ConfigError, checked_fields
from turnformer.dataset import class_counts, collate
from turnformer.optim import AdamState, adam_step, global_norm, named_gradients
from turnformer.tensor import (
    ContractError,
    Tensor,
    backward,
    dtype_for,
    precision,
    recording,
    softmax_cross_entropy,
    softmax_rows,
)

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

    from turnformer.blocks import Params
    from turnformer.dataset import Sample
    from turnformer.models import TurnTakingModel

logger = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(
        self,
        epoch: int,
        batch: int,
        param_name: str,
        param_norm: float,
    ) -> None:
        super().__init__(
            f'non-finite loss at epoch {epoch}, batch {batch}; '
            f'largest parameter norm {param_norm:.4g} in {param_name}',
        )
        self.epoch = epoch
        self.batch = batch
        self.param_name = param_name
        self.param_norm = param_norm


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 1e-7
    dropout: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    precision: str = 'float32'
    # epochs without improvement before stopping; 0 never stops early
    patience: int = 10

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError('lr', f'must be positive, got {self.lr}')
        if self.weight_decay < 0:
            raise ConfigError(
                'weight_decay',
                f'must be non-negative, got {self.weight_decay}',
            )
        if self.epochs < 1:
            raise ConfigError('epochs', f'must be at least 1, got {self.epochs}')
        if self.batch_size < 1:
            raise ConfigError(
                'batch_size',
                f'must be at least 1, got {self.batch_size}',
            )
        if self.patience < 0:
            raise ConfigError('patience', f'must be non-negative, got {self.patience}')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError('dropout', f'must lie in [0, 1), got {self.dropout}')
        dtype_for(self.precision)

    @classmethod
    def from_mapping(cls, values: 'Mapping[str, Any]') -> Self:
        return cls(**checked_fields('train', cls, values))

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    train_top1: float
    val_top1: float | None


@dataclass
class TrainResult:
    params: 'Params'
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = 0.0


def cross_entropy(logits: Tensor, targets: 'ArrayLike') -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ContractError(
            'cross_entropy',
            f'targets must lie in [0, {n_classes}), '
            f'got {targets.min()}..{targets.max()}',
        )
    return softmax_cross_entropy(logits, targets)


def top1_accuracy(predictions: 'ArrayLike', targets: 'ArrayLike') -> float:
    scores = np.asarray(predictions)
    targets = np.asarray(targets)
    if not len(targets):
        raise ContractError('top1_accuracy', 'no predictions to score')
    if len(scores) != len(targets):
        raise ContractError(
            'top1_accuracy',
            f'{len(scores)} predictions for {len(targets)} targets',
        )
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return float(np.mean(np.argmax(scores, axis=-1) == targets))


def majority_baseline(
    train: 'Sequence[Sample]',
    test: 'Sequence[Sample]',
    n_classes: int,
) -> float:
    majority = int(np.argmax(class_counts(train, n_classes)))
    targets = np.array([sample.target for sample in test])
    if not len(targets):
        raise ContractError('majority_baseline', 'empty test split')
    return float(np.mean(targets == majority))


def _batches(
    samples: 'Sequence[Sample]',
    order: 'Sequence[int]',
    size: int,
) -> 'list[list[Sample]]':
    return [
        [samples[i] for i in order[start : start + size]]
        for start in range(0, len(order), size)
    ]


def predict(
    model: 'TurnTakingModel',
    params: 'Mapping[str, Tensor]',
    samples: 'Sequence[Sample]',
    batch_size: int = 32,
) -> 'NDArray[np.floating[Any]]':
    chunks = [
        softmax_rows(model.logits(collate(chunk), params, EVAL)).numpy()
        for chunk in _batches(samples, range(len(samples)), batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.n_classes))


def evaluate(
    model: 'TurnTakingModel',
    params: 'Mapping[str, Tensor]',
    samples: 'Sequence[Sample]',
    batch_size: int = 32,
) -> float:
    return top1_accuracy(
        predict(model, params, samples, batch_size),
        [sample.target for sample in samples],
    )


def _largest_parameter(params: 'Mapping[str, Tensor]') -> tuple[str, float]:
    norms = {
        name: float(np.linalg.norm(param.data.astype(np.float64)))
        for name, param in params.items()
    }
    name = max(
        norms,
        key=lambda key: norms[key] if math.isfinite(norms[key]) else math.inf,
    )
    return name, norms[name]


def train_model(
    model: 'TurnTakingModel',
    splits: 'Mapping[str, Sequence[Sample]]',
    cfg: TrainConfig,
    *,
    params: 'Params | None' = None,
) -> TrainResult:
    """Mini-batch Adam with early stopping on validation top-1.

    The parameters of the best epoch are returned; with an empty validation
    split the selection falls back to training accuracy.
    """
    train = splits.get('train') or []
    val = splits.get('val') or []
    if not train:
        raise ContractError('train_model', 'training split is empty')

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    mode = Mode(training=True, rng=np.random.default_rng(dropout_seq))

    with precision(cfg.precision):
        if params is None:
            params = model.init_params(np.random.default_rng(init_seq))
        params = {
            name: Tensor(p.data, requires_grad=True) for name, p in params.items()
        }
        state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        result = TrainResult(params=params, best_score=-1.0)
        stale = 0
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train))
            losses = []
            for index, chunk in enumerate(_batches(train, order, cfg.batch_size)):
                batch = collate(chunk)
                with recording():
                    logits = model.logits(batch, params, mode)
                    loss = cross_entropy(logits, batch.target)
                    value = loss.item()
                    if not math.isfinite(value):
                        name, norm = _largest_parameter(params)
                        logger.error(
                            'loss %s at epoch %d batch %d, '
                            'largest parameter %s norm %.4g',
                            value,
                            epoch,
                            index,
                            name,
                            norm,
                        )
                        raise NonFiniteLossError(epoch, index, name, norm)
                    grads = named_gradients(params, backward(loss))
                if logger.isEnabledFor(logging.DEBUG):
                    logger.debug(
                        'epoch %d batch %d: loss %.4f, gradient norm %.4g',
                        epoch,
                        index,
                        value,
                        global_norm(grads),
                    )
                params, state = adam_step(params, grads, state)
                losses.append(value)

            train_top1 = evaluate(model, params, train, cfg.batch_size)
            val_top1 = evaluate(model, params, val, cfg.batch_size) if val else None
            metrics = EpochMetrics(epoch, float(np.mean(losses)), train_top1, val_top1)
            result.history.append(metrics)
            logger.info(
                'epoch %d: loss %.4f, train top-1 %.4f, val top-1 %s',
                epoch,
                metrics.loss,
                train_top1,
                'n/a' if val_top1 is None else f'{val_top1:.4f}',
            )

            score = train_top1 if val_top1 is None else val_top1
            if score > result.best_score:
                result.params = params
                result.best_score = score
                result.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    logger.info(
                        'stopping after epoch %d, best epoch %d (%.4f)',
                        epoch,
                        result.best_epoch,
                        result.best_score,
                    )
                    break
    return result
