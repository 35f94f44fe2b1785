"""Turn-taking models: the multi-stage multi-stream transformer and its baselines.

Every model maps a batch of past feature windows to next-speaker logits of
shape ``(batch, n_classes)``. Parameters live in a flat ``{dotted name: Tensor}``
mapping so they can be checkpointed and optimised without knowing the model.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import reduce
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
from typing_extensions import Self

from turnformer.blocks import (
    EVAL,
    Initializer,
    ModelDims,
    Params,
    Scope,
    cross_stack_forward,
    decoder_forward,
    dropout,
    encoder_forward,
    init_cross_stack,
    init_decoder,
    init_encoder,
    linear,
    positional_encoding,
)
from turnformer.config import ConfigError, check_scalar, checked_fields
from turnformer.modality import (
    DEFAULT_RAW_DIMS,
    Modality,
    UnknownModalityError,
    canonical,
    format_modalities,
)
from turnformer.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    concat,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax_rows,
    stack,
    sum_,
)

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import NDArray

    from turnformer.blocks import Mode
    from turnformer.dataset import Batch


class Fusion(str, Enum):
    SOFT_AVERAGE = 'soft_average'
    CONCAT = 'concat'
    LEARNED_AVERAGE = 'learned_average'

    @classmethod
    def parse(cls, value: object) -> 'Fusion':
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                'fusion',
                f'{value!r} is not one of {", ".join(f.value for f in cls)}',
            ) from None


@dataclass(frozen=True)
class StreamSpec:
    query: Modality
    kv: Modality

    def __post_init__(self) -> None:
        if self.query == self.kv:
            raise ConfigError(
                'streams',
                f'stream {self.label} attends a modality to itself',
            )

    @property
    def label(self) -> str:
        return f'{self.query.value}>{self.kv.value}'

    @classmethod
    def parse(cls, text: str) -> Self:
        """Parse ``'T>V'``: text supplies queries, video keys and values."""
        text = check_scalar('streams', text, str)
        query, sep, kv = text.strip().partition('>')
        if not sep:
            raise ConfigError('streams', f'expected QUERY>KV, got {text!r}')
        try:
            pair = Modality(query.strip().upper()), Modality(kv.strip().upper())
        except ValueError:
            raise ConfigError('streams', f'unknown modality in {text!r}') from None
        return cls(*pair)


DEFAULT_STREAMS = (
    StreamSpec(Modality.TEXT, Modality.VIDEO),
    StreamSpec(Modality.AUDIO, Modality.VIDEO),
)


def _raw_dims_from(values: 'Mapping[str, Any]') -> dict[Modality, int]:
    dims = dict(DEFAULT_RAW_DIMS)
    for key, value in values.items():
        try:
            modality = Modality.from_manifest_key(key)
        except KeyError:
            raise UnknownModalityError(key) from None
        dims[modality] = check_scalar(f'raw_dims.{key}', value, int)
    return dims


def _check_common(
    n_classes: int,
    l_out: int,
    raw_dims: 'Mapping[Modality, int]',
) -> None:
    if n_classes < 2:  # noqa: PLR2004
        raise ConfigError('n_classes', f'must be at least 2, got {n_classes}')
    if l_out < 1:
        raise ConfigError('l_out', f'must be at least 1, got {l_out}')
    for modality, width in raw_dims.items():
        if width < 1:
            raise ConfigError('raw_dims', f'{modality.manifest_key} width {width} < 1')


@dataclass(frozen=True)
class ThreeMConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    streams: tuple[StreamSpec, ...] = DEFAULT_STREAMS
    fusion: Fusion = Fusion.SOFT_AVERAGE
    include_stage1: bool = True
    include_stage2: bool = True
    stage2_decoder: bool = True
    n_classes: int = 4
    use_prior: bool = False
    l_out: int = 12
    raw_dims: dict[Modality, int] = field(
        default_factory=lambda: dict(DEFAULT_RAW_DIMS),
    )

    def __post_init__(self) -> None:
        if not (self.include_stage1 or self.include_stage2):
            raise ConfigError('include_stage1', 'at least one stage must be enabled')
        if not self.streams:
            raise ConfigError('streams', 'at least one stream is required')
        labels = [stream.label for stream in self.streams]
        if len(set(labels)) != len(labels):
            raise ConfigError('streams', f'duplicate streams in {labels}')
        _check_common(self.n_classes, self.l_out, self.raw_dims)

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return canonical(
            m for stream in self.streams for m in (stream.query, stream.kv)
        )

    @property
    def prior_width(self) -> int:
        return self.n_classes if self.use_prior else 0

    @classmethod
    def from_mapping(cls, values: 'Mapping[str, Any]') -> Self:
        kwargs = checked_fields('model', cls, values)
        if 'dims' in kwargs:
            kwargs['dims'] = ModelDims.from_mapping(kwargs['dims'])
        if 'streams' in kwargs:
            kwargs['streams'] = tuple(StreamSpec.parse(s) for s in kwargs['streams'])
        if 'fusion' in kwargs:
            kwargs['fusion'] = Fusion.parse(kwargs['fusion'])
        if 'raw_dims' in kwargs:
            kwargs['raw_dims'] = _raw_dims_from(kwargs['raw_dims'])
        return cls(**kwargs)

    def as_dict(self) -> dict[str, Any]:
        return {
            'dims': self.dims.as_dict(),
            'streams': [stream.label for stream in self.streams],
            'fusion': self.fusion.value,
            'include_stage1': self.include_stage1,
            'include_stage2': self.include_stage2,
            'stage2_decoder': self.stage2_decoder,
            'n_classes': self.n_classes,
            'use_prior': self.use_prior,
            'l_out': self.l_out,
            'raw_dims': {m.manifest_key: self.raw_dims[m] for m in self.modalities},
        }


@dataclass(frozen=True)
class BaselineConfig:
    modalities: tuple[Modality, ...]
    dims: ModelDims = field(default_factory=ModelDims)
    n_classes: int = 4
    use_prior: bool = False
    l_out: int = 12
    hidden: int = 128
    raw_dims: dict[Modality, int] = field(
        default_factory=lambda: dict(DEFAULT_RAW_DIMS),
    )

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ConfigError('modalities', 'at least one modality is required')
        if self.hidden < 1:
            raise ConfigError('hidden', f'must be at least 1, got {self.hidden}')
        _check_common(self.n_classes, self.l_out, self.raw_dims)
        object.__setattr__(self, 'modalities', canonical(self.modalities))

    @property
    def prior_width(self) -> int:
        return self.n_classes if self.use_prior else 0

    def as_dict(self) -> dict[str, Any]:
        return {
            'modalities': format_modalities(self.modalities),
            'dims': self.dims.as_dict(),
            'n_classes': self.n_classes,
            'use_prior': self.use_prior,
            'l_out': self.l_out,
            'hidden': self.hidden,
            'raw_dims': {m.manifest_key: self.raw_dims[m] for m in self.modalities},
        }


def prior_one_hot(
    prior: 'NDArray[np.integer[Any]]',
    n_classes: int,
) -> 'NDArray[np.float64]':
    prior = np.asarray(prior)
    if prior.size and (prior.min() < 0 or prior.max() >= n_classes):
        raise ContractError(
            'prior',
            f'speaker label outside [0, {n_classes}): {prior.min()}..{prior.max()}',
        )
    return np.eye(n_classes)[prior]


def modality_tokens(batch: 'Batch', modality: Modality) -> 'NDArray[np.floating[Any]]':
    try:
        return batch.features[modality]
    except KeyError:
        raise ConfigError(
            'modalities',
            f'model needs {modality.manifest_key} features, batch has '
            f'{format_modalities(batch.features) or "none"}',
        ) from None


def embed_modality(
    tokens: 'NDArray[np.floating[Any]]',
    prior: 'NDArray[np.integer[Any]] | None',
    scope: Scope,
    n_classes: int,
) -> Tensor:
    """Linear embedding of ``(batch, length, raw)`` tokens plus positional encoding.

    With a prior, the one-hot current speaker is appended to every token first.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 3:  # noqa: PLR2004
        raise DimensionError(
            'embed_modality',
            tokens.shape,
            detail='expected (B, L, raw)',
        )
    if prior is not None:
        if len(prior) != tokens.shape[0]:
            raise DimensionError('embed_modality', tokens.shape, np.shape(prior))
        one_hot = prior_one_hot(prior, n_classes)[:, None, :]
        one_hot = np.broadcast_to(one_hot, (*tokens.shape[:2], n_classes))
        tokens = np.concatenate([tokens, one_hot], axis=-1)
    embedded = linear(Tensor(tokens), scope)
    return embedded + Tensor(positional_encoding(tokens.shape[1], embedded.shape[-1]))


def _broadcast_rows(rows: Tensor, batch_size: int) -> Tensor:
    return add(rows, Tensor(np.zeros((batch_size, *rows.shape))))


def _encode_decode(
    tokens: 'NDArray[np.floating[Any]]',
    prior: 'NDArray[np.integer[Any]] | None',
    scope: Scope,
    dims: ModelDims,
    n_classes: int,
    mode: 'Mode',
) -> Tensor:
    memory = encoder_forward(
        embed_modality(tokens, prior, scope.child('embed'), n_classes),
        scope.child('encoder'),
        dims,
        mode,
    )
    queries = _broadcast_rows(scope['queries'], memory.shape[0])
    return decoder_forward(queries, memory, scope.child('decoder'), dims, mode)


def _init_encode_decode(
    init: Initializer,
    n_in: int,
    dims: ModelDims,
    l_out: int,
) -> None:
    init.linear('embed', n_in, dims.d_model)
    init_encoder(init.child('encoder'), dims)
    init.uniform('queries', (l_out, dims.d_model), l_out, dims.d_model)
    init_decoder(init.child('decoder'), dims)


def stage_one_forward(
    batch: 'Batch',
    config: ThreeMConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> dict[Modality, Tensor]:
    if not config.include_stage1:
        raise ConfigError('include_stage1', 'stage one is disabled in this config')
    prior = batch.prior if config.use_prior else None
    return {
        modality: _encode_decode(
            modality_tokens(batch, modality),
            prior,
            Scope(params, f'stage1.{modality.value}'),
            config.dims,
            config.n_classes,
            mode,
        )
        for modality in config.modalities
    }


def pool_matrix(length: int, l_out: int) -> 'NDArray[np.float64]':
    """Chunk-mean pooling from ``length`` rows to ``l_out`` rows."""
    pool = np.zeros((l_out, length))
    for row in range(l_out):
        start = row * length // l_out
        stop = max(start + 1, (row + 1) * length // l_out)
        pool[row, start:stop] = 1.0 / (stop - start)
    return pool


def _pooled_embeddings(
    batch: 'Batch',
    config: ThreeMConfig,
    params: 'Mapping[str, Tensor]',
) -> dict[Modality, Tensor]:
    prior = batch.prior if config.use_prior else None
    pooled = {}
    for modality in config.modalities:
        embedded = embed_modality(
            modality_tokens(batch, modality),
            prior,
            Scope(params, f'embed.{modality.value}'),
            config.n_classes,
        )
        pool = pool_matrix(embedded.shape[-2], config.l_out)
        pooled[modality] = matmul(Tensor(pool), embedded)
    return pooled


def hybrid_stream_forward(
    z_q: Tensor,
    z_kv: Tensor,
    scope: Scope,
    config: ThreeMConfig,
    mode: 'Mode' = EVAL,
) -> Tensor:
    if z_q.shape != z_kv.shape:
        raise DimensionError('hybrid_stream_forward', z_q.shape, z_kv.shape)
    if config.stage2_decoder:
        memory = encoder_forward(z_kv, scope.child('encoder'), config.dims, mode)
        return decoder_forward(z_q, memory, scope.child('decoder'), config.dims, mode)
    return cross_stack_forward(z_q, z_kv, scope.child('cross'), config.dims, mode)


def fuse(outputs: 'Sequence[Tensor]', fusion: Fusion, scope: Scope) -> Tensor:
    if not outputs:
        raise ContractError('fuse', 'no stream outputs to fuse')
    if len({out.shape for out in outputs}) != 1:
        raise DimensionError('fuse', *(out.shape for out in outputs))
    if len(outputs) == 1:
        return outputs[0]
    if fusion is Fusion.CONCAT:
        return linear(concat(outputs, axis=-1), scope)
    if fusion is Fusion.LEARNED_AVERAGE:
        weights = softmax_rows(scope['weights'])
        shaped = reshape(weights, (len(outputs),) + (1,) * outputs[0].ndim)
        return sum_(mul(shaped, stack(outputs, axis=0)), axis=0)
    return reduce(add, outputs) * (1.0 / len(outputs))


def project(fused: Tensor, scope: Scope) -> Tensor:
    """Mean-pool the query positions, then map to class logits."""
    return linear(mean(fused, axis=-2), scope)


def classify(fused: Tensor, scope: Scope) -> Tensor:
    return softmax_rows(project(fused, scope))


def logits_3m(
    batch: 'Batch',
    config: ThreeMConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    if config.include_stage1:
        refined = stage_one_forward(batch, config, params, mode)
    else:
        refined = _pooled_embeddings(batch, config, params)

    if config.include_stage2:
        outputs = [
            hybrid_stream_forward(
                refined[stream.query],
                refined[stream.kv],
                Scope(params, f'stage2.{stream.label}'),
                config,
                mode,
            )
            for stream in config.streams
        ]
        fused = fuse(outputs, config.fusion, Scope(params, 'fusion'))
    else:
        fused = fuse(
            [refined[m] for m in config.modalities],
            Fusion.SOFT_AVERAGE,
            Scope(params, 'fusion'),
        )
    return project(fused, Scope(params, 'head'))


def forward_3m(
    batch: 'Batch',
    config: ThreeMConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    return softmax_rows(logits_3m(batch, config, params, mode))


def init_3m(config: ThreeMConfig, rng: np.random.Generator) -> Params:
    store: Params = {}
    init = Initializer(rng, store)
    dims = config.dims
    for modality in config.modalities:
        n_in = config.raw_dims[modality] + config.prior_width
        if config.include_stage1:
            _init_encode_decode(
                init.child('stage1').child(modality.value),
                n_in,
                dims,
                config.l_out,
            )
        else:
            init.child('embed').linear(modality.value, n_in, dims.d_model)
    if config.include_stage2:
        for stream in config.streams:
            unit = init.child('stage2').child(stream.label)
            if config.stage2_decoder:
                init_encoder(unit.child('encoder'), dims)
                init_decoder(unit.child('decoder'), dims)
            else:
                init_cross_stack(unit.child('cross'), dims)
        n_streams = len(config.streams)
        if n_streams > 1 and config.fusion is Fusion.CONCAT:
            init.linear('fusion', n_streams * dims.d_model, dims.d_model)
        elif n_streams > 1 and config.fusion is Fusion.LEARNED_AVERAGE:
            init.param('fusion.weights', np.zeros(n_streams))
    init.linear('head', dims.d_model, config.n_classes)
    return store


def _branch_logits(
    tokens: 'NDArray[np.floating[Any]]',
    prior: 'NDArray[np.integer[Any]] | None',
    scope: Scope,
    config: BaselineConfig,
    mode: 'Mode',
) -> Tensor:
    fused = _encode_decode(tokens, prior, scope, config.dims, config.n_classes, mode)
    return project(fused, scope.child('head'))


def _init_branch(init: Initializer, n_in: int, config: BaselineConfig) -> None:
    _init_encode_decode(init, n_in + config.prior_width, config.dims, config.l_out)
    init.linear('head', config.dims.d_model, config.n_classes)


def early_fusion_tokens(
    batch: 'Batch',
    modalities: 'Sequence[Modality]',
) -> 'NDArray[Any]':
    tokens = [modality_tokens(batch, m) for m in canonical(modalities)]
    return np.concatenate(tokens, axis=-1)


def logits_eft(
    batch: 'Batch',
    config: BaselineConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    return _branch_logits(
        early_fusion_tokens(batch, config.modalities),
        batch.prior if config.use_prior else None,
        Scope(params, f'branch.{format_modalities(config.modalities)}'),
        config,
        mode,
    )


def init_eft(config: BaselineConfig, rng: np.random.Generator) -> Params:
    store: Params = {}
    width = sum(config.raw_dims[m] for m in config.modalities)
    _init_branch(
        Initializer(rng, store, f'branch.{format_modalities(config.modalities)}'),
        width,
        config,
    )
    return store


def logits_lft(
    batch: 'Batch',
    config: BaselineConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    """Per-modality transformers; the result is the log of their mean probability."""
    prior = batch.prior if config.use_prior else None
    branches = [
        _branch_logits(
            modality_tokens(batch, m),
            prior,
            Scope(params, f'branch.{m.value}'),
            config,
            mode,
        )
        for m in config.modalities
    ]
    if len(branches) == 1:
        return branches[0]
    log_probs = stack([log_softmax(branch) for branch in branches], axis=0)
    return logsumexp(log_probs, axis=0) - math.log(len(branches))


def init_lft(config: BaselineConfig, rng: np.random.Generator) -> Params:
    store: Params = {}
    for modality in config.modalities:
        _init_branch(
            Initializer(rng, store, f'branch.{modality.value}'),
            config.raw_dims[modality],
            config,
        )
    return store


def logits_mlp(
    batch: 'Batch',
    config: BaselineConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    parts = [np.mean(modality_tokens(batch, m), axis=1) for m in config.modalities]
    if config.use_prior:
        parts.append(prior_one_hot(batch.prior, config.n_classes))
    scope = Scope(params, 'mlp')
    hidden = Tensor(np.concatenate(parts, axis=-1))
    for name in ('hidden1', 'hidden2'):
        hidden = relu(linear(hidden, scope.child(name)))
        hidden = dropout(hidden, config.dims.dropout, mode)
    return linear(hidden, scope.child('head'))


def init_mlp(config: BaselineConfig, rng: np.random.Generator) -> Params:
    store: Params = {}
    init = Initializer(rng, store, 'mlp')
    width = sum(config.raw_dims[m] for m in config.modalities) + config.prior_width
    init.linear('hidden1', width, config.hidden)
    init.linear('hidden2', config.hidden, config.hidden)
    init.linear('head', config.hidden, config.n_classes)
    return store


def forward_eft(
    batch: 'Batch',
    config: BaselineConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    return softmax_rows(logits_eft(batch, config, params, mode))


def forward_lft(
    batch: 'Batch',
    config: BaselineConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    return softmax_rows(logits_lft(batch, config, params, mode))


def forward_mlp(
    batch: 'Batch',
    config: BaselineConfig,
    params: 'Mapping[str, Tensor]',
    mode: 'Mode' = EVAL,
) -> Tensor:
    return softmax_rows(logits_mlp(batch, config, params, mode))


class TurnTakingModel(Protocol):
    kind: str

    @property
    def modalities(self) -> tuple[Modality, ...]: ...

    @property
    def n_classes(self) -> int: ...

    @property
    def use_prior(self) -> bool: ...

    def init_params(self, rng: np.random.Generator) -> Params: ...

    def logits(
        self,
        batch: 'Batch',
        params: 'Mapping[str, Tensor]',
        mode: 'Mode' = EVAL,
    ) -> Tensor: ...

    def spec(self) -> dict[str, Any]: ...


class ThreeMTransformer:
    kind = '3m'

    def __init__(self, config: ThreeMConfig) -> None:
        self.config = config

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return self.config.modalities

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def use_prior(self) -> bool:
        return self.config.use_prior

    def init_params(self, rng: np.random.Generator) -> Params:
        return init_3m(self.config, rng)

    def logits(
        self,
        batch: 'Batch',
        params: 'Mapping[str, Tensor]',
        mode: 'Mode' = EVAL,
    ) -> Tensor:
        return logits_3m(batch, self.config, params, mode)

    def spec(self) -> dict[str, Any]:
        return {'kind': self.kind, **self.config.as_dict()}


class _Baseline:
    kind = ''

    def __init__(self, config: BaselineConfig) -> None:
        self.config = config

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return self.config.modalities

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def use_prior(self) -> bool:
        return self.config.use_prior

    def spec(self) -> dict[str, Any]:
        return {'kind': self.kind, **self.config.as_dict()}


class EarlyFusionTransformer(_Baseline):
    kind = 'eft'

    def init_params(self, rng: np.random.Generator) -> Params:
        return init_eft(self.config, rng)

    def logits(
        self,
        batch: 'Batch',
        params: 'Mapping[str, Tensor]',
        mode: 'Mode' = EVAL,
    ) -> Tensor:
        return logits_eft(batch, self.config, params, mode)


class LateFusionTransformer(_Baseline):
    kind = 'lft'

    def init_params(self, rng: np.random.Generator) -> Params:
        return init_lft(self.config, rng)

    def logits(
        self,
        batch: 'Batch',
        params: 'Mapping[str, Tensor]',
        mode: 'Mode' = EVAL,
    ) -> Tensor:
        return logits_lft(batch, self.config, params, mode)


class MultiLayerPerceptron(_Baseline):
    kind = 'mlp'

    def init_params(self, rng: np.random.Generator) -> Params:
        return init_mlp(self.config, rng)

    def logits(
        self,
        batch: 'Batch',
        params: 'Mapping[str, Tensor]',
        mode: 'Mode' = EVAL,
    ) -> Tensor:
        return logits_mlp(batch, self.config, params, mode)


def predict_proba(
    model: TurnTakingModel,
    batch: 'Batch',
    params: 'Mapping[str, Tensor]',
) -> 'NDArray[np.floating[Any]]':
    return softmax_rows(model.logits(batch, params, EVAL)).numpy()
