import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from typing_extensions import Self

from turnformer.config import ConfigError, checked_fields
from turnformer.tensor import (
    DimensionError,
    Tensor,
    matmul,
    normalize,
    relu,
    reshape,
    softmax_rows,
    swap_last,
    transpose,
)

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    n_layers: int = 6
    dropout: float = 0.1

    def __post_init__(self) -> None:
        for key in ('d_model', 'n_heads', 'd_ff', 'n_layers'):
            if getattr(self, key) < 1:
                raise ConfigError(key, f'must be at least 1, got {getattr(self, key)}')
        if self.d_model % self.n_heads:
            raise ConfigError(
                'n_heads',
                f'{self.n_heads} heads do not divide d_model={self.d_model}',
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError('dropout', f'must lie in [0, 1), got {self.dropout}')

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_mapping(cls, values: 'Mapping[str, Any]') -> Self:
        return cls(**checked_fields('dims', cls, values))

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


FULL_DIMS = ModelDims()
DESK_DIMS = ModelDims(d_model=32, n_heads=4, d_ff=64, n_layers=2, dropout=0.1)


@dataclass(frozen=True)
class Mode:
    training: bool = False
    rng: np.random.Generator | None = None


EVAL = Mode()


@dataclass(frozen=True)
class Scope:
    params: 'Mapping[str, Tensor]'
    prefix: str = ''

    def key(self, name: str) -> str:
        return f'{self.prefix}.{name}' if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.key(name)]

    def child(self, name: str | int) -> 'Scope':
        return Scope(self.params, self.key(str(name)))


class Initializer:
    def __init__(
        self,
        rng: np.random.Generator,
        store: Params,
        prefix: str = '',
    ) -> None:
        self.rng = rng
        self.store = store
        self.prefix = prefix

    def key(self, name: str) -> str:
        return f'{self.prefix}.{name}' if self.prefix else name

    def child(self, name: str | int) -> 'Initializer':
        return Initializer(self.rng, self.store, self.key(str(name)))

    def param(self, name: str, value: 'NDArray[np.floating[Any]]') -> None:
        self.store[self.key(name)] = Tensor(value, requires_grad=True)

    def uniform(
        self,
        name: str,
        shape: tuple[int, ...],
        fan_in: int,
        fan_out: int,
    ) -> None:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.param(name, self.rng.uniform(-limit, limit, size=shape))

    def linear(self, name: str, n_in: int, n_out: int) -> None:
        layer = self.child(name)
        layer.uniform('weight', (n_in, n_out), n_in, n_out)
        layer.param('bias', np.zeros(n_out))

    def layer_norm(self, name: str, width: int) -> None:
        layer = self.child(name)
        layer.param('gain', np.ones(width))
        layer.param('bias', np.zeros(width))


def count_parameters(params: 'Mapping[str, Tensor]') -> int:
    return sum(param.size for param in params.values())


def linear(x: Tensor, scope: Scope) -> Tensor:
    weight = scope['weight']
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f'linear {scope.prefix}', x.shape, weight.shape)
    return matmul(x, weight) + scope['bias']


def layer_norm(x: Tensor, scope: Scope) -> Tensor:
    return normalize(x) * scope['gain'] + scope['bias']


def dropout(x: Tensor, rate: float, mode: Mode) -> Tensor:
    if not mode.training or rate == 0.0 or mode.rng is None:
        return x
    keep = (mode.rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def positional_encoding(length: int, d_model: int) -> 'NDArray[np.float64]':
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if length < 1 or d_model < 1:
        raise DimensionError('positional_encoding', (length, d_model))
    positions = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, even / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError('scaled_dot_attention', q.shape, k.shape, detail='d_k')
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError('scaled_dot_attention', k.shape, v.shape, detail='L_k')
    scores = matmul(q, swap_last(k)) / math.sqrt(q.shape[-1])
    return matmul(softmax_rows(scores), v)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, width = x.shape
    heads = reshape(x, (*lead, length, n_heads, width // n_heads))
    axes = list(range(heads.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(heads, axes)


def merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    merged = transpose(x, axes)
    *lead, length, n_heads, d_k = merged.shape
    return reshape(merged, (*lead, length, n_heads * d_k))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    scope: Scope,
    dims: ModelDims,
) -> Tensor:
    if x_q.shape[-1] != dims.d_model or x_kv.shape[-1] != dims.d_model:
        raise DimensionError(
            'multi_head_attention',
            x_q.shape,
            x_kv.shape,
            detail=f'd_model={dims.d_model}',
        )
    q = split_heads(linear(x_q, scope.child('q')), dims.n_heads)
    k = split_heads(linear(x_kv, scope.child('k')), dims.n_heads)
    v = split_heads(linear(x_kv, scope.child('v')), dims.n_heads)
    return linear(merge_heads(scaled_dot_attention(q, k, v)), scope.child('o'))


def feed_forward(x: Tensor, scope: Scope, dims: ModelDims, mode: Mode) -> Tensor:
    hidden = dropout(relu(linear(x, scope.child('ff1'))), dims.dropout, mode)
    return linear(hidden, scope.child('ff2'))


def _residual(
    x: Tensor,
    update: Tensor,
    norm: Scope,
    dims: ModelDims,
    mode: Mode,
) -> Tensor:
    return layer_norm(x + dropout(update, dims.dropout, mode), norm)


def encoder_layer(x: Tensor, scope: Scope, dims: ModelDims, mode: Mode) -> Tensor:
    x = _residual(
        x,
        multi_head_attention(x, x, scope.child('self_attn'), dims),
        scope.child('norm1'),
        dims,
        mode,
    )
    return _residual(
        x,
        feed_forward(x, scope.child('ffn'), dims, mode),
        scope.child('norm2'),
        dims,
        mode,
    )


def decoder_layer(
    x: Tensor,
    memory: Tensor,
    scope: Scope,
    dims: ModelDims,
    mode: Mode,
) -> Tensor:
    # self-attention is unmasked: queries form a fixed-length set, not a stream
    x = _residual(
        x,
        multi_head_attention(x, x, scope.child('self_attn'), dims),
        scope.child('norm1'),
        dims,
        mode,
    )
    x = _residual(
        x,
        multi_head_attention(x, memory, scope.child('cross_attn'), dims),
        scope.child('norm2'),
        dims,
        mode,
    )
    return _residual(
        x,
        feed_forward(x, scope.child('ffn'), dims, mode),
        scope.child('norm3'),
        dims,
        mode,
    )


def cross_layer(
    x: Tensor,
    memory: Tensor,
    scope: Scope,
    dims: ModelDims,
    mode: Mode,
) -> Tensor:
    x = _residual(
        x,
        multi_head_attention(x, memory, scope.child('cross_attn'), dims),
        scope.child('norm1'),
        dims,
        mode,
    )
    return _residual(
        x,
        feed_forward(x, scope.child('ffn'), dims, mode),
        scope.child('norm2'),
        dims,
        mode,
    )


def _check_width(op: str, x: Tensor, dims: ModelDims) -> None:
    if x.shape[-1] != dims.d_model:
        raise DimensionError(op, x.shape, detail=f'd_model={dims.d_model}')


def encoder_forward(seq: Tensor, scope: Scope, dims: ModelDims, mode: Mode) -> Tensor:
    _check_width('encoder_forward', seq, dims)
    for idx in range(dims.n_layers):
        seq = encoder_layer(seq, scope.child(idx), dims, mode)
    return seq


def decoder_forward(
    tgt: Tensor,
    memory: Tensor,
    scope: Scope,
    dims: ModelDims,
    mode: Mode,
) -> Tensor:
    _check_width('decoder_forward', tgt, dims)
    _check_width('decoder_forward', memory, dims)
    for idx in range(dims.n_layers):
        tgt = decoder_layer(tgt, memory, scope.child(idx), dims, mode)
    return tgt


def cross_stack_forward(
    queries: Tensor,
    memory: Tensor,
    scope: Scope,
    dims: ModelDims,
    mode: Mode,
) -> Tensor:
    _check_width('cross_stack_forward', queries, dims)
    _check_width('cross_stack_forward', memory, dims)
    for idx in range(dims.n_layers):
        queries = cross_layer(queries, memory, scope.child(idx), dims, mode)
    return queries


def init_attention(init: Initializer, d_model: int) -> None:
    for name in ('q', 'k', 'v', 'o'):
        init.linear(name, d_model, d_model)


def init_feed_forward(init: Initializer, dims: ModelDims) -> None:
    init.linear('ff1', dims.d_model, dims.d_ff)
    init.linear('ff2', dims.d_ff, dims.d_model)


def init_encoder_layer(init: Initializer, dims: ModelDims) -> None:
    init_attention(init.child('self_attn'), dims.d_model)
    init_feed_forward(init.child('ffn'), dims)
    init.layer_norm('norm1', dims.d_model)
    init.layer_norm('norm2', dims.d_model)


def init_decoder_layer(init: Initializer, dims: ModelDims) -> None:
    init_attention(init.child('self_attn'), dims.d_model)
    init_attention(init.child('cross_attn'), dims.d_model)
    init_feed_forward(init.child('ffn'), dims)
    for name in ('norm1', 'norm2', 'norm3'):
        init.layer_norm(name, dims.d_model)


def init_cross_layer(init: Initializer, dims: ModelDims) -> None:
    init_attention(init.child('cross_attn'), dims.d_model)
    init_feed_forward(init.child('ffn'), dims)
    init.layer_norm('norm1', dims.d_model)
    init.layer_norm('norm2', dims.d_model)


def init_encoder(init: Initializer, dims: ModelDims) -> None:
    for idx in range(dims.n_layers):
        init_encoder_layer(init.child(idx), dims)


def init_decoder(init: Initializer, dims: ModelDims) -> None:
    for idx in range(dims.n_layers):
        init_decoder_layer(init.child(idx), dims)


def init_cross_stack(init: Initializer, dims: ModelDims) -> None:
    for idx in range(dims.n_layers):
        init_cross_layer(init.child(idx), dims)
