"""Central finite-difference verification of the autodiff rules."""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from turnformer.blocks import (
    EVAL,
    Initializer,
    ModelDims,
    Scope,
    cross_stack_forward,
    decoder_forward,
    encoder_forward,
    init_attention,
    init_cross_stack,
    init_decoder,
    init_encoder,
    layer_norm,
    linear,
    multi_head_attention,
    scaled_dot_attention,
)
from turnformer.dataset import Batch
from turnformer.modality import Modality
from turnformer.models import init_3m, logits_3m
from turnformer.presets import VARIANTS
from turnformer.tensor import (
    Tensor,
    add,
    backward,
    concat,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    normalize,
    precision,
    recording,
    register,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    softmax_rows,
    stack,
    sub,
    sum_,
    transpose,
)

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

EPSILON = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
FLOOR = 1e-4

LossFn = Callable[['Mapping[str, Tensor]'], Tensor]
Inputs = dict[str, 'NDArray[np.float64]']


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    max_rel_error: float
    coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def check_gradients(
    suite: str,
    name: str,
    loss_fn: LossFn,
    inputs: 'Mapping[str, NDArray[np.float64]]',
    rng: np.random.Generator,
    *,
    max_coords: int = 16,
) -> CheckResult:
    """Compare ``backward`` against central differences on sampled coordinates.

    ``loss_fn`` must be a deterministic function of its inputs; it is called
    once on the tape and twice per checked coordinate off it.
    """
    with precision('float64'):
        params = {
            key: Tensor(value, requires_grad=True) for key, value in inputs.items()
        }
        with recording():
            grads = backward(loss_fn(params))
        worst = 0.0
        checked = 0
        for key, param in params.items():
            analytic = grads[param].data if param in grads else np.zeros(param.shape)
            count = min(max_coords, param.size)
            picks = rng.choice(param.size, size=count, replace=False)
            for pick in picks:
                index = np.unravel_index(pick, param.shape)
                shifted = {}
                for sign in (1.0, -1.0):
                    values = np.array(param.data)
                    values[index] += sign * EPSILON
                    shifted[sign] = loss_fn({**params, key: Tensor(values)}).item()
                numeric = (shifted[1.0] - shifted[-1.0]) / (2 * EPSILON)
                worst = max(worst, relative_error(float(analytic[index]), numeric))
                checked += 1
    logger.debug('%s/%s: max relative error %.3g over %d', suite, name, worst, checked)
    return CheckResult(suite, name, worst, checked)


def projected(out: Tensor) -> Tensor:
    """Reduce ``out`` to a scalar with fixed, shape-determined weights."""
    weights = np.cos(0.7 * np.arange(out.size) + 0.3).reshape(out.shape)
    return sum_(mul(out, Tensor(weights)))


def away_from_zero(
    values: 'NDArray[np.float64]',
    margin: float = 0.1,
) -> 'NDArray[np.float64]':
    return np.where(values >= 0, values + margin, values - margin)


Suite = Callable[[np.random.Generator], list[CheckResult]]
suites: dict[str, Suite] = {}


@register(suites, 'numerics')
def numerics_suite(rng: np.random.Generator) -> list[CheckResult]:
    def normal(*shape: int) -> 'NDArray[np.float64]':
        return rng.standard_normal(shape)

    targets = np.array([0, 3, 1, 2])
    cases: dict[str, tuple[LossFn, Inputs]] = {
        'add': (
            lambda p: projected(add(p['a'], p['b'])),
            {'a': normal(2, 3), 'b': normal(3)},
        ),
        'sub': (
            lambda p: projected(sub(p['a'], p['b'])),
            {'a': normal(2, 3), 'b': normal(2, 1)},
        ),
        'mul': (
            lambda p: projected(mul(p['a'], p['b'])),
            {'a': normal(2, 3), 'b': normal(3)},
        ),
        'scale': (lambda p: projected(scale(p['a'], -2.5)), {'a': normal(3, 2)}),
        'matmul': (
            lambda p: projected(matmul(p['a'], p['b'])),
            {'a': normal(2, 3, 4), 'b': normal(4, 5)},
        ),
        'transpose': (
            lambda p: projected(transpose(p['a'], (1, 2, 0))),
            {'a': normal(2, 3, 4)},
        ),
        'reshape': (lambda p: projected(reshape(p['a'], (4, 3))), {'a': normal(2, 6)}),
        'sum': (lambda p: projected(sum_(p['a'], axis=1)), {'a': normal(3, 4)}),
        'mean': (
            lambda p: projected(mean(p['a'], axis=0, keepdims=True)),
            {'a': normal(3, 4)},
        ),
        'relu': (
            lambda p: projected(relu(p['a'])),
            {'a': away_from_zero(normal(4, 5))},
        ),
        'softmax_rows': (
            lambda p: projected(softmax_rows(p['a'])),
            {'a': normal(3, 5)},
        ),
        'log_softmax': (lambda p: projected(log_softmax(p['a'])), {'a': normal(3, 5)}),
        'logsumexp': (
            lambda p: projected(logsumexp(p['a'], axis=0)),
            {'a': normal(3, 4)},
        ),
        'normalize': (lambda p: projected(normalize(p['a'])), {'a': normal(3, 6)}),
        'concat': (
            lambda p: projected(concat([p['a'], p['b']], axis=-1)),
            {'a': normal(2, 3), 'b': normal(2, 2)},
        ),
        'stack': (
            lambda p: projected(stack([p['a'], p['b']], axis=1)),
            {'a': normal(2, 3), 'b': normal(2, 3)},
        ),
        'cross_entropy': (
            lambda p: softmax_cross_entropy(p['a'], targets),
            {'a': normal(4, 4)},
        ),
        'composed': (
            lambda p: projected(log_softmax(matmul(p['a'], p['b']))),
            {'a': normal(2, 3, 5), 'b': normal(5, 4)},
        ),
    }
    return [
        check_gradients('numerics', name, loss_fn, inputs, rng)
        for name, (loss_fn, inputs) in cases.items()
    ]


TINY_DIMS = ModelDims(d_model=8, n_heads=2, d_ff=16, n_layers=1, dropout=0.0)


def _block_params(
    rng: np.random.Generator,
    build: Callable[[Initializer], None],
) -> Inputs:
    store: dict[str, Tensor] = {}
    with precision('float64'):
        build(Initializer(rng, store))
        return {name: np.array(param.data) for name, param in store.items()}


@register(suites, 'blocks')
def blocks_suite(rng: np.random.Generator) -> list[CheckResult]:
    dims = TINY_DIMS
    x = rng.standard_normal((2, 5, dims.d_model))
    memory = rng.standard_normal((2, 3, dims.d_model))
    results = []

    def check(
        name: str,
        build: Callable[[Initializer], None],
        forward: Callable[[Scope, Tensor, Tensor], Tensor],
    ) -> None:
        inputs = _block_params(rng, build)
        inputs['x'] = x
        inputs['memory'] = memory
        results.append(
            check_gradients(
                'blocks',
                name,
                lambda p: projected(forward(Scope(p), p['x'], p['memory'])),
                inputs,
                rng,
            ),
        )

    check(
        'linear',
        lambda init: init.linear('proj', dims.d_model, 3),
        lambda scope, inp, _: linear(inp, scope.child('proj')),
    )
    check(
        'layer_norm',
        lambda init: init.layer_norm('norm', dims.d_model),
        lambda scope, inp, _: layer_norm(inp, scope.child('norm')),
    )
    check(
        'multi_head_attention',
        lambda init: init_attention(init.child('attn'), dims.d_model),
        lambda scope, inp, mem: multi_head_attention(
            inp,
            mem,
            scope.child('attn'),
            dims,
        ),
    )
    check(
        'encoder',
        lambda init: init_encoder(init.child('encoder'), dims),
        lambda scope, inp, _: encoder_forward(inp, scope.child('encoder'), dims, EVAL),
    )
    check(
        'decoder',
        lambda init: init_decoder(init.child('decoder'), dims),
        lambda scope, inp, mem: decoder_forward(
            inp,
            mem,
            scope.child('decoder'),
            dims,
            EVAL,
        ),
    )
    check(
        'cross_stack',
        lambda init: init_cross_stack(init.child('cross'), dims),
        lambda scope, inp, mem: cross_stack_forward(
            inp,
            mem,
            scope.child('cross'),
            dims,
            EVAL,
        ),
    )
    results.append(
        check_gradients(
            'blocks',
            'scaled_dot_attention',
            lambda p: projected(scaled_dot_attention(p['q'], p['k'], p['v'])),
            {
                'q': rng.standard_normal((2, 4, 3)),
                'k': rng.standard_normal((2, 6, 3)),
                'v': rng.standard_normal((2, 6, 5)),
            },
            rng,
        ),
    )
    return results


TINY_RAW_DIMS = {Modality.TEXT: 3, Modality.AUDIO: 2, Modality.VIDEO: 4}


def tiny_batch(
    rng: np.random.Generator,
    batch_size: int = 3,
    length: int = 4,
    n_classes: int = 4,
) -> Batch:
    return Batch(
        features={
            m: rng.standard_normal((batch_size, length, d))
            for m, d in TINY_RAW_DIMS.items()
        },
        prior=rng.integers(0, n_classes, size=batch_size),
        target=rng.integers(0, n_classes, size=batch_size),
    )


MODEL_CHECKS = ('3m:T>V|A>V', '3m:concat:T>V|A>V', '3m:nodec:T>V|A>V', '3m:no-stage1')


@register(suites, 'models')
def models_suite(rng: np.random.Generator) -> list[CheckResult]:
    batch = tiny_batch(rng)
    results = []
    for name in MODEL_CHECKS:
        config = VARIANTS[name].config(
            dims=TINY_DIMS,
            l_out=3,
            use_prior=True,
            raw_dims=TINY_RAW_DIMS,
        )
        with precision('float64'):
            inputs = {key: np.array(p.data) for key, p in init_3m(config, rng).items()}
        results.append(
            check_gradients(
                'models',
                name,
                lambda p, cfg=config: softmax_cross_entropy(
                    logits_3m(batch, cfg, p, EVAL),
                    batch.target,
                ),
                inputs,
                rng,
                max_coords=3,
            ),
        )
    return results


def run_gradcheck(module: str = 'all', seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    chosen = list(suites) if module == 'all' else [module]
    results = []
    for name in chosen:
        results.extend(suites[name](rng))
    for result in results:
        logger.log(
            logging.INFO if result.passed else logging.ERROR,
            '%-8s %-24s max rel error %.2e over %d coords: %s',
            result.suite,
            result.name,
            result.max_rel_error,
            result.coordinates,
            'ok' if result.passed else 'FAILED',
        )
    return results


GRADCHECK_MODULES = ('all', *suites)
