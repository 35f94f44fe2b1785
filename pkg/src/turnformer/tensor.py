"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op computes its value eagerly with numpy and, while a
tape is recording, appends a node holding the values its backward rule needs.
``backward`` walks the tape in reverse creation order, which is a valid
topological order because a node can only reference earlier nodes.
"""

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, TypeVar

import numpy as np

from turnformer.config import ConfigError

if TYPE_CHECKING:
    from collections.abc import MutableMapping

    from numpy.typing import ArrayLike, NDArray

    Array = NDArray[np.floating[Any]]

PRECISIONS: dict[str, type[np.floating[Any]]] = {
    'float32': np.float32,
    'float64': np.float64,
}

_dtype_stack: list[type[np.floating[Any]]] = [np.float32]


def dtype_for(name: str) -> type[np.floating[Any]]:
    try:
        return PRECISIONS[name]
    except KeyError:
        raise ConfigError(
            'precision',
            f'{name!r} is not one of {", ".join(PRECISIONS)}',
        ) from None


def get_dtype() -> type[np.floating[Any]]:
    return _dtype_stack[-1]


@contextmanager
def precision(name: str) -> Iterator[None]:
    _dtype_stack.append(dtype_for(name))
    try:
        yield
    finally:
        _dtype_stack.pop()


class DimensionError(ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = '') -> None:
        joined = ' and '.join(str(tuple(shape)) for shape in shapes)
        super().__init__(
            f'{op}: incompatible shapes {joined}' + (f' ({detail})' if detail else ''),
        )
        self.op = op
        self.shapes = shapes


class ContractError(ValueError):
    def __init__(self, op: str, message: str) -> None:
        super().__init__(f'{op}: {message}')
        self.op = op


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[int | None, ...] = ()
    saved: tuple[Any, ...] = ()
    leaf: 'Tensor | None' = None


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._leaf_handles: dict[int, int] = {}

    def handle(self, tensor: 'Tensor') -> int | None:
        if tensor._tape is self:
            return tensor.tape_id
        if not tensor.requires_grad:
            return None
        key = id(tensor)
        if key not in self._leaf_handles:
            self._leaf_handles[key] = self.append(Node('leaf', leaf=tensor))
        return self._leaf_handles[key]

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes.clear()
        self._leaf_handles.clear()
        self.consumed = True


_active: list[Tape] = []


def active_tape() -> Tape | None:
    if _active and not _active[-1].consumed:
        return _active[-1]
    return None


@contextmanager
def recording() -> Iterator[Tape]:
    if _active:
        raise ContractError('recording', 'a tape is already active for this step')
    tape = Tape()
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()
        tape.clear()


class Tensor:
    __slots__ = ('data', 'requires_grad', 'tape_id', '_tape')
    __array_priority__ = 100

    def __init__(self, data: 'ArrayLike', *, requires_grad: bool = False) -> None:
        array = np.array(data, dtype=get_dtype())
        array.flags.writeable = False
        self.data: Array = array
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: 'ArrayLike') -> 'Tensor':
        out = cls.__new__(cls)
        array = np.asarray(data, dtype=get_dtype())
        if array.flags.writeable:
            array.flags.writeable = False
        out.data = array
        out.requires_grad = False
        out.tape_id = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> 'Tensor':  # noqa: N802
        return swap_last(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> 'Array':
        return self.data

    def __repr__(self) -> str:
        grad = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}{grad})'

    def __add__(self, other: 'Tensor | ArrayLike') -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: 'ArrayLike') -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: 'Tensor | ArrayLike') -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: 'ArrayLike') -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: 'Tensor | ArrayLike') -> 'Tensor':
        if isinstance(other, int | float):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: 'ArrayLike') -> 'Tensor':
        return self.__mul__(other)

    def __truediv__(self, other: float) -> 'Tensor':
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)


def as_tensor(value: 'Tensor | ArrayLike') -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value: 'ArrayLike') -> Tensor:
    return Tensor(value, requires_grad=True)


Registered = TypeVar('Registered')
BackwardRule = Callable[..., tuple['Array | None', ...]]
backward_rules: dict[str, BackwardRule] = {}


def register(
    mapping: 'MutableMapping[str, Registered]',
    kind: str,
) -> Callable[[Registered], Registered]:
    def wrapper(entry: Registered) -> Registered:
        mapping[kind] = entry
        return entry

    return wrapper


def _emit(
    kind: str,
    data: 'ArrayLike',
    inputs: Sequence[Tensor],
    saved: tuple[Any, ...] = (),
) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is None:
        return out
    handles = tuple(tape.handle(tensor) for tensor in inputs)
    if any(handle is not None for handle in handles):
        out.requires_grad = True
        out._tape = tape
        out.tape_id = tape.append(Node(kind, handles, saved))
    return out


def unbroadcast(grad: 'Array', shape: tuple[int, ...]) -> 'Array':
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def add(a: 'Tensor | ArrayLike', b: 'Tensor | ArrayLike') -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast('add', a, b)
    return _emit('add', a.data + b.data, (a, b), (a.shape, b.shape))


@register(backward_rules, 'add')
def _add_backward(
    grad: 'Array',
    shape_a: tuple[int, ...],
    shape_b: tuple[int, ...],
) -> tuple['Array', 'Array']:
    return unbroadcast(grad, shape_a), unbroadcast(grad, shape_b)


def sub(a: 'Tensor | ArrayLike', b: 'Tensor | ArrayLike') -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast('sub', a, b)
    return _emit('sub', a.data - b.data, (a, b), (a.shape, b.shape))


@register(backward_rules, 'sub')
def _sub_backward(
    grad: 'Array',
    shape_a: tuple[int, ...],
    shape_b: tuple[int, ...],
) -> tuple['Array', 'Array']:
    return unbroadcast(grad, shape_a), -unbroadcast(grad, shape_b)


def mul(a: 'Tensor | ArrayLike', b: 'Tensor | ArrayLike') -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast('mul', a, b)
    return _emit('mul', a.data * b.data, (a, b), (a.data, b.data))


@register(backward_rules, 'mul')
def _mul_backward(
    grad: 'Array',
    a: 'Array',
    b: 'Array',
) -> tuple['Array', 'Array']:
    return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit('scale', a.data * factor, (a,), (factor,))


@register(backward_rules, 'scale')
def _scale_backward(grad: 'Array', factor: float) -> tuple['Array']:
    return (grad * factor,)


def matmul(a: 'Tensor | ArrayLike', b: 'Tensor | ArrayLike') -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:  # noqa: PLR2004
        raise DimensionError('matmul', a.shape, b.shape, detail='inner extents differ')
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            'matmul',
            a.shape,
            b.shape,
            detail='batch extents',
        ) from None
    return _emit('matmul', np.matmul(a.data, b.data), (a, b), (a.data, b.data))


@register(backward_rules, 'matmul')
def _matmul_backward(
    grad: 'Array',
    a: 'Array',
    b: 'Array',
) -> tuple['Array', 'Array']:
    grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
    grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
    return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError('transpose', a.shape, detail=f'bad axes {axes}')
    return _emit('transpose', np.transpose(a.data, axes), (a,), (axes,))


@register(backward_rules, 'transpose')
def _transpose_backward(grad: 'Array', axes: tuple[int, ...]) -> tuple['Array']:
    return (np.transpose(grad, np.argsort(axes)),)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.reshape(a.data, shape)
    except ValueError:
        raise DimensionError('reshape', a.shape, shape) from None
    return _emit('reshape', data, (a,), (a.shape,))


@register(backward_rules, 'reshape')
def _reshape_backward(grad: 'Array', shape: tuple[int, ...]) -> tuple['Array']:
    return (np.reshape(grad, shape),)


def _expand(
    grad: 'Array',
    shape: tuple[int, ...],
    axis: int | None,
    keepdims: bool,  # noqa: FBT001
) -> 'Array':
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def sum_(a: Tensor, axis: int | None = None, *, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _emit('sum', data, (a,), (a.shape, axis, keepdims))


@register(backward_rules, 'sum')
def _sum_backward(
    grad: 'Array',
    shape: tuple[int, ...],
    axis: int | None,
    keepdims: bool,  # noqa: FBT001
) -> tuple['Array']:
    return (_expand(grad, shape, axis, keepdims),)


def mean(a: Tensor, axis: int | None = None, *, keepdims: bool = False) -> Tensor:
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]
    return _emit('mean', data, (a,), (a.shape, axis, keepdims, count))


@register(backward_rules, 'mean')
def _mean_backward(
    grad: 'Array',
    shape: tuple[int, ...],
    axis: int | None,
    keepdims: bool,  # noqa: FBT001
    count: int,
) -> tuple['Array']:
    return (_expand(grad, shape, axis, keepdims) / count,)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit('relu', np.where(mask, a.data, 0), (a,), (mask,))


@register(backward_rules, 'relu')
def _relu_backward(grad: 'Array', mask: 'NDArray[np.bool_]') -> tuple['Array']:
    return (grad * mask,)


def _check_rows(op: str, a: Tensor) -> None:
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(op, a.shape, detail='empty row extent')


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    _check_rows('softmax_rows', a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / np.sum(exps, axis=-1, keepdims=True)
    return _emit('softmax', probs, (a,), (probs,))


@register(backward_rules, 'softmax')
def _softmax_backward(grad: 'Array', probs: 'Array') -> tuple['Array']:
    return (probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True)),)


def log_softmax(a: Tensor) -> Tensor:
    _check_rows('log_softmax', a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return _emit('log_softmax', logp, (a,), (logp,))


@register(backward_rules, 'log_softmax')
def _log_softmax_backward(grad: 'Array', logp: 'Array') -> tuple['Array']:
    return (grad - np.exp(logp) * np.sum(grad, axis=-1, keepdims=True),)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    peak = np.max(a.data, axis=axis, keepdims=True)
    kept = peak + np.log(np.sum(np.exp(a.data - peak), axis=axis, keepdims=True))
    return _emit(
        'logsumexp',
        np.squeeze(kept, axis=axis),
        (a,),
        (a.data, kept, axis),
    )


@register(backward_rules, 'logsumexp')
def _logsumexp_backward(
    grad: 'Array',
    values: 'Array',
    kept: 'Array',
    axis: int,
) -> tuple['Array']:
    return (np.expand_dims(grad, axis) * np.exp(values - kept),)


def normalize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance rows along the last axis (layer norm without affine)."""
    _check_rows('normalize', a)
    centered = a.data - np.mean(a.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    return _emit('normalize', normed, (a,), (normed, inv_std))


@register(backward_rules, 'normalize')
def _normalize_backward(
    grad: 'Array',
    normed: 'Array',
    inv_std: 'Array',
) -> tuple['Array']:
    centered_grad = grad - np.mean(grad, axis=-1, keepdims=True)
    projection = normed * np.mean(grad * normed, axis=-1, keepdims=True)
    return (inv_std * (centered_grad - projection),)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError('concat', 'nothing to concatenate')
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError('concat', *(t.shape for t in tensors)) from None
    sizes = tuple(t.shape[axis] for t in tensors)
    return _emit('concat', data, tensors, (sizes, axis))


@register(backward_rules, 'concat')
def _concat_backward(
    grad: 'Array',
    sizes: tuple[int, ...],
    axis: int,
) -> tuple['Array', ...]:
    return tuple(np.split(grad, np.cumsum(sizes)[:-1], axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError('stack', 'nothing to stack')
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError('stack', *(t.shape for t in tensors))
    data = np.stack([t.data for t in tensors], axis=axis)
    return _emit('stack', data, tensors, (axis, len(tensors)))


@register(backward_rules, 'stack')
def _stack_backward(grad: 'Array', axis: int, count: int) -> tuple['Array', ...]:
    return tuple(np.take(grad, idx, axis=axis) for idx in range(count))


def softmax_cross_entropy(
    logits: Tensor,
    targets: 'NDArray[np.integer[Any]]',
) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the rows of ``logits``."""
    if logits.ndim != 2 or logits.shape[0] != len(targets):  # noqa: PLR2004
        raise DimensionError('cross_entropy', logits.shape, (len(targets),))
    _check_rows('cross_entropy', logits)
    shifted = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=-1))
    rows = np.arange(len(targets))
    losses = log_norm - shifted[rows, targets]
    probs = np.exp(shifted - log_norm[:, None])
    return _emit(
        'cross_entropy',
        np.mean(losses),
        (logits,),
        (probs, np.asarray(targets)),
    )


@register(backward_rules, 'cross_entropy')
def _cross_entropy_backward(
    grad: 'Array',
    probs: 'Array',
    targets: 'NDArray[np.integer[Any]]',
) -> tuple['Array']:
    delta = probs.copy()
    delta[np.arange(len(targets)), targets] -= 1.0
    return (grad * delta / len(targets),)


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` for every differentiable leaf on its tape.

    Leaves that the loss does not depend on get zero gradients. The tape is
    consumed: a second call on the same loss is a contract error.
    """
    if loss.size != 1:
        raise ContractError(
            'backward',
            f'loss must be a scalar, got shape {loss.shape}',
        )
    tape = loss._tape
    if tape is None or loss.tape_id is None or tape.consumed:
        raise ContractError('backward', 'loss is not recorded on an active tape')

    grads: list[Array | None] = [None] * len(tape.nodes)
    grads[loss.tape_id] = np.ones_like(loss.data)
    leaves: dict[Tensor, Array | None] = {}
    for idx in reversed(range(len(tape.nodes))):
        node = tape.nodes[idx]
        grad = grads[idx]
        if node.leaf is not None:
            leaves[node.leaf] = grad
            continue
        if grad is None:
            continue
        input_grads = backward_rules[node.kind](grad, *node.saved)
        for handle, input_grad in zip(node.inputs, input_grads, strict=True):
            if handle is None or input_grad is None:
                continue
            current = grads[handle]
            grads[handle] = input_grad if current is None else current + input_grad
    tape.clear()
    return {
        leaf: Tensor(grad if grad is not None else np.zeros_like(leaf.data))
        for leaf, grad in leaves.items()
    }
