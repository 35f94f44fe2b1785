import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import TYPE_CHECKING, Any

from typing_extensions import Self

from turnformer.blocks import DESK_DIMS, ModelDims
from turnformer.config import ConfigError, checked_fields, write_snapshot
from turnformer.dataset import (
    DEFAULT_FRACTIONS,
    SPLITS,
    ConversationStreams,
    dataset_layout,
    split_dataset,
    window_conversations,
)
from turnformer.modality import format_modalities, parse_modalities
from turnformer.presets import build_model, choose_model, model_entry, model_name
from turnformer.tensor import ContractError, precision
from turnformer.training import TrainConfig, evaluate, train_model

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

    from turnformer.dataset import Sample
    from turnformer.modality import Modality
    from turnformer.models import TurnTakingModel
    from turnformer.presets import Variant
    from turnformer.stream import FilePath

logger = logging.getLogger(__name__)

RESULTS_HEADER = [
    'model',
    'modalities',
    'prior',
    'past_s',
    'future_s',
    'seed',
    'split',
    'top1',
]
STANDARD_PAST = (4, 5, 10, 30)
STANDARD_FUTURE = (1, 3, 5, 10)


@dataclass(frozen=True)
class ResultRow:
    model: str
    modalities: str
    prior: bool
    past_s: int
    future_s: int
    seed: int
    split: str
    top1: float

    def as_csv(self) -> list[str]:
        return [
            self.model,
            self.modalities,
            str(self.prior).lower(),
            str(self.past_s),
            str(self.future_s),
            str(self.seed),
            self.split,
            f'{self.top1:.6f}',
        ]

    @classmethod
    def from_csv(cls, row: 'Mapping[str, str]') -> Self:
        return cls(
            model=row['model'],
            modalities=row['modalities'],
            prior=row['prior'].strip().lower() in {'true', '1'},
            past_s=int(row['past_s']),
            future_s=int(row['future_s']),
            seed=int(row['seed']),
            split=row['split'],
            top1=float(row['top1']),
        )


@dataclass(frozen=True)
class GridRow:
    model: 'str | Variant'
    modalities: 'tuple[Modality, ...] | None' = None


@dataclass(frozen=True)
class GridSpec:
    rows: tuple[GridRow, ...]
    past: tuple[int, ...] = STANDARD_PAST
    future: tuple[int, ...] = STANDARD_FUTURE
    priors: tuple[bool, ...] = (True,)
    seeds: tuple[int, ...] = (0,)
    splits: tuple[str, ...] = ('test',)
    dims: ModelDims = DESK_DIMS
    l_out: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    split_seed: int = 0
    per_second: bool = False
    style: str = 'table2'
    data: str | None = None

    def __post_init__(self) -> None:
        if not self.rows:
            raise ConfigError('rows', 'grid has no model rows')
        for key in ('past', 'future', 'priors', 'seeds', 'splits'):
            if not getattr(self, key):
                raise ConfigError(key, 'must list at least one value')
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise ConfigError('splits', f'unknown splits {sorted(unknown)}')
        if self.style not in {'table1', 'table2'}:
            raise ConfigError('style', f'expected table1 or table2, got {self.style!r}')

    @classmethod
    def from_mapping(cls, values: 'Mapping[str, Any]') -> Self:
        """Build a grid from its JSON form.

        A row is a preset name, or an object whose ``model`` is a preset name or
        a written-out 3M variant, with optional ``modalities`` for baselines.
        """
        kwargs = checked_fields(
            'grid',
            cls,
            {k: v for k, v in values.items() if k != 'name'},
        )
        rows: list[GridRow] = []
        for entry in kwargs.pop('rows', []):
            if not isinstance(entry, dict):
                entry = {'model': entry}
            if 'model' not in entry:
                raise ConfigError('rows', f'row {entry} has no model')
            modalities = entry.get('modalities')
            rows.append(
                GridRow(
                    model=choose_model(entry['model']),
                    modalities=parse_modalities(modalities) if modalities else None,
                ),
            )
        kwargs['rows'] = tuple(rows)
        for key in ('past', 'future', 'priors', 'seeds', 'splits', 'fractions'):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if 'dims' in kwargs:
            kwargs['dims'] = ModelDims.from_mapping(kwargs['dims'])
        if 'train' in kwargs:
            kwargs['train'] = TrainConfig.from_mapping(kwargs['train'])
        return cls(**kwargs)

    def as_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values['rows'] = [
            {
                'model': model_entry(row.model),
                'modalities': (
                    format_modalities(row.modalities) if row.modalities else None
                ),
            }
            for row in self.rows
        ]
        return values


@dataclass(frozen=True)
class GridCell:
    row: GridRow
    prior: bool
    past_s: int
    future_s: int
    seed: int


def cells(spec: GridSpec) -> 'Iterator[GridCell]':
    for row, prior, past, future, seed in itertools.product(
        spec.rows,
        spec.priors,
        spec.past,
        spec.future,
        spec.seeds,
    ):
        yield GridCell(row, prior, past, future, seed)


def _model_for(
    spec: GridSpec,
    row: GridRow,
    prior: bool,  # noqa: FBT001
    convs: 'Sequence[ConversationStreams]',
) -> 'TurnTakingModel':
    layout = dataset_layout(convs)
    model = build_model(
        row.model,
        modalities=row.modalities,
        raw_dims=layout.modality_dims,
        dims=replace(spec.dims, dropout=spec.train.dropout),
        n_classes=layout.n_classes,
        use_prior=prior,
        l_out=spec.l_out,
    )
    missing = set(model.modalities) - set(layout.modality_dims)
    if missing:
        raise ConfigError(
            'modalities',
            f'{model_name(row.model)} needs {format_modalities(missing)}, '
            f'dataset has {format_modalities(layout.modality_dims)}',
        )
    return model


def validate_grid(
    spec: GridSpec,
    splits: 'Mapping[str, Sequence[ConversationStreams]]',
) -> None:
    """Fail before any training if a cell cannot be built or has no data."""
    convs = [conv for name in SPLITS for conv in splits[name]]
    for row in spec.rows:
        for prior in spec.priors:
            _model_for(spec, row, prior, convs)
    for past, future in itertools.product(spec.past, spec.future):
        for name in ('train', *spec.splits):
            if not window_conversations(splits[name], past, future):
                raise ConfigError(
                    'past/future',
                    f'{name} split has no samples for past {past}s, future {future}s',
                )


_worker_splits: 'dict[str, list[ConversationStreams]]' = {}


def _init_worker(splits: 'dict[str, list[ConversationStreams]]') -> None:
    _worker_splits.clear()
    _worker_splits.update(splits)


def run_cell(spec: GridSpec, cell: GridCell) -> list[ResultRow]:
    splits = _worker_splits
    convs = [conv for name in SPLITS for conv in splits[name]]
    model = _model_for(spec, cell.row, cell.prior, convs)
    samples: dict[str, list[Sample]] = {
        name: window_conversations(
            splits[name],
            cell.past_s,
            cell.future_s,
            per_second=spec.per_second,
        )
        for name in SPLITS
    }
    result = train_model(model, samples, replace(spec.train, seed=cell.seed))
    modalities = format_modalities(model.modalities)
    rows: list[ResultRow] = []
    for split in spec.splits:
        with precision(spec.train.precision):
            top1 = evaluate(model, result.params, samples[split], spec.train.batch_size)
        rows.append(
            ResultRow(
                model=model_name(cell.row.model),
                modalities=modalities,
                prior=cell.prior,
                past_s=cell.past_s,
                future_s=cell.future_s,
                seed=cell.seed,
                split=split,
                top1=top1,
            ),
        )
    logger.info(
        'cell %s %s prior=%s past=%d future=%d seed=%d: %s',
        model_name(cell.row.model),
        modalities,
        cell.prior,
        cell.past_s,
        cell.future_s,
        cell.seed,
        ', '.join(f'{r.split} {r.top1:.4f}' for r in rows),
    )
    return rows


def _run_cell_packed(args: tuple[GridSpec, GridCell]) -> list[ResultRow]:
    return run_cell(*args)


def run_grid(
    spec: GridSpec,
    convs: 'Sequence[ConversationStreams]',
    out_path: 'FilePath',
    *,
    jobs: int = 1,
) -> list[ResultRow]:
    """Train and score every cell, appending to ``out_path`` as cells finish.

    Results are written in cell order whatever ``jobs`` is, so a parallel run
    produces the same file as a serial one.
    """
    if jobs < 1:
        raise ConfigError('jobs', f'must be at least 1, got {jobs}')
    if not convs:
        raise ContractError('run_grid', 'dataset has no conversations')
    splits = split_dataset(convs, spec.fractions, spec.split_seed)
    validate_grid(spec, splits)

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_snapshot(spec.as_dict(), out.with_name(f'{out.stem}.config.json'))
    tasks = [(spec, cell) for cell in cells(spec)]
    logger.info('running %d cells with %d job(s)', len(tasks), jobs)

    results: list[ResultRow] = []
    with out.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(RESULTS_HEADER)
        handle.flush()
        if jobs == 1:
            _init_worker(splits)
            finished: Iterator[list[ResultRow]] = map(_run_cell_packed, tasks)
            for rows in finished:
                writer.writerows(row.as_csv() for row in rows)
                handle.flush()
                results.extend(rows)
        else:
            with Pool(jobs, initializer=_init_worker, initargs=(splits,)) as pool:
                for rows in pool.imap(_run_cell_packed, tasks):
                    writer.writerows(row.as_csv() for row in rows)
                    handle.flush()
                    results.extend(rows)
    return results


def read_results(path: 'FilePath') -> list[ResultRow]:
    path = Path(path)
    with path.open(newline='', encoding='utf-8') as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != RESULTS_HEADER:
            raise ConfigError(
                str(path),
                f'expected header {",".join(RESULTS_HEADER)}, got {reader.fieldnames}',
            )
        rows: list[ResultRow] = []
        for line, row in enumerate(reader, start=2):
            try:
                rows.append(ResultRow.from_csv(row))
            except (ValueError, TypeError, AttributeError) as exc:
                raise ConfigError(f'{path}:{line}', f'malformed row ({exc})') from exc
        return rows
