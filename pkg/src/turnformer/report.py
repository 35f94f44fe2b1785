"""Plain-text pivots of grid results in the ablation and comparison layouts."""

from collections import defaultdict
from typing import TYPE_CHECKING

import numpy as np

from turnformer.config import ConfigError
from turnformer.presets import TABLE1_VARIANTS, row_label

if TYPE_CHECKING:
    from collections.abc import Sequence

    from turnformer.grid import ResultRow

MODALITY_ORDER = ('T', 'V', 'A', 'T+V', 'T+A', 'V+A', 'T+V+A')
BASELINE_ORDER = ('EFT/LFT', 'LFT', 'EFT', 'MLP')
SINGLE_BRANCH = ('eft', 'lft')

Column = tuple[int, int]


def _pick_split(rows: 'Sequence[ResultRow]', split: str | None) -> list['ResultRow']:
    if not rows:
        raise ConfigError('results', 'no result rows to report')
    available = sorted({row.split for row in rows})
    chosen = split or ('test' if 'test' in available else available[0])
    if chosen not in available:
        raise ConfigError(
            'split',
            f'{chosen!r} not in results ({", ".join(available)})',
        )
    return [row for row in rows if row.split == chosen]


def _columns(rows: 'Sequence[ResultRow]') -> list[Column]:
    return sorted({(row.past_s, row.future_s) for row in rows})


def _cell_mean(scores: 'Sequence[float]') -> float | None:
    return float(np.mean(scores)) if scores else None


def _render(
    heading: 'Sequence[str]',
    columns: 'Sequence[Column]',
    body: 'Sequence[tuple[Sequence[str], Sequence[float | None]]]',
    extra: 'Sequence[str]' = (),
) -> str:
    padding = [''] * (len(heading) - 1)
    past_line = [*padding, 'Past(s)', *(str(c[0]) for c in columns), *extra]
    future_line = [
        *heading[:-1],
        'Future(s)',
        *(str(c[1]) for c in columns),
        *([''] * len(extra)),
    ]
    lines = [past_line, future_line]
    for labels, values in body:
        shown = ('-' if v is None else f'{100 * v:.2f}' for v in values)
        lines.append([*labels, *shown])
    widths = [max(len(line[i]) for line in lines) for i in range(len(lines[0]))]
    return '\n'.join(
        '  '.join(
            cell.ljust(width) for cell, width in zip(line, widths, strict=True)
        ).rstrip()
        for line in lines
    ) + '\n'


def pivot_table1(rows: 'Sequence[ResultRow]', split: str | None = None) -> str:
    """Rows are ablation variants in table order, with an average column."""
    rows = _pick_split(rows, split)
    columns = _columns(rows)
    cells: dict[str, dict[Column, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        cells[row.model][(row.past_s, row.future_s)].append(row.top1)
    order = [v.name for v in TABLE1_VARIANTS if v.name in cells]
    order += sorted(name for name in cells if name not in order)
    body = []
    for name in order:
        values = [_cell_mean(cells[name][c]) for c in columns]
        present = [v for v in values if v is not None]
        average = float(np.mean(present)) if present else None
        label = row_label(name)
        body.append(([label], [*values, average]))
    return _render(['Model'], columns, body, extra=['Average'])


def _table2_model(model: str, modalities: str) -> str:
    if model in SINGLE_BRANCH and '+' not in modalities:
        return 'EFT/LFT'
    return row_label(model)


def _order_key(key: tuple[bool, str, str]) -> tuple[int, int, int, str]:
    prior, modalities, model = key
    mod_rank = (
        MODALITY_ORDER.index(modalities)
        if modalities in MODALITY_ORDER
        else len(MODALITY_ORDER)
    )
    model_rank = (
        BASELINE_ORDER.index(model) if model in BASELINE_ORDER else len(BASELINE_ORDER)
    )
    return int(prior), mod_rank, model_rank, model


def pivot_table2(rows: 'Sequence[ResultRow]', split: str | None = None) -> str:
    """One row per (prior, modalities, model).

    Single-modality EFT and LFT runs share the EFT/LFT row.
    """
    rows = _pick_split(rows, split)
    columns = _columns(rows)
    cells: dict[tuple[bool, str, str], dict[Column, list[float]]] = defaultdict(
        lambda: defaultdict(list),
    )
    for row in rows:
        key = (row.prior, row.modalities, _table2_model(row.model, row.modalities))
        cells[key][(row.past_s, row.future_s)].append(row.top1)
    body = []
    for key in sorted(cells, key=_order_key):
        prior, modalities, model = key
        values = [_cell_mean(cells[key][c]) for c in columns]
        prior_label = 'True (posterior)' if prior else 'False (likelihood)'
        body.append(([prior_label, modalities, model], values))
    return _render(['Use Prior', 'Modalities', 'Model'], columns, body)


REPORT_STYLES = {'table1': pivot_table1, 'table2': pivot_table2}
