import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, NoReturn

from turnformer.blocks import DESK_DIMS, ModelDims
from turnformer.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from turnformer.config import (
    JOBS_ENV,
    ConfigError,
    check_scalar,
    load_config,
    merge_overrides,
    write_snapshot,
)
from turnformer.dataset import (
    DEFAULT_FRACTIONS,
    SPLITS,
    DatasetFormatError,
    MissingDatasetError,
    dataset_layout,
    load_dataset,
    save_dataset,
    split_dataset,
    window_conversations,
)
from turnformer.egocom import EGOCOM_WINDOWS_PER_SECOND, convert_exported
from turnformer.gradcheck import GRADCHECK_MODULES, run_gradcheck
from turnformer.grid import GridSpec, read_results, run_grid
from turnformer.modality import UnknownModalityError, parse_modalities
from turnformer.presets import build_model, choose_model, model_digest, model_entry
from turnformer.report import REPORT_STYLES
from turnformer.stream import TruncatedStreamError
from turnformer.synth import SynthConfig, synth_generate
from turnformer.tensor import ContractError, DimensionError, precision
from turnformer.training import (
    NonFiniteLossError,
    TrainConfig,
    evaluate,
    majority_baseline,
    train_model,
)

if TYPE_CHECKING:
    from collections.abc import Callable, Mapping, Sequence

    from turnformer.dataset import Sample
    from turnformer.models import TurnTakingModel

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_NUMERIC = 3

VALIDATION_ERRORS = (
    ConfigError,
    DatasetFormatError,
    MissingDatasetError,
    DimensionError,
    ContractError,
    CheckpointError,
    UnknownModalityError,
    TruncatedStreamError,
    FileNotFoundError,
)

RUN_CONFIG_NAME = 'run_config.json'
SYNTH_CONFIG_NAME = 'synth_config.json'
CHECKPOINT_NAME = 'model.ckpt'
METRICS_NAME = 'metrics.csv'
METRICS_HEADER = ['epoch', 'loss', 'train_top1', 'val_top1']

RUN_DEFAULTS: dict[str, Any] = {
    'modalities': None,
    'prior': False,
    'past_s': 4,
    'future_s': 1,
    'dims': DESK_DIMS.as_dict(),
    'l_out': 4,
    'fractions': list(DEFAULT_FRACTIONS),
    'split_seed': 0,
    'per_second': False,
    'train': TrainConfig().as_dict(),
}


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f'{self.format_usage()}{self.prog}: error: {message}')


@dataclass
class CLIParams:
    command: str
    verbose: bool = False
    config: Path | None = None
    out: Path | None = None
    data: Path | None = None
    model: str | None = None
    modalities: str | None = None
    past: int | None = None
    future: int | None = None
    prior: bool | None = None
    seed: int | None = None
    epochs: int | None = None
    lr: float | None = None
    batch_size: int | None = None
    precision: str | None = None
    run: Path | None = None
    split: str | None = None
    spec: Path | None = None
    jobs: int | None = None
    module: str = 'all'
    input: Path | None = None
    style: str | None = None
    tables: Path | None = None
    windows_per_second: int = EGOCOM_WINDOWS_PER_SECOND


def _jobs_default() -> int:
    value = os.environ.get(JOBS_ENV, '1')
    try:
        return int(value)
    except ValueError:
        raise ConfigError(JOBS_ENV, f'expected an integer, got {value!r}') from None


def menu(args: 'Sequence[str] | None' = None) -> CLIParams:
    parser = ArgumentParser(
        prog='turnformer',
        description='Train and evaluate multimodal turn-taking transformers.',
    )
    parser.add_argument(
        '--verbose',
        '-v',
        action='store_true',
        required=False,
        help='Log debug messages',
    )
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='Generate a synthetic dataset')
    synth.add_argument(
        '--config',
        '-c',
        type=Path,
        default=None,
        required=False,
        help='Generator config file (default: built-in desk preset)',
    )
    synth.add_argument(
        '--seed',
        '-s',
        type=int,
        default=None,
        required=False,
        help='Override the generator seed',
    )
    synth.add_argument(
        '--out',
        '-o',
        type=Path,
        required=True,
        help='Directory to write the dataset to',
    )

    train = commands.add_parser('train', help='Train one model on one window setting')
    train.add_argument(
        '--data',
        '-d',
        type=Path,
        default=None,
        required=False,
        help='Dataset directory',
    )
    train.add_argument(
        '--model',
        '-m',
        default=None,
        required=False,
        help='Model preset (e.g. 3m, 3m:no-stage1, eft, lft, mlp); '
        'a custom 3M variant goes in the run config',
    )
    train.add_argument(
        '--modalities',
        default=None,
        required=False,
        help='Modality set for baselines, such as T+V+A',
    )
    train.add_argument(
        '--past',
        type=int,
        default=None,
        required=False,
        help='Seconds of observed context',
    )
    train.add_argument(
        '--future',
        type=int,
        default=None,
        required=False,
        help='Seconds ahead to predict',
    )
    train.add_argument(
        '--prior',
        action=argparse.BooleanOptionalAction,
        default=None,
        required=False,
        help='Feed the current speaker to the model (posterior setting); '
        '--no-prior overrides a config that turns it on',
    )
    train.add_argument(
        '--seed',
        '-s',
        type=int,
        default=None,
        required=False,
        help='Training seed',
    )
    train.add_argument(
        '--epochs',
        type=int,
        default=None,
        required=False,
        help='Maximum number of epochs',
    )
    train.add_argument(
        '--lr',
        type=float,
        default=None,
        required=False,
        help='Adam learning rate',
    )
    train.add_argument(
        '--batch-size',
        type=int,
        default=None,
        required=False,
        help='Mini-batch size',
    )
    train.add_argument(
        '--precision',
        choices=('float32', 'float64'),
        default=None,
        required=False,
        help='Floating point precision of training',
    )
    train.add_argument(
        '--config',
        '-c',
        type=Path,
        default=None,
        required=False,
        help='Run config file; flags override its values',
    )
    train.add_argument(
        '--out',
        '-o',
        type=Path,
        required=True,
        help='Run directory for checkpoint, metrics and config',
    )

    evaluate_cmd = commands.add_parser('eval', help='Score a trained run on a split')
    evaluate_cmd.add_argument(
        '--run',
        '-r',
        type=Path,
        required=True,
        help='Run directory written by train',
    )
    evaluate_cmd.add_argument(
        '--split',
        choices=SPLITS,
        default='test',
        required=False,
        help='Split to score (default: test)',
    )

    grid = commands.add_parser('grid', help='Run an ablation or comparison grid')
    grid.add_argument(
        '--spec',
        type=Path,
        required=True,
        help='Grid spec file',
    )
    grid.add_argument(
        '--data',
        '-d',
        type=Path,
        default=None,
        required=False,
        help='Dataset directory (default: the data entry of the grid file)',
    )
    grid.add_argument(
        '--out',
        '-o',
        type=Path,
        required=True,
        help='Results CSV file; a pivot is written beside it',
    )
    grid.add_argument(
        '--jobs',
        '-j',
        type=int,
        default=None,
        required=False,
        help=f'Parallel worker processes (default: ${JOBS_ENV} or 1)',
    )

    gradcheck = commands.add_parser('gradcheck', help='Verify gradients numerically')
    gradcheck.add_argument(
        '--module',
        choices=GRADCHECK_MODULES,
        default='all',
        required=False,
        help='Which group of checks to run (default: all)',
    )
    gradcheck.add_argument(
        '--seed',
        '-s',
        type=int,
        default=None,
        required=False,
        help='Seed for the random inputs',
    )

    report = commands.add_parser('report', help='Pivot grid results into a table')
    report.add_argument(
        '--in',
        dest='input',
        type=Path,
        required=True,
        help='Results CSV written by grid',
    )
    report.add_argument(
        '--style',
        choices=REPORT_STYLES.keys(),
        default='table2',
        required=False,
        help='Table layout (default: table2)',
    )
    report.add_argument(
        '--split',
        choices=SPLITS,
        default=None,
        required=False,
        help='Split to report (default: test when present)',
    )
    report.add_argument(
        '--out',
        '-o',
        type=Path,
        default=None,
        required=False,
        help='File to write the table to (default: standard output)',
    )

    convert = commands.add_parser(
        'convert',
        help='Import exported EgoCom feature tables',
    )
    convert.add_argument(
        '--tables',
        '-t',
        type=Path,
        required=True,
        help='Directory with speakers.csv and per-conversation .npy tables',
    )
    convert.add_argument(
        '--windows-per-second',
        type=int,
        default=EGOCOM_WINDOWS_PER_SECOND,
        required=False,
        help=f'Feature windows per second (default: {EGOCOM_WINDOWS_PER_SECOND})',
    )
    convert.add_argument(
        '--out',
        '-o',
        type=Path,
        required=True,
        help='Directory to write the dataset to',
    )

    return CLIParams(**vars(parser.parse_args(args)))


def configure_logging(verbose: bool) -> None:  # noqa: FBT001
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(levelname)s: %(message)s',
        stream=sys.stderr,
        force=True,
    )


def run_synth(args: CLIParams) -> int:
    values = load_config(args.config) if args.config else {}
    values = merge_overrides(values, {'seed': args.seed})
    cfg = SynthConfig.from_mapping(values)
    assert args.out is not None
    save_dataset(synth_generate(cfg), args.out)
    write_snapshot(cfg.as_dict(), args.out / SYNTH_CONFIG_NAME)
    return EXIT_OK


@dataclass
class RunSetup:
    model: 'TurnTakingModel'
    samples: 'dict[str, list[Sample]]'
    train: TrainConfig


def _run_setting(values: 'Mapping[str, Any]', key: str, kind: type) -> Any:
    return check_scalar(key, values[key], kind)


def prepare_run(values: 'Mapping[str, Any]') -> RunSetup:
    """Load data and build the model a run config describes."""
    if not values.get('data'):
        raise ConfigError('data', 'no dataset directory given')
    if not values.get('model'):
        raise ConfigError('model', 'no model preset given')
    model_choice = choose_model(values['model'])
    train_cfg = TrainConfig.from_mapping(values['train'])
    dims = replace(ModelDims.from_mapping(values['dims']), dropout=train_cfg.dropout)
    past_s = _run_setting(values, 'past_s', int)
    future_s = _run_setting(values, 'future_s', int)
    fractions = values['fractions']
    if not isinstance(fractions, (list, tuple)):
        raise ConfigError('fractions', f'expected a list, got {fractions!r}')
    fractions = [check_scalar('fractions', f, float) for f in fractions]
    modalities = values.get('modalities')
    if modalities is not None:
        modalities = parse_modalities(check_scalar('modalities', modalities, str))

    convs = load_dataset(values['data'])
    layout = dataset_layout(convs)
    model = build_model(
        model_choice,
        modalities=modalities,
        raw_dims=layout.modality_dims,
        dims=dims,
        n_classes=layout.n_classes,
        use_prior=_run_setting(values, 'prior', bool),
        l_out=_run_setting(values, 'l_out', int),
    )
    missing = set(model.modalities) - set(layout.modality_dims)
    if missing:
        names = sorted(m.value for m in missing)
        raise ConfigError('modalities', f'dataset lacks {names}')
    splits = split_dataset(
        convs,
        fractions,
        _run_setting(values, 'split_seed', int),
    )
    samples = {
        name: window_conversations(
            splits[name],
            past_s,
            future_s,
            per_second=_run_setting(values, 'per_second', bool),
        )
        for name in SPLITS
    }
    if not samples['train']:
        raise ConfigError(
            'past/future',
            f'no training samples for past {past_s}s, future {future_s}s',
        )
    return RunSetup(model, samples, train_cfg)


def run_train(args: CLIParams) -> int:
    loaded = load_config(args.config) if args.config else {}
    base = merge_overrides(RUN_DEFAULTS, loaded)
    values = merge_overrides(
        base,
        {
            'data': str(args.data) if args.data else None,
            'model': args.model,
            'modalities': args.modalities,
            'past_s': args.past,
            'future_s': args.future,
            'prior': args.prior,
            'train': {
                'seed': args.seed,
                'epochs': args.epochs,
                'lr': args.lr,
                'batch_size': args.batch_size,
                'precision': args.precision,
            },
        },
    )
    if values.get('model'):
        values['model'] = model_entry(choose_model(values['model']))
    setup = prepare_run(values)
    result = train_model(setup.model, setup.samples, setup.train)

    assert args.out is not None
    args.out.mkdir(parents=True, exist_ok=True)
    digest = model_digest(setup.model)
    write_snapshot(
        {**values, 'model_spec': setup.model.spec(), 'digest': digest},
        args.out / RUN_CONFIG_NAME,
    )
    save_checkpoint(result.params, digest, args.out / CHECKPOINT_NAME)
    with (args.out / METRICS_NAME).open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)
        for metrics in result.history:
            writer.writerow(
                [
                    metrics.epoch,
                    f'{metrics.loss:.6f}',
                    f'{metrics.train_top1:.6f}',
                    '' if metrics.val_top1 is None else f'{metrics.val_top1:.6f}',
                ],
            )
    logger.info('best epoch %d, score %.4f', result.best_epoch, result.best_score)
    return EXIT_OK


def run_eval(args: CLIParams) -> int:
    assert args.run is not None
    split = args.split or 'test'
    values = load_config(args.run / RUN_CONFIG_NAME)
    setup = prepare_run(values)
    params = load_checkpoint(args.run / CHECKPOINT_NAME, model_digest(setup.model))
    samples = setup.samples[split]
    if not samples:
        raise ConfigError('split', f'{split} split has no samples')
    with precision(setup.train.precision):
        top1 = evaluate(setup.model, params, samples, setup.train.batch_size)
    majority = majority_baseline(setup.samples['train'], samples, setup.model.n_classes)
    report = {
        'split': split,
        'samples': len(samples),
        'top1': top1,
        'majority_baseline': majority,
    }
    (args.run / f'eval_{split}.json').write_text(
        json.dumps(report, indent=2, sort_keys=True) + '\n',
        encoding='utf-8',
    )
    logger.info('%s top-1 %.4f (majority class %.4f)', split, top1, majority)
    return EXIT_OK


def run_grid_command(args: CLIParams) -> int:
    assert args.spec is not None
    assert args.out is not None
    values = load_config(args.spec)
    if args.data is not None:
        values['data'] = str(args.data)
    spec = GridSpec.from_mapping(values)
    if spec.data is None:
        raise ConfigError('data', 'grid spec has no data entry and --data is not given')
    jobs = args.jobs if args.jobs is not None else _jobs_default()
    rows = run_grid(spec, load_dataset(spec.data), args.out, jobs=jobs)
    table = REPORT_STYLES[spec.style](rows, spec.splits[0])
    args.out.with_suffix('.txt').write_text(table, encoding='utf-8')
    logger.info('wrote %d result rows to %s', len(rows), args.out)
    return EXIT_OK


def run_gradcheck_command(args: CLIParams) -> int:
    results = run_gradcheck(args.module, args.seed or 0)
    failed = [result for result in results if not result.passed]
    if failed:
        logger.error('%d of %d gradient checks failed', len(failed), len(results))
        return EXIT_NUMERIC
    logger.info('all %d gradient checks passed', len(results))
    return EXIT_OK


def run_report(args: CLIParams) -> int:
    assert args.input is not None
    table = REPORT_STYLES[args.style or 'table2'](read_results(args.input), args.split)
    if args.out is None:
        sys.stdout.write(table)
    else:
        args.out.write_text(table, encoding='utf-8')
    return EXIT_OK


def run_convert(args: CLIParams) -> int:
    assert args.tables is not None
    assert args.out is not None
    convert_exported(args.tables, args.out, windows_per_second=args.windows_per_second)
    return EXIT_OK


commands: 'dict[str, Callable[[CLIParams], int]]' = {
    'synth': run_synth,
    'train': run_train,
    'eval': run_eval,
    'grid': run_grid_command,
    'gradcheck': run_gradcheck_command,
    'report': run_report,
    'convert': run_convert,
}


def main(argv: 'Sequence[str] | None' = None) -> int:
    error_stream = sys.stderr
    try:
        args = menu(argv)
    except UsageError as exc:
        print(exc, file=error_stream)
        return EXIT_USAGE
    configure_logging(args.verbose)
    try:
        return commands[args.command](args)
    except VALIDATION_ERRORS as exc:
        logger.error('%s', exc)  # noqa: TRY400
        return EXIT_INVALID
    except NonFiniteLossError as exc:
        logger.error('%s', exc)  # noqa: TRY400
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == '__main__':
    run()
