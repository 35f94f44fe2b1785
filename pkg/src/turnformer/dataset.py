import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, TypedDict

import numpy as np

from turnformer.config import ConfigError
from turnformer.modality import Modality, UnknownModalityError, canonical
from turnformer.stream import create_directory, read_f32le_matrix, write_f32le_matrix
from turnformer.tensor import ContractError, DimensionError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from numpy.typing import NDArray

    from turnformer.stream import FilePath

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
LABELS_NAME = 'labels.csv'
LABELS_HEADER = ['window_index', 'speaker']
SPLITS = ('train', 'val', 'test')
DEFAULT_FRACTIONS = (0.78, 0.06, 0.16)


class ConversationEntry(TypedDict):
    id: str
    duration_s: int
    num_windows: int


class Manifest(TypedDict):
    format_version: int
    windows_per_second: int
    modality_dims: dict[str, int]
    n_classes: int
    conversations: list[ConversationEntry]


class DatasetFormatError(ValueError):
    def __init__(
        self,
        path: 'FilePath',
        expected: object,
        actual: object,
        unit: str = 'bytes',
    ) -> None:
        super().__init__(f'{path}: expected {expected} {unit}, found {actual}')
        self.path = path
        self.expected = expected
        self.actual = actual


class MissingDatasetError(ValueError):
    def __init__(self, path: 'FilePath') -> None:
        super().__init__(f'dataset directory {path} does not exist')
        self.path = path


@dataclass
class ConversationStreams:
    id: str
    features: 'dict[Modality, NDArray[np.float32]]'
    labels: 'NDArray[np.int64]'
    windows_per_second: int
    n_classes: int = 4

    def __post_init__(self) -> None:
        if self.windows_per_second < 1:
            raise ConfigError('windows_per_second', f'{self.windows_per_second} < 1')
        for modality, matrix in self.features.items():
            if matrix.ndim != 2 or len(matrix) != len(self.labels):  # noqa: PLR2004
                raise DimensionError(
                    f'conversation {self.id} {modality.manifest_key}',
                    matrix.shape,
                    self.labels.shape,
                )
        labels = self.labels
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ContractError(
                f'conversation {self.id}',
                f'labels must lie in [0, {self.n_classes})',
            )

    @property
    def num_windows(self) -> int:
        return len(self.labels)

    @property
    def duration_s(self) -> int:
        return self.num_windows // self.windows_per_second

    @property
    def modality_dims(self) -> dict[Modality, int]:
        return {m: int(matrix.shape[1]) for m, matrix in self.features.items()}


@dataclass(frozen=True)
class Sample:
    features: 'dict[Modality, NDArray[np.float32]]'
    prior: int
    target: int
    conversation: str
    anchor_s: int


@dataclass(frozen=True)
class Batch:
    features: 'dict[Modality, NDArray[np.float32]]'
    prior: 'NDArray[np.int64]'
    target: 'NDArray[np.int64]'

    def __len__(self) -> int:
        return len(self.target)


def collate(samples: 'Sequence[Sample]') -> Batch:
    if not samples:
        raise ContractError('collate', 'no samples to batch')
    modalities = canonical(samples[0].features)
    return Batch(
        features={m: np.stack([s.features[m] for s in samples]) for m in modalities},
        prior=np.array([s.prior for s in samples], dtype=np.int64),
        target=np.array([s.target for s in samples], dtype=np.int64),
    )


def majority_label(labels: 'NDArray[np.int64]', n_classes: int) -> int:
    """Most frequent label; ties go to the lowest label."""
    return int(np.argmax(np.bincount(labels, minlength=n_classes)))


def window_dataset(
    conv: ConversationStreams,
    past_s: int,
    future_s: int,
    *,
    per_second: bool = False,
) -> list[Sample]:
    """Cut one sample per anchor second ``t``, ``past_s <= t <= duration - future_s``.

    The past block covers windows ``[(t - past_s) * w, t * w)``, the prior is
    the label of window ``t * w - 1`` and the target is the majority label of
    the ``future_s``-th second after the anchor. With ``per_second`` every
    second of the past block is collapsed to the mean of its windows.
    """
    if past_s < 1 or future_s < 1:
        raise ConfigError(
            'past_s/future_s',
            f'must be at least 1, got {past_s}/{future_s}',
        )
    w = conv.windows_per_second
    samples = []
    for anchor in range(past_s, conv.duration_s - future_s + 1):
        past = slice((anchor - past_s) * w, anchor * w)
        features = {m: matrix[past] for m, matrix in conv.features.items()}
        if per_second:
            features = {
                m: block.reshape(past_s, w, -1)
                .mean(axis=1, dtype=np.float64)
                .astype(np.float32)
                for m, block in features.items()
            }
        future = conv.labels[(anchor + future_s - 1) * w : (anchor + future_s) * w]
        samples.append(
            Sample(
                features=features,
                prior=int(conv.labels[anchor * w - 1]),
                target=majority_label(future, conv.n_classes),
                conversation=conv.id,
                anchor_s=anchor,
            ),
        )
    return samples


def window_conversations(
    convs: 'Iterable[ConversationStreams]',
    past_s: int,
    future_s: int,
    *,
    per_second: bool = False,
) -> list[Sample]:
    return [
        sample
        for conv in convs
        for sample in window_dataset(conv, past_s, future_s, per_second=per_second)
    ]


def split_sizes(n_items: int, fractions: 'Sequence[float]') -> list[int]:
    """Largest-remainder rounding; keeps the total and fills every nonzero split."""
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions):
        raise ConfigError(
            'fractions',
            f'need {len(SPLITS)} non-negative values, got {fractions}',
        )
    if abs(sum(fractions) - 1.0) > 1e-9:  # noqa: PLR2004
        raise ConfigError('fractions', f'must sum to 1, got {sum(fractions)}')
    nonzero = sum(1 for f in fractions if f > 0)
    if n_items < nonzero:
        raise ConfigError(
            'fractions',
            f'{n_items} conversations cannot fill {nonzero} nonzero splits',
        )
    exact = [f * n_items for f in fractions]
    sizes = [int(np.floor(x)) for x in exact]
    by_remainder = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for idx in by_remainder[: n_items - sum(sizes)]:
        sizes[idx] += 1
    for idx, fraction in enumerate(fractions):
        if fraction > 0 and sizes[idx] == 0:
            sizes[int(np.argmax(sizes))] -= 1
            sizes[idx] = 1
    return sizes


def split_dataset(
    convs: 'Sequence[ConversationStreams]',
    fractions: 'Sequence[float]' = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> dict[str, list[ConversationStreams]]:
    sizes = split_sizes(len(convs), fractions)
    order = np.random.default_rng(seed).permutation(len(convs))
    splits: dict[str, list[ConversationStreams]] = {}
    start = 0
    for name, size in zip(SPLITS, sizes, strict=True):
        splits[name] = [convs[idx] for idx in order[start : start + size]]
        start += size
    return splits


@dataclass(frozen=True)
class DatasetLayout:
    windows_per_second: int
    modality_dims: dict[Modality, int]
    n_classes: int


def _layout_of(conv: ConversationStreams) -> DatasetLayout:
    return DatasetLayout(conv.windows_per_second, conv.modality_dims, conv.n_classes)


def dataset_layout(convs: 'Sequence[ConversationStreams]') -> DatasetLayout:
    if not convs:
        raise ContractError('dataset', 'no conversations')
    first = convs[0]
    layout = _layout_of(first)
    for conv in convs[1:]:
        other = _layout_of(conv)
        if other != layout:
            raise ContractError(
                'dataset',
                f'conversation {conv.id} layout {other} differs from {layout}',
            )
    return layout


def _manifest_for(convs: 'Sequence[ConversationStreams]') -> Manifest:
    layout = dataset_layout(convs)
    return {
        'format_version': FORMAT_VERSION,
        'windows_per_second': layout.windows_per_second,
        'modality_dims': {m.manifest_key: d for m, d in layout.modality_dims.items()},
        'n_classes': layout.n_classes,
        'conversations': [
            {'id': c.id, 'duration_s': c.duration_s, 'num_windows': c.num_windows}
            for c in convs
        ],
    }


def save_dataset(convs: 'Sequence[ConversationStreams]', path: 'FilePath') -> None:
    root = Path(path)
    manifest = _manifest_for(convs)
    create_directory(root)
    for conv in convs:
        conv_dir = root / conv.id
        create_directory(conv_dir)
        for modality, matrix in conv.features.items():
            (conv_dir / modality.filename).write_bytes(write_f32le_matrix(matrix))
        with (conv_dir / LABELS_NAME).open('w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(LABELS_HEADER)
            writer.writerows(enumerate(conv.labels.tolist()))
    text = json.dumps(manifest, indent=2) + '\n'
    (root / MANIFEST_NAME).write_text(text, encoding='utf-8')
    logger.info('saved %d conversations to %s', len(convs), root)


def _read_manifest(root: Path) -> Manifest:
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetFormatError(manifest_path, 'a manifest', 'no file', unit='file')
    try:
        manifest: Manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(
            manifest_path,
            'JSON',
            f'invalid JSON ({exc})',
            '',
        ) from exc
    version = manifest.get('format_version')
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            manifest_path,
            FORMAT_VERSION,
            version,
            'format version',
        )
    missing = set(Manifest.__annotations__) - set(manifest)
    if missing:
        raise DatasetFormatError(manifest_path, sorted(missing), 'missing', 'keys')
    return manifest


def _read_labels(path: Path, num_windows: int) -> 'NDArray[np.int64]':
    if not path.is_file():
        raise DatasetFormatError(path, num_windows, 'no file', 'label rows')
    try:
        with io.StringIO(path.read_text(encoding='utf-8')) as handle:
            rows = list(csv.reader(handle))
    except (UnicodeDecodeError, csv.Error) as exc:
        raise DatasetFormatError(
            path,
            'UTF-8 CSV',
            f'unreadable text ({exc})',
            '',
        ) from exc
    if not rows or rows[0] != LABELS_HEADER:
        raise DatasetFormatError(
            path,
            LABELS_HEADER,
            rows[0] if rows else None,
            'header',
        )
    body = rows[1:]
    if len(body) != num_windows:
        raise DatasetFormatError(path, num_windows, len(body), 'label rows')
    try:
        indices = [int(row[0]) for row in body]
        labels = np.array([int(row[1]) for row in body], dtype=np.int64)
    except (ValueError, IndexError, OverflowError) as exc:
        raise DatasetFormatError(
            path,
            'integer rows',
            f'malformed row ({exc})',
            '',
        ) from exc
    if indices != list(range(num_windows)):
        raise DatasetFormatError(
            path,
            'consecutive window indices',
            'a gap or reordering',
            '',
        )
    return labels


def _manifest_int(path: Path, key: str, value: object) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetFormatError(path, 'an integer', repr(value), key)
    return value


def _manifest_dims(path: Path, manifest: Manifest) -> dict[Modality, int]:
    entries = manifest['modality_dims']
    if not isinstance(entries, dict):
        raise DatasetFormatError(path, 'an object', repr(entries), 'modality_dims')
    dims: dict[Modality, int] = {}
    for key, dim in entries.items():
        try:
            modality = Modality.from_manifest_key(key)
        except KeyError:
            raise UnknownModalityError(key) from None
        dims[modality] = _manifest_int(path, f'modality_dims.{key}', dim)
    return dims


def load_dataset(path: 'FilePath') -> list[ConversationStreams]:
    """Read a dataset directory, failing unless every file matches the manifest."""
    root = Path(path)
    if not root.is_dir():
        raise MissingDatasetError(root)
    manifest = _read_manifest(root)
    manifest_path = root / MANIFEST_NAME
    dims = _manifest_dims(manifest_path, manifest)
    n_classes = _manifest_int(manifest_path, 'n_classes', manifest['n_classes'])
    windows_per_second = _manifest_int(
        manifest_path,
        'windows_per_second',
        manifest['windows_per_second'],
    )
    convs = []
    for entry in manifest['conversations']:
        conv_dir = root / entry['id']
        num_windows = _manifest_int(
            manifest_path,
            'num_windows',
            entry['num_windows'],
        )
        features = {}
        for modality, dim in dims.items():
            payload_path = conv_dir / modality.filename
            expected = num_windows * dim * 4
            raw = payload_path.read_bytes() if payload_path.is_file() else b''
            if len(raw) != expected:
                raise DatasetFormatError(payload_path, expected, len(raw))
            features[modality] = read_f32le_matrix(raw, num_windows, dim)
        labels = _read_labels(conv_dir / LABELS_NAME, num_windows)
        if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
            raise DatasetFormatError(
                conv_dir / LABELS_NAME,
                f'speakers in [0, {n_classes})',
                f'{labels.min()}..{labels.max()}',
                '',
            )
        convs.append(
            ConversationStreams(
                id=entry['id'],
                features=features,
                labels=labels,
                windows_per_second=windows_per_second,
                n_classes=n_classes,
            ),
        )
    logger.info('loaded %d conversations from %s', len(convs), root)
    return convs


def stream_equal(a: ConversationStreams, b: ConversationStreams) -> bool:
    return (
        a.id == b.id
        and a.windows_per_second == b.windows_per_second
        and a.n_classes == b.n_classes
        and np.array_equal(a.labels, b.labels)
        and a.features.keys() == b.features.keys()
        and all(np.array_equal(a.features[m], b.features[m]) for m in a.features)
    )


def class_counts(samples: 'Iterable[Sample]', n_classes: int) -> 'NDArray[np.int64]':
    counts = np.zeros(n_classes, dtype=np.int64)
    for sample in samples:
        counts[sample.target] += 1
    return counts

