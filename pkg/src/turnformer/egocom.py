"""Convert exported EgoCom feature tables into the dataset layout.

Expected input::

    <table_dir>/speakers.csv          conversation,window_index,speaker
    <table_dir>/<conversation>/text.npy   (num_windows, 300)
    <table_dir>/<conversation>/audio.npy  (num_windows, 64)
    <table_dir>/<conversation>/video.npy  (num_windows, 2048)

Speaker labels use 0 for no one, 1 for the host and 2.. for the other
participants. Missing modality tables are skipped for every conversation.
"""

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from turnformer.dataset import (
    ConversationStreams,
    DatasetFormatError,
    MissingDatasetError,
    save_dataset,
)
from turnformer.modality import CANONICAL_ORDER

if TYPE_CHECKING:
    from turnformer.stream import FilePath

logger = logging.getLogger(__name__)

SPEAKERS_NAME = 'speakers.csv'
SPEAKERS_HEADER = ['conversation', 'window_index', 'speaker']
EGOCOM_WINDOWS_PER_SECOND = 12


def read_speakers(path: Path) -> dict[str, list[tuple[int, int]]]:
    if not path.is_file():
        raise DatasetFormatError(path, 'a speaker table', 'no file', unit='')
    per_conversation: dict[str, list[tuple[int, int]]] = defaultdict(list)
    with path.open(newline='', encoding='utf-8') as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != SPEAKERS_HEADER:
            raise DatasetFormatError(path, SPEAKERS_HEADER, header, 'header')
        for line, row in enumerate(reader, start=2):
            try:
                conversation, window, speaker = row
                per_conversation[conversation].append((int(window), int(speaker)))
            except ValueError:
                raise DatasetFormatError(
                    path,
                    'conversation,int,int',
                    row,
                    f'on line {line}',
                ) from None
    return per_conversation


def convert_exported(
    table_dir: 'FilePath',
    out_dir: 'FilePath',
    *,
    windows_per_second: int = EGOCOM_WINDOWS_PER_SECOND,
    n_classes: int = 4,
) -> list[ConversationStreams]:
    root = Path(table_dir)
    if not root.is_dir():
        raise MissingDatasetError(root)
    speakers = read_speakers(root / SPEAKERS_NAME)
    convs = []
    for conversation in sorted(speakers):
        rows = sorted(speakers[conversation])
        labels = np.array([speaker for _, speaker in rows], dtype=np.int64)
        if [window for window, _ in rows] != list(range(len(rows))):
            raise DatasetFormatError(
                root / SPEAKERS_NAME,
                f'consecutive windows for {conversation}',
                'a gap',
                '',
            )
        features = {}
        for modality in CANONICAL_ORDER:
            table_path = root / conversation / f'{modality.manifest_key}.npy'
            if not table_path.is_file():
                continue
            table = np.load(table_path)
            if table.ndim != 2 or len(table) != len(labels):  # noqa: PLR2004
                raise DatasetFormatError(
                    table_path,
                    (len(labels), 'dim'),
                    table.shape,
                    'shape',
                )
            features[modality] = table.astype(np.float32)
        convs.append(
            ConversationStreams(
                id=conversation,
                features=features,
                labels=labels,
                windows_per_second=windows_per_second,
                n_classes=n_classes,
            ),
        )
    logger.info('converted %d exported conversations from %s', len(convs), root)
    save_dataset(convs, out_dir)
    return convs
