import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from tests.conftest import TINY_RAW_DIMS, make_conversation
from turnformer.config import ConfigError
from turnformer.dataset import (
    DatasetFormatError,
    MissingDatasetError,
    class_counts,
    collate,
    load_dataset,
    majority_label,
    save_dataset,
    split_dataset,
    split_sizes,
    stream_equal,
    window_conversations,
    window_dataset,
)
from turnformer.egocom import convert_exported
from turnformer.modality import DEFAULT_RAW_DIMS, Modality, UnknownModalityError
from turnformer.tensor import ContractError


def test_window_count_and_shapes() -> None:
    """
    Given a 20 s conversation at 12 windows per second,
    When it is windowed with 4 s of past and 1 s of future,
    Then there are 16 samples, each with 48 past tokens per modality.
    """
    conv = make_conversation(duration_s=20, windows_per_second=12)
    samples = window_dataset(conv, 4, 1)
    assert len(samples) == 16
    assert [s.anchor_s for s in samples] == list(range(4, 20))
    for sample in samples:
        for modality, width in TINY_RAW_DIMS.items():
            assert sample.features[modality].shape == (48, width)


def test_window_contents_follow_anchor() -> None:
    labels = np.repeat(np.arange(10) % 4, 2)
    conv = make_conversation(duration_s=10, windows_per_second=2, labels=labels)
    sample = window_dataset(conv, 3, 2)[0]
    assert sample.anchor_s == 3
    assert sample.prior == labels[5]
    assert sample.target == 0
    text = conv.features[Modality.TEXT]
    assert_array_equal(sample.features[Modality.TEXT], text[0:6])


def test_past_longer_than_conversation() -> None:
    conv = make_conversation(duration_s=5)
    assert window_dataset(conv, 5, 1) == []
    assert window_dataset(conv, 10, 1) == []


def test_constant_labels_give_constant_targets() -> None:
    conv = make_conversation(duration_s=12, labels=np.full(48, 2))
    samples = window_dataset(conv, 3, 3)
    assert {s.prior for s in samples} == {2}
    assert {s.target for s in samples} == {2}


def test_window_rejects_zero_horizon() -> None:
    with pytest.raises(ConfigError, match='past_s'):
        window_dataset(make_conversation(), 0, 1)


@given(
    duration=st.integers(1, 30),
    past=st.integers(1, 10),
    future=st.integers(1, 10),
    wps=st.integers(1, 4),
)
def test_windows_stay_inside_conversation(
    duration: int,
    past: int,
    future: int,
    wps: int,
) -> None:
    conv = make_conversation(duration_s=duration, windows_per_second=wps)
    samples = window_dataset(conv, past, future)
    assert len(samples) == max(0, duration - past - future + 1)
    for sample in samples:
        assert past <= sample.anchor_s <= duration - future
        assert sample.features[Modality.AUDIO].shape[0] == past * wps


def test_per_second_tokens_are_window_means() -> None:
    conv = make_conversation(duration_s=8, windows_per_second=4)
    sample = window_dataset(conv, 2, 1, per_second=True)[0]
    video = conv.features[Modality.VIDEO]
    assert sample.features[Modality.VIDEO].shape == (2, 4)
    np.testing.assert_allclose(
        sample.features[Modality.VIDEO],
        np.stack([video[0:4].mean(axis=0), video[4:8].mean(axis=0)]),
        rtol=1e-6,
    )


def test_majority_ties_go_to_lowest_label() -> None:
    assert majority_label(np.array([3, 1, 3, 1]), 4) == 1
    assert majority_label(np.array([2, 2, 0]), 4) == 2


def test_collate_stacks_samples() -> None:
    samples = window_conversations(
        [make_conversation('a', seed=1), make_conversation('b', seed=2)],
        2,
        1,
    )
    batch = collate(samples)
    assert len(batch) == len(samples) == 36
    assert batch.features[Modality.TEXT].shape == (36, 8, 3)
    assert class_counts(samples, 4).sum() == 36
    with pytest.raises(ContractError):
        collate([])


@pytest.mark.parametrize(
    ('n_items', 'fractions', 'expected'),
    [
        (28, (0.78, 0.06, 0.16), [22, 2, 4]),
        (5, (1.0, 0.0, 0.0), [5, 0, 0]),
        (3, (0.78, 0.06, 0.16), [1, 1, 1]),
        (10, (0.5, 0.25, 0.25), [5, 3, 2]),
    ],
)
def test_split_sizes(n_items: int, fractions: tuple, expected: list) -> None:
    assert split_sizes(n_items, fractions) == expected


@pytest.mark.parametrize(
    ('n_items', 'fractions'),
    [(2, (0.78, 0.06, 0.16)), (10, (0.5, 0.5, 0.5)), (10, (1.5, -0.5, 0.0))],
)
def test_split_sizes_errors(n_items: int, fractions: tuple) -> None:
    with pytest.raises(ConfigError, match='fractions'):
        split_sizes(n_items, fractions)


def test_split_is_seeded_partition() -> None:
    """
    Given 28 conversations,
    When they are split twice with the same seed,
    Then both splits are identical and together cover every conversation once.
    """
    convs = [make_conversation(f'c{i}', duration_s=2) for i in range(28)]
    first = split_dataset(convs, seed=5)
    second = split_dataset(convs, seed=5)
    ids = {name: [c.id for c in part] for name, part in first.items()}
    assert ids == {name: [c.id for c in part] for name, part in second.items()}
    assert [len(ids[name]) for name in ('train', 'val', 'test')] == [22, 2, 4]
    assert sorted(sum(ids.values(), [])) == sorted(c.id for c in convs)


def test_save_load_round_trip(tmp_path: Path) -> None:
    convs = [make_conversation('a', seed=1), make_conversation('b', seed=2)]
    save_dataset(convs, tmp_path / 'data')
    loaded = load_dataset(tmp_path / 'data')
    assert len(loaded) == 2
    assert all(stream_equal(x, y) for x, y in zip(convs, loaded, strict=True))
    manifest = json.loads((tmp_path / 'data' / 'manifest.json').read_text())
    assert manifest['modality_dims'] == {'text': 3, 'audio': 2, 'video': 4}
    assert manifest['conversations'][0] == {
        'id': 'a',
        'duration_s': 20,
        'num_windows': 80,
    }


def test_truncated_payload(tmp_path: Path) -> None:
    save_dataset([make_conversation('a')], tmp_path)
    payload = tmp_path / 'a' / 'text.f32'
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError, match='expected 960 bytes'):
        load_dataset(tmp_path)


def test_label_rows_must_match(tmp_path: Path) -> None:
    save_dataset([make_conversation('a')], tmp_path)
    labels = tmp_path / 'a' / 'labels.csv'
    labels.write_text('\n'.join(labels.read_text().splitlines()[:-1]) + '\n')
    with pytest.raises(DatasetFormatError, match='label rows'):
        load_dataset(tmp_path)


def test_missing_directory(tmp_path: Path) -> None:
    with pytest.raises(MissingDatasetError, match='does not exist'):
        load_dataset(tmp_path / 'nowhere')


def test_wrong_format_version(tmp_path: Path) -> None:
    save_dataset([make_conversation('a')], tmp_path)
    manifest_path = tmp_path / 'manifest.json'
    manifest = json.loads(manifest_path.read_text())
    manifest['format_version'] = 2
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match='format version'):
        load_dataset(tmp_path)


def edited_manifest(root: Path, **changes: object) -> None:
    save_dataset([make_conversation('a')], root)
    manifest_path = root / 'manifest.json'
    manifest = json.loads(manifest_path.read_text())
    manifest.update(changes)
    manifest_path.write_text(json.dumps(manifest))


def test_unknown_manifest_modality(tmp_path: Path) -> None:
    """
    Given a manifest that lists a modality the model zoo does not know,
    When the dataset is loaded,
    Then the unknown key is named in a modality error rather than a KeyError.
    """
    edited_manifest(tmp_path, modality_dims={'text': 3, 'depth': 4})
    with pytest.raises(UnknownModalityError, match='depth'):
        load_dataset(tmp_path)


@pytest.mark.parametrize(
    ('changes', 'message'),
    [
        ({'n_classes': 'four'}, 'n_classes'),
        ({'windows_per_second': 2.5}, 'windows_per_second'),
        ({'modality_dims': {'text': '3'}}, 'modality_dims.text'),
        ({'modality_dims': ['text']}, 'modality_dims'),
    ],
)
def test_mistyped_manifest_fields(
    tmp_path: Path,
    changes: dict,
    message: str,
) -> None:
    edited_manifest(tmp_path, **changes)
    with pytest.raises(DatasetFormatError, match=message):
        load_dataset(tmp_path)


def test_egocom_shaped_dataset(tmp_path: Path) -> None:
    """
    Given a conversation with the published feature widths at 12 windows per second,
    When it is saved and loaded,
    Then the widths survive and windowing yields 48-token pasts.
    """
    gen = np.random.default_rng(0)
    conv = make_conversation(duration_s=6, windows_per_second=12)
    conv.features = {
        m: gen.standard_normal((72, d)).astype(np.float32)
        for m, d in DEFAULT_RAW_DIMS.items()
    }
    save_dataset([conv], tmp_path)
    (loaded,) = load_dataset(tmp_path)
    assert loaded.modality_dims == DEFAULT_RAW_DIMS
    samples = window_dataset(loaded, 4, 1)
    assert len(samples) == 2
    assert samples[0].features[Modality.VIDEO].shape == (48, 2048)


def test_convert_exported_tables(tmp_path: Path) -> None:
    tables = tmp_path / 'tables'
    (tables / 'day1').mkdir(parents=True)
    rows = ['conversation,window_index,speaker']
    rows += [f'day1,{i},{i // 12 % 4}' for i in range(36)]
    (tables / 'speakers.csv').write_text('\n'.join(rows) + '\n')
    np.save(tables / 'day1' / 'audio.npy', np.ones((36, 5)))
    convs = convert_exported(tables, tmp_path / 'out')
    assert [c.id for c in convs] == ['day1']
    assert convs[0].modality_dims == {Modality.AUDIO: 5}
    (loaded,) = load_dataset(tmp_path / 'out')
    assert stream_equal(loaded, convs[0])
    assert loaded.duration_s == 3
