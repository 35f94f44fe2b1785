"""Synthetic conversations with a known generator, for learnability checks.

Speakers follow a symmetric first-order Markov chain over whole seconds. Each
window carries the current speaker's signature in the signature modalities
plus Gaussian noise; an optional cue announces every turn change a fixed number
of seconds ahead in one modality.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from typing_extensions import Self

from turnformer.config import ConfigError, check_scalar, checked_fields
from turnformer.dataset import ConversationStreams
from turnformer.modality import Modality, UnknownModalityError, canonical

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetPreset:
    windows_per_second: int
    dims: dict[Modality, int]


DATASET_PRESETS = {
    'desk': DatasetPreset(
        4,
        {Modality.TEXT: 12, Modality.AUDIO: 8, Modality.VIDEO: 16},
    ),
    'egocom': DatasetPreset(
        12,
        {Modality.TEXT: 300, Modality.AUDIO: 64, Modality.VIDEO: 2048},
    ),
}


@dataclass(frozen=True)
class CueConfig:
    modality: Modality = Modality.VIDEO
    lead_seconds: int = 2
    amplitude: float = 3.0


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 3
    p_stay: float = 0.85
    duration_s: int = 60
    n_conversations: int = 28
    windows_per_second: int = 4
    dims: dict[Modality, int] = field(
        default_factory=lambda: dict(DATASET_PRESETS['desk'].dims),
    )
    signature_modalities: tuple[Modality, ...] | None = None
    noise_scale: float = 1.0
    signature_scale: float = 1.0
    cue: CueConfig | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_speakers < 1:
            raise ConfigError(
                'n_speakers',
                f'must be at least 1, got {self.n_speakers}',
            )
        if not 0.0 < self.p_stay <= 1.0:
            raise ConfigError('p_stay', f'must lie in (0, 1], got {self.p_stay}')
        if self.noise_scale < 0:
            raise ConfigError(
                'noise_scale',
                f'must be non-negative, got {self.noise_scale}',
            )
        if min(self.duration_s, self.n_conversations, self.windows_per_second) < 1:
            raise ConfigError(
                'duration_s',
                'duration, conversation count and windows per second must be positive',
            )
        if not self.dims or any(d < 1 for d in self.dims.values()):
            raise ConfigError('dims', f'need positive widths, got {self.dims}')
        if self.signature_modalities is None:
            object.__setattr__(self, 'signature_modalities', canonical(self.dims))
        if not set(self.signature_modalities or ()) <= set(self.dims):
            raise ConfigError(
                'signature_modalities',
                'must be a subset of the generated dims',
            )
        if self.cue is not None:
            if self.cue.modality not in self.dims:
                raise ConfigError(
                    'cue',
                    f'cue modality {self.cue.modality.name} is not generated',
                )
            if not 1 <= self.cue.lead_seconds < self.duration_s:
                raise ConfigError(
                    'cue',
                    f'lead_seconds must lie in [1, {self.duration_s}), '
                    f'got {self.cue.lead_seconds}',
                )

    @property
    def n_states(self) -> int:
        return self.n_speakers + 1

    @property
    def signature_set(self) -> tuple[Modality, ...]:
        return self.signature_modalities or ()

    @classmethod
    def from_mapping(cls, values: 'Mapping[str, Any]') -> Self:
        kwargs = dict(values)
        preset_name = kwargs.pop('preset', None)
        if preset_name is not None:
            if preset_name not in DATASET_PRESETS:
                raise ConfigError(
                    'preset',
                    f'unknown dataset preset {preset_name!r}, '
                    f'expected one of {", ".join(DATASET_PRESETS)}',
                )
            preset = DATASET_PRESETS[preset_name]
            kwargs.setdefault('windows_per_second', preset.windows_per_second)
            kwargs.setdefault(
                'dims',
                {m.manifest_key: d for m, d in preset.dims.items()},
            )
        kwargs = checked_fields('synth', cls, kwargs)
        try:
            if 'dims' in kwargs:
                kwargs['dims'] = {
                    Modality.from_manifest_key(k): check_scalar(f'dims.{k}', v, int)
                    for k, v in kwargs['dims'].items()
                }
            if kwargs.get('signature_modalities') is not None:
                kwargs['signature_modalities'] = canonical(
                    Modality.from_manifest_key(k)
                    for k in kwargs['signature_modalities']
                )
            if kwargs.get('cue') is not None:
                cue = dict(kwargs['cue'])
                if 'modality' in cue:
                    cue['modality'] = Modality.from_manifest_key(cue['modality'])
                kwargs['cue'] = CueConfig(**cue)
        except KeyError as exc:
            raise UnknownModalityError(str(exc.args[0])) from None
        return cls(**kwargs)

    def as_dict(self) -> dict[str, Any]:
        cue = None
        if self.cue is not None:
            cue = {
                'modality': self.cue.modality.manifest_key,
                'lead_seconds': self.cue.lead_seconds,
                'amplitude': self.cue.amplitude,
            }
        return {
            'n_speakers': self.n_speakers,
            'p_stay': self.p_stay,
            'duration_s': self.duration_s,
            'n_conversations': self.n_conversations,
            'windows_per_second': self.windows_per_second,
            'dims': {m.manifest_key: d for m, d in self.dims.items()},
            'signature_modalities': [m.manifest_key for m in self.signature_set],
            'noise_scale': self.noise_scale,
            'signature_scale': self.signature_scale,
            'cue': cue,
            'seed': self.seed,
        }


def transition_matrix(n_states: int, p_stay: float) -> 'NDArray[np.float64]':
    if n_states == 1:
        return np.ones((1, 1))
    move = (1.0 - p_stay) / (n_states - 1)
    matrix = np.full((n_states, n_states), move)
    np.fill_diagonal(matrix, p_stay)
    return matrix


def speaker_chain(
    n_states: int,
    p_stay: float,
    duration_s: int,
    rng: np.random.Generator,
) -> 'NDArray[np.int64]':
    states = np.empty(duration_s, dtype=np.int64)
    states[0] = rng.integers(n_states)
    for second in range(1, duration_s):
        current = states[second - 1]
        if n_states == 1 or rng.random() < p_stay:
            states[second] = current
        else:
            # uniform over the other states
            step = rng.integers(1, n_states)
            states[second] = (current + step) % n_states
    return states


def _patterns(
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> 'dict[Modality, NDArray[np.float64]]':
    patterns = {
        m: rng.standard_normal((cfg.n_states, dim)) for m, dim in cfg.dims.items()
    }
    for modality, table in patterns.items():
        if cfg.n_states > 1 and len(np.unique(table, axis=0)) != cfg.n_states:
            raise ConfigError(
                'dims',
                f'{modality.manifest_key} patterns are not distinct',
            )
    return patterns


def synth_generate(cfg: SynthConfig) -> list[ConversationStreams]:
    sig_seq, cue_seq, conv_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    signatures = _patterns(cfg, np.random.default_rng(sig_seq))
    cue_patterns = _patterns(cfg, np.random.default_rng(cue_seq))
    w = cfg.windows_per_second
    width = len(str(cfg.n_conversations - 1))

    convs = []
    for index, child in enumerate(conv_seq.spawn(cfg.n_conversations)):
        rng = np.random.default_rng(child)
        states = speaker_chain(cfg.n_states, cfg.p_stay, cfg.duration_s, rng)
        labels = np.repeat(states, w)
        features = {}
        for modality in canonical(cfg.dims):
            matrix = np.zeros((len(labels), cfg.dims[modality]))
            if modality in cfg.signature_set:
                matrix += cfg.signature_scale * signatures[modality][labels]
            if cfg.noise_scale > 0:
                matrix += cfg.noise_scale * rng.standard_normal(matrix.shape)
            features[modality] = matrix
        if cfg.cue is not None:
            cue = cfg.cue
            changes = np.flatnonzero(states[1:] != states[:-1]) + 1
            for second in changes:
                cue_second = second - cue.lead_seconds
                if cue_second < 0:
                    continue
                pattern = cue.amplitude * cue_patterns[cue.modality][states[second]]
                features[cue.modality][cue_second * w : (cue_second + 1) * w] += pattern
        convs.append(
            ConversationStreams(
                id=f'synth{index:0{width}d}',
                features={m: x.astype(np.float32) for m, x in features.items()},
                labels=labels,
                windows_per_second=w,
                n_classes=cfg.n_states,
            ),
        )
    logger.info(
        'generated %d conversations of %d s (p_stay=%.2f, cue=%s)',
        len(convs),
        cfg.duration_s,
        cfg.p_stay,
        'none' if cfg.cue is None else cfg.cue.modality.manifest_key,
    )
    return convs


def bayes_oracle(
    cfg: SynthConfig,
    past_s: int,
    future_s: int,
    *,
    use_prior: bool,
) -> float:
    """Accuracy of the predictor that knows the generator.

    The current speaker is readable when the prior is given or any modality
    carries signatures. A cue is usable when it falls inside the past block,
    in which case it reveals every change up to ``lead_seconds`` past the
    anchor. Beyond the last revealed second the chain runs blind.
    """
    n_states = cfg.n_states
    chain = transition_matrix(n_states, cfg.p_stay)
    current_known = use_prior or bool(cfg.signature_set)
    cue_visible = cfg.cue is not None and cfg.cue.lead_seconds <= past_s

    if cue_visible and cfg.cue is not None:
        lead = cfg.cue.lead_seconds
        revealed = min(future_s, lead)
        if current_known:
            known = 1.0
        else:
            # state is pinned once any change lands in the revealed span
            known = 1.0 - cfg.p_stay ** (past_s - lead + revealed)
        blind_steps = future_s - revealed
    else:
        known = 1.0 if current_known else 0.0
        blind_steps = future_s

    ahead = np.linalg.matrix_power(chain, blind_steps)
    stationary = np.full(n_states, 1.0 / n_states)
    informed = float(stationary @ ahead.max(axis=1))
    uninformed = float((stationary @ ahead).max())
    return known * informed + (1.0 - known) * uninformed
