from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from collections.abc import Iterable


class Modality(str, Enum):
    TEXT = 'T'
    AUDIO = 'A'
    VIDEO = 'V'

    @property
    def manifest_key(self) -> str:
        return self.name.lower()

    @property
    def filename(self) -> str:
        return f'{self.manifest_key}.f32'

    @classmethod
    def from_manifest_key(cls, key: str) -> 'Modality':
        return cls[key.upper()]


DEFAULT_RAW_DIMS = {
    Modality.TEXT: 300,
    Modality.AUDIO: 64,
    Modality.VIDEO: 2048,
}

# concatenation order of early fusion, and the order modalities are listed in
CANONICAL_ORDER = (Modality.TEXT, Modality.VIDEO, Modality.AUDIO)


class UnknownModalityError(ValueError):
    def __init__(self, token: str) -> None:
        super().__init__(
            f'unknown modality {token!r}, '
            f'expected one of {", ".join(m.value for m in Modality)}',
        )
        self.token = token


def canonical(modalities: 'Iterable[Modality]') -> tuple[Modality, ...]:
    present = set(modalities)
    return tuple(m for m in CANONICAL_ORDER if m in present)


def parse_modalities(spec: str) -> tuple[Modality, ...]:
    """Parse a modality set such as ``T+V+A``."""
    tokens = [tok.strip().upper() for tok in spec.split('+') if tok.strip()]
    try:
        parsed = [Modality(tok) for tok in tokens]
    except ValueError:
        bad = next(tok for tok in tokens if tok not in {m.value for m in Modality})
        raise UnknownModalityError(bad) from None
    if len(set(parsed)) != len(parsed) or not parsed:
        raise UnknownModalityError(spec)
    return canonical(parsed)


def format_modalities(modalities: 'Iterable[Modality]') -> str:
    return '+'.join(m.value for m in canonical(modalities))
