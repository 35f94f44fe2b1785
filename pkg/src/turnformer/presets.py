from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, replace
from typing import TYPE_CHECKING, Any

from typing_extensions import Self

from turnformer.blocks import ModelDims
from turnformer.config import ConfigError, checked_fields, config_digest
from turnformer.modality import DEFAULT_RAW_DIMS, Modality, canonical, format_modalities
from turnformer.models import (
    BaselineConfig,
    EarlyFusionTransformer,
    Fusion,
    LateFusionTransformer,
    MultiLayerPerceptron,
    StreamSpec,
    ThreeMConfig,
    ThreeMTransformer,
    TurnTakingModel,
)
from turnformer.tensor import register

if TYPE_CHECKING:
    from collections.abc import Sequence


@dataclass(frozen=True)
class Variant:
    name: str
    label: str
    streams: tuple[str, ...] = ('T>V', 'A>V')
    fusion: Fusion = Fusion.SOFT_AVERAGE
    include_stage1: bool = True
    include_stage2: bool = True
    stage2_decoder: bool = True

    def config(self, **settings: Any) -> ThreeMConfig:
        return ThreeMConfig(
            streams=tuple(StreamSpec.parse(s) for s in self.streams),
            fusion=self.fusion,
            include_stage1=self.include_stage1,
            include_stage2=self.include_stage2,
            stage2_decoder=self.stage2_decoder,
            **settings,
        )

    @property
    def architecture_name(self) -> str:
        tags = []
        if self.fusion is Fusion.CONCAT:
            tags.append('concat')
        elif self.fusion is Fusion.LEARNED_AVERAGE:
            tags.append('learned')
        if not self.stage2_decoder:
            tags.append('nodec')
        if not self.include_stage1:
            tags.append('no-stage1')
        if not self.include_stage2:
            tags.append('no-stage2')
        return ':'.join(['3m', *tags, '|'.join(self.streams)])

    @classmethod
    def from_mapping(cls, values: 'Mapping[str, Any]') -> Self:
        """A 3M variant written out in a config rather than named by preset.

        ``name`` defaults to the preset-style name of the architecture, such as
        ``3m:concat:V>T|A>V``, and ``label`` to the name.
        """
        kwargs = checked_fields('model', cls, values)
        streams = kwargs.get('streams', ('T>V', 'A>V'))
        if isinstance(streams, str) or not isinstance(streams, (list, tuple)):
            raise ConfigError('model.streams', f'expected a list, got {streams!r}')
        kwargs['streams'] = tuple(StreamSpec.parse(s).label for s in streams)
        kwargs['fusion'] = Fusion.parse(kwargs.get('fusion', Fusion.SOFT_AVERAGE))
        variant = cls(**{'name': '', 'label': '', **kwargs})
        config = variant.config()
        if variant.name in preset_names():
            preset = VARIANTS.get(ALIASES.get(variant.name, variant.name))
            if preset is None or preset.config() != config:
                raise ConfigError(
                    'model.name',
                    f'{variant.name!r} names a different preset',
                )
        if not variant.name:
            variant = replace(variant, name=variant.architecture_name)
        if not variant.label:
            variant = replace(variant, label=variant.name)
        return variant

    def as_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values['streams'] = list(self.streams)
        values['fusion'] = self.fusion.value
        return values


# rows of the ablation table, top to bottom
TABLE1_VARIANTS = (
    Variant('3m:T>V|A>V', '3M T→V ∥ A→V'),
    Variant('3m:V>T|A>T', '3M V→T ∥ A→T', ('V>T', 'A>T')),
    Variant('3m:V>A|T>A', '3M V→A ∥ T→A', ('V>A', 'T>A')),
    Variant('3m:concat:T>V|A>V', '3M concat T→V ∥ A→V', fusion=Fusion.CONCAT),
    Variant('3m:V>T', '3M V→T', ('V>T',)),
    Variant('3m:V>A', '3M V→A', ('V>A',)),
    Variant('3m:T>V', '3M T→V', ('T>V',)),
    Variant('3m:T>A', '3M T→A', ('T>A',)),
    Variant('3m:A>V', '3M A→V', ('A>V',)),
    Variant('3m:A>T', '3M A→T', ('A>T',)),
    Variant('3m:nodec:T>V|A>V', '3M no-decoder T→V ∥ A→V', stage2_decoder=False),
    Variant(
        '3m:nodec:V>T|A>T',
        '3M no-decoder V→T ∥ A→T',
        ('V>T', 'A>T'),
        stage2_decoder=False,
    ),
    Variant(
        '3m:nodec:V>A|T>A',
        '3M no-decoder V→A ∥ T→A',
        ('V>A', 'T>A'),
        stage2_decoder=False,
    ),
    Variant('3m:no-stage1', '3M w/o stage 1', include_stage1=False),
    Variant('3m:no-stage2', '3M w/o stage 2', include_stage2=False),
)

VARIANTS = {variant.name: variant for variant in TABLE1_VARIANTS}
VARIANTS['3m:learned:T>V|A>V'] = Variant(
    '3m:learned:T>V|A>V',
    '3M learned-average T→V ∥ A→V',
    fusion=Fusion.LEARNED_AVERAGE,
)
ALIASES = {'3m': '3m:T>V|A>V'}

ALL_MODALITIES = (Modality.TEXT, Modality.VIDEO, Modality.AUDIO)

BaselineBuilder = Callable[[BaselineConfig], TurnTakingModel]
baselines: dict[str, BaselineBuilder] = {}


@register(baselines, 'eft')
def _early_fusion(config: BaselineConfig) -> TurnTakingModel:
    return EarlyFusionTransformer(config)


@register(baselines, 'lft')
def _late_fusion(config: BaselineConfig) -> TurnTakingModel:
    return LateFusionTransformer(config)


@register(baselines, 'mlp')
def _perceptron(config: BaselineConfig) -> TurnTakingModel:
    return MultiLayerPerceptron(config)


def preset_names() -> list[str]:
    return [*ALIASES, *VARIANTS, *baselines]


def resolve(preset: str) -> str:
    name = ALIASES.get(preset, preset)
    if name not in VARIANTS and name not in baselines:
        raise ConfigError(
            'model',
            f'unknown preset {preset!r}; valid presets: {", ".join(preset_names())}',
        )
    return name


def row_label(name: str) -> str:
    """Table label of a preset; custom variants are labelled by their name."""
    name = ALIASES.get(name, name)
    if name in VARIANTS:
        return VARIANTS[name].label
    if name in baselines:
        return name.upper()
    return name


def choose_model(entry: 'str | Mapping[str, Any]') -> 'str | Variant':
    """Resolve a preset name, or build the variant a config mapping writes out."""
    if isinstance(entry, str):
        return resolve(entry)
    if isinstance(entry, Mapping):
        return Variant.from_mapping(entry)
    raise ConfigError('model', f'expected a preset name or a mapping, got {entry!r}')


def model_name(model: 'str | Variant') -> str:
    return model.name if isinstance(model, Variant) else resolve(model)


def model_entry(model: 'str | Variant') -> 'str | dict[str, Any]':
    """The config form of ``model``, as read back by :func:`choose_model`."""
    return model.as_dict() if isinstance(model, Variant) else resolve(model)


def build_model(
    preset: 'str | Variant',
    *,
    modalities: 'Sequence[Modality] | None' = None,
    raw_dims: 'Mapping[Modality, int] | None' = None,
    dims: ModelDims | None = None,
    n_classes: int = 4,
    use_prior: bool = False,
    l_out: int = 12,
) -> TurnTakingModel:
    """Construct a model from a preset name or a custom 3M variant.

    Transformer variants fix their modality set through their streams; passing
    a different ``modalities`` is a config error. Baselines default to T+V+A.
    """
    if isinstance(preset, Variant):
        name = preset.name
        variant: Variant | None = preset
    else:
        name = resolve(preset)
        variant = VARIANTS.get(name)
    settings: dict[str, Any] = {
        'dims': dims or ModelDims(),
        'n_classes': n_classes,
        'use_prior': use_prior,
        'l_out': l_out,
        'raw_dims': dict(raw_dims or DEFAULT_RAW_DIMS),
    }
    if variant is not None:
        config = variant.config(**settings)
        if modalities is not None and canonical(modalities) != config.modalities:
            raise ConfigError(
                'modalities',
                f'model {name} uses {format_modalities(config.modalities)}, '
                f'not {format_modalities(modalities)}',
            )
        return ThreeMTransformer(config)
    baseline = BaselineConfig(
        modalities=tuple(modalities or ALL_MODALITIES),
        **settings,
    )
    return baselines[name](baseline)


def model_digest(model: TurnTakingModel) -> str:
    return config_digest(model.spec())
