import numpy as np
import pytest
from numpy.testing import assert_allclose

from tests import reference
from tests.conftest import TINY_DIMS, TINY_RAW_DIMS, make_batch
from turnformer.blocks import EVAL, Initializer, Scope, count_parameters
from turnformer.config import ConfigError
from turnformer.dataset import Batch
from turnformer.modality import Modality, format_modalities
from turnformer.models import (
    BaselineConfig,
    Fusion,
    StreamSpec,
    ThreeMConfig,
    classify,
    forward_3m,
    forward_eft,
    forward_lft,
    embed_modality,
    forward_mlp,
    fuse,
    hybrid_stream_forward,
    init_3m,
    init_eft,
    init_lft,
    init_mlp,
    logits_3m,
    logits_lft,
    pool_matrix,
    predict_proba,
    prior_one_hot,
    stage_one_forward,
)
from turnformer.presets import VARIANTS, build_model
from turnformer.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    backward,
    recording,
    softmax_cross_entropy,
    softmax_rows,
)

BASELINE_CASES = [
    ('eft', (Modality.TEXT,)),
    ('eft', (Modality.TEXT, Modality.VIDEO, Modality.AUDIO)),
    ('lft', (Modality.AUDIO,)),
    ('lft', (Modality.VIDEO, Modality.AUDIO)),
    ('lft', (Modality.TEXT, Modality.VIDEO, Modality.AUDIO)),
    ('mlp', (Modality.VIDEO,)),
    ('mlp', (Modality.TEXT, Modality.VIDEO, Modality.AUDIO)),
]


def tiny_config(name: str, **settings: object) -> ThreeMConfig:
    values = {
        'dims': TINY_DIMS,
        'l_out': 3,
        'use_prior': True,
        'raw_dims': TINY_RAW_DIMS,
        **settings,
    }
    return VARIANTS[name].config(**values)


def assert_on_simplex(probs: np.ndarray) -> None:
    assert (probs >= 0).all()
    assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize('name', list(VARIANTS))
def test_every_variant_outputs_probabilities(
    float64: None,
    batch: Batch,
    name: str,
) -> None:
    """
    Given any ablation variant at tiny dims,
    When a batch of three samples is classified,
    Then each row is a probability distribution over the four speakers.
    """
    config = tiny_config(name)
    params = init_3m(config, np.random.default_rng(0))
    probs = forward_3m(batch, config, params).numpy()
    assert probs.shape == (3, 4)
    assert_on_simplex(probs)


@pytest.mark.parametrize(
    ('preset', 'modalities'),
    BASELINE_CASES,
    ids=[f'{p}-{"".join(m.value for m in mods)}' for p, mods in BASELINE_CASES],
)
@pytest.mark.parametrize('use_prior', [False, True], ids=['likelihood', 'posterior'])
def test_baselines_output_probabilities(
    float64: None,
    batch: Batch,
    preset: str,
    modalities: tuple,
    use_prior: bool,
) -> None:
    model = build_model(
        preset,
        modalities=modalities,
        raw_dims=TINY_RAW_DIMS,
        dims=TINY_DIMS,
        use_prior=use_prior,
        l_out=3,
    )
    params = model.init_params(np.random.default_rng(0))
    probs = predict_proba(model, batch, params)
    assert probs.shape == (3, 4)
    assert_on_simplex(probs)


def test_feature_scaling_keeps_simplex(float64: None, rng: np.random.Generator) -> None:
    batch = make_batch(rng)
    scaled = Batch(
        features={m: 1000.0 * x for m, x in batch.features.items()},
        prior=batch.prior,
        target=batch.target,
    )
    config = tiny_config('3m:T>V|A>V')
    params = init_3m(config, np.random.default_rng(0))
    assert_on_simplex(forward_3m(scaled, config, params).numpy())


def test_stream_order_does_not_matter(float64: None, batch: Batch) -> None:
    """
    Given the same parameters and the two streams listed in either order,
    When outputs are soft-averaged,
    Then the prediction is unchanged.
    """
    config = tiny_config('3m:T>V|A>V')
    swapped = ThreeMConfig(
        dims=config.dims,
        streams=tuple(reversed(config.streams)),
        l_out=config.l_out,
        use_prior=True,
        raw_dims=config.raw_dims,
    )
    params = init_3m(config, np.random.default_rng(0))
    assert_allclose(
        forward_3m(batch, config, params).numpy(),
        forward_3m(batch, swapped, params).numpy(),
        atol=1e-12,
    )


def test_prior_changes_prediction(float64: None, batch: Batch) -> None:
    config = tiny_config('3m:T>V|A>V')
    params = init_3m(config, np.random.default_rng(0))
    flipped = Batch(batch.features, (batch.prior + 1) % 4, batch.target)
    assert not np.allclose(
        forward_3m(batch, config, params).numpy(),
        forward_3m(flipped, config, params).numpy(),
    )


@pytest.mark.parametrize('name', [*VARIANTS, 'eft', 'lft', 'mlp'])
def test_every_parameter_receives_gradient(
    float64: None,
    batch: Batch,
    name: str,
) -> None:
    """
    Given any freshly initialised preset, ablations and baselines alike,
    When the loss of one batch is differentiated,
    Then every parameter gets a nonzero gradient except attention key biases,
    which only shift all scores of a query row and cancel in the softmax.
    """
    model = build_model(
        name,
        raw_dims=TINY_RAW_DIMS,
        dims=TINY_DIMS,
        use_prior=True,
        l_out=3,
    )
    params = model.init_params(np.random.default_rng(0))
    with recording():
        grads = backward(
            softmax_cross_entropy(model.logits(batch, params), batch.target),
        )
    for key, param in params.items():
        grad = grads[param].numpy()
        if key.endswith('k.bias'):
            assert_allclose(grad, 0.0, atol=1e-12)
        else:
            assert np.any(grad != 0), key


def test_missing_modality_in_batch(batch: Batch) -> None:
    config = tiny_config('3m:T>V|A>V')
    params = init_3m(config, np.random.default_rng(0))
    partial = Batch(
        {Modality.TEXT: batch.features[Modality.TEXT]},
        batch.prior,
        batch.target,
    )
    with pytest.raises(ConfigError, match='video'):
        logits_3m(partial, config, params)


def test_late_fusion_averages_probabilities(float64: None, batch: Batch) -> None:
    config = BaselineConfig(
        modalities=(Modality.TEXT, Modality.AUDIO),
        dims=TINY_DIMS,
        l_out=3,
        raw_dims=TINY_RAW_DIMS,
    )
    params = init_lft(config, np.random.default_rng(0))
    branch_probs = []
    for modality in config.modalities:
        single = BaselineConfig(
            modalities=(modality,),
            dims=TINY_DIMS,
            l_out=3,
            raw_dims=TINY_RAW_DIMS,
        )
        branch_probs.append(softmax_rows(logits_lft(batch, single, params)).numpy())
    assert_allclose(
        softmax_rows(logits_lft(batch, config, params)).numpy(),
        np.mean(branch_probs, axis=0),
        atol=1e-12,
    )


def test_fuse_soft_average_and_single_stream(float64: None) -> None:
    a, b = Tensor(np.ones((2, 3, 4))), Tensor(3 * np.ones((2, 3, 4)))
    scope = Scope({})
    assert_allclose(fuse([a, b], Fusion.SOFT_AVERAGE, scope).numpy(), 2.0)
    assert fuse([a], Fusion.CONCAT, scope) is a
    with pytest.raises(ContractError):
        fuse([], Fusion.SOFT_AVERAGE, scope)


def test_pool_matrix_rows_average() -> None:
    pool = pool_matrix(10, 4)
    assert pool.shape == (4, 10)
    assert_allclose(pool.sum(axis=1), 1.0)
    assert (pool.sum(axis=0) > 0).all()
    assert_allclose(pool_matrix(2, 4).sum(axis=1), 1.0)


def test_prior_one_hot_range() -> None:
    assert_allclose(prior_one_hot(np.array([0, 3]), 4), [[1, 0, 0, 0], [0, 0, 0, 1]])
    with pytest.raises(ContractError, match='speaker'):
        prior_one_hot(np.array([4]), 4)


@pytest.mark.parametrize(
    ('text', 'query', 'kv'),
    [
        ('T>V', Modality.TEXT, Modality.VIDEO),
        (' a > t ', Modality.AUDIO, Modality.TEXT),
    ],
)
def test_stream_parse(text: str, query: Modality, kv: Modality) -> None:
    assert StreamSpec.parse(text) == StreamSpec(query, kv)


@pytest.mark.parametrize(
    ('text', 'message'),
    [('TV', 'QUERY>KV'), ('T>T', 'itself'), ('X>V', 'unknown modality')],
)
def test_stream_parse_errors(text: str, message: str) -> None:
    with pytest.raises(ConfigError, match=message):
        StreamSpec.parse(text)


def test_config_needs_a_stage() -> None:
    with pytest.raises(ConfigError, match='stage'):
        ThreeMConfig(include_stage1=False, include_stage2=False)


def test_config_mapping_round_trip() -> None:
    config = tiny_config('3m:concat:T>V|A>V')
    assert ThreeMConfig.from_mapping(config.as_dict()) == config
    assert config.modalities == (Modality.TEXT, Modality.VIDEO, Modality.AUDIO)
    assert config.fusion is Fusion.CONCAT


def test_eval_mode_is_deterministic(float64: None, batch: Batch) -> None:
    config = tiny_config('3m:T>V|A>V')
    params = init_3m(config, np.random.default_rng(0))
    assert_allclose(
        logits_3m(batch, config, params, EVAL).numpy(),
        logits_3m(batch, config, params, EVAL).numpy(),
    )


def test_concat_fusion_adds_one_projection() -> None:
    """
    Given the two-stream model with soft-average and with concatenation fusion,
    When their parameters are counted,
    Then concatenation adds exactly one 2d -> d linear layer.
    """
    rng = np.random.default_rng(0)
    soft = init_3m(tiny_config('3m:T>V|A>V'), rng)
    concat = init_3m(tiny_config('3m:concat:T>V|A>V'), rng)
    d = TINY_DIMS.d_model
    assert count_parameters(concat) - count_parameters(soft) == 2 * d * d + d


BASELINE_FUNCTIONS = {
    'eft': (forward_eft, init_eft),
    'lft': (forward_lft, init_lft),
    'mlp': (forward_mlp, init_mlp),
}


@pytest.mark.parametrize('preset', list(BASELINE_FUNCTIONS))
def test_baseline_forward_matches_model(
    float64: None,
    batch: Batch,
    preset: str,
) -> None:
    forward, init = BASELINE_FUNCTIONS[preset]
    config = BaselineConfig(
        modalities=(Modality.TEXT, Modality.VIDEO),
        dims=TINY_DIMS,
        l_out=3,
        use_prior=True,
        raw_dims=TINY_RAW_DIMS,
    )
    params = init(config, np.random.default_rng(0))
    probs = forward(batch, config, params).numpy()
    model = build_model(
        preset,
        modalities=config.modalities,
        raw_dims=TINY_RAW_DIMS,
        dims=TINY_DIMS,
        use_prior=True,
        l_out=3,
    )
    assert_on_simplex(probs)
    assert_allclose(probs, predict_proba(model, batch, params), atol=1e-12)


def test_classify_matches_numpy(float64: None, rng: np.random.Generator) -> None:
    """
    Given a fused representation of three samples with five positions each,
    When it is classified,
    Then the result is the softmax of the head applied to the position mean.
    """
    store: dict[str, Tensor] = {}
    Initializer(np.random.default_rng(0), store).linear('head', 8, 4)
    store = reference.randomized(store, np.random.default_rng(1))
    fused = rng.standard_normal((3, 5, 8))
    probs = classify(Tensor(fused), Scope(store, 'head')).numpy()
    expected = reference.softmax(
        reference.dense(fused.mean(axis=1), reference.arrays(store), 'head'),
    )
    assert probs.shape == (3, 4)
    assert_on_simplex(probs)
    assert_allclose(probs, expected, atol=1e-12)


@pytest.mark.parametrize('use_prior', [False, True], ids=['likelihood', 'posterior'])
def test_stage_one_matches_numpy(
    float64: None,
    batch: Batch,
    use_prior: bool,
) -> None:
    """
    Given the full model with random weights everywhere,
    When stage one refines each modality,
    Then every output equals the embedding, encoder and query decoder written
    out in numpy.
    """
    config = tiny_config('3m:T>V|A>V', use_prior=use_prior)
    params = reference.randomized(
        init_3m(config, np.random.default_rng(0)),
        np.random.default_rng(1),
    )
    p = reference.arrays(params)
    refined = stage_one_forward(batch, config, params)
    for modality in config.modalities:
        name = f'stage1.{modality.value}'
        tokens = batch.features[modality]
        if use_prior:
            one_hot = np.eye(4)[batch.prior][:, None, :]
            one_hot = np.broadcast_to(one_hot, (*tokens.shape[:2], 4))
            tokens = np.concatenate([tokens, one_hot], axis=-1)
        embedded = reference.dense(tokens, p, f'{name}.embed')
        embedded = embedded + reference.sinusoids(tokens.shape[1], 8)
        memory = reference.encoder(embedded, p, f'{name}.encoder', 1, 2)
        queries = np.broadcast_to(p[f'{name}.queries'], (3, 3, 8))
        expected = reference.decoder(queries, memory, p, f'{name}.decoder', 1, 2)
        assert_allclose(refined[modality].numpy(), expected, atol=1e-10)


@pytest.mark.parametrize('use_prior', [False, True], ids=['likelihood', 'posterior'])
def test_zero_embedding_leaves_positions(
    float64: None,
    batch: Batch,
    use_prior: bool,
) -> None:
    """
    Given an embedding whose weights and bias are all zero,
    When tokens are embedded with or without the current speaker,
    Then only the sinusoidal positions remain.
    """
    width = 3 + (4 if use_prior else 0)
    store = {
        'embed.weight': Tensor(np.zeros((width, 8))),
        'embed.bias': Tensor(np.zeros(8)),
    }
    prior = batch.prior if use_prior else None
    embedded = embed_modality(
        batch.features[Modality.TEXT],
        prior,
        Scope(store, 'embed'),
        4,
    ).numpy()
    expected = np.broadcast_to(reference.sinusoids(4, 8), (3, 4, 8))
    assert_allclose(embedded, expected, atol=1e-12)


@pytest.mark.parametrize(('use_prior', 'width'), [(False, 2412), (True, 2416)])
def test_early_fusion_embeds_concatenated_features(
    use_prior: bool,
    width: int,
) -> None:
    """
    Given the early-fusion baseline over text, video and audio at full widths,
    When it is initialised,
    Then its single embedding reads the 300 + 2048 + 64 feature columns,
    plus four for the one-hot current speaker.
    """
    config = BaselineConfig(
        modalities=(Modality.TEXT, Modality.VIDEO, Modality.AUDIO),
        dims=TINY_DIMS,
        use_prior=use_prior,
        l_out=3,
    )
    params = init_eft(config, np.random.default_rng(0))
    key = f'branch.{format_modalities(config.modalities)}.embed.weight'
    assert params[key].shape == (width, TINY_DIMS.d_model)


def test_single_modality_late_fusion_is_early_fusion(
    float64: None,
    batch: Batch,
) -> None:
    """
    Given both baselines over audio alone and one shared set of weights,
    When they predict,
    Then averaging a single branch changes nothing.
    """
    config = BaselineConfig(
        modalities=(Modality.AUDIO,),
        dims=TINY_DIMS,
        use_prior=True,
        l_out=3,
        raw_dims=TINY_RAW_DIMS,
    )
    params = init_eft(config, np.random.default_rng(0))
    assert_allclose(
        forward_lft(batch, config, params).numpy(),
        forward_eft(batch, config, params).numpy(),
        atol=1e-12,
    )


def test_perceptron_ignores_past_length_of_constant_features(float64: None) -> None:
    """
    Given features that do not change over time,
    When the perceptron sees two and eight windows of them,
    Then the time average and so the prediction are the same.
    """
    config = BaselineConfig(
        modalities=(Modality.TEXT, Modality.VIDEO),
        dims=TINY_DIMS,
        use_prior=True,
        l_out=3,
        raw_dims=TINY_RAW_DIMS,
    )
    params = init_mlp(config, np.random.default_rng(0))
    gen = np.random.default_rng(2)
    rows = {m: gen.standard_normal((3, 1, TINY_RAW_DIMS[m])) for m in config.modalities}
    prior = np.array([0, 2, 3])

    def constant(length: int) -> Batch:
        features = {m: np.repeat(row, length, axis=1) for m, row in rows.items()}
        return Batch(features, prior, prior)

    assert_allclose(
        forward_mlp(constant(2), config, params).numpy(),
        forward_mlp(constant(8), config, params).numpy(),
        atol=1e-12,
    )


def test_embed_modality_appends_prior(float64: None, batch: Batch) -> None:
    store: dict[str, Tensor] = {}
    Initializer(np.random.default_rng(0), store).linear('embed', 3 + 4, 8)
    scope = Scope(store, 'embed')
    tokens = batch.features[Modality.TEXT]
    embedded = embed_modality(tokens, batch.prior, scope, 4).numpy()
    assert embedded.shape == (3, 4, 8)
    flipped = embed_modality(tokens, (batch.prior + 1) % 4, scope, 4).numpy()
    assert not np.allclose(embedded, flipped)
    with pytest.raises(DimensionError):
        embed_modality(tokens[0], batch.prior, scope, 4)
    with pytest.raises(DimensionError):
        embed_modality(tokens, batch.prior[:2], scope, 4)


@pytest.mark.parametrize('name', ['3m:T>V|A>V', '3m:nodec:T>V|A>V'])
def test_stage_outputs_keep_pooled_length(
    float64: None,
    batch: Batch,
    name: str,
) -> None:
    """
    Given the two-stream model with and without decoders in its streams,
    When stage one refines each modality and the first stream mixes two of them,
    Then every sequence has been pooled to three positions of model width.
    """
    config = tiny_config(name)
    params = init_3m(config, np.random.default_rng(0))
    refined = stage_one_forward(batch, config, params)
    assert set(refined) == set(config.modalities)
    assert all(z.shape == (3, 3, TINY_DIMS.d_model) for z in refined.values())
    stream = config.streams[0]
    mixed = hybrid_stream_forward(
        refined[stream.query],
        refined[stream.kv],
        Scope(params, f'stage2.{stream.label}'),
        config,
    )
    assert mixed.shape == (3, 3, TINY_DIMS.d_model)
    with pytest.raises(DimensionError):
        hybrid_stream_forward(
            refined[stream.query],
            Tensor(np.zeros((3, 2, TINY_DIMS.d_model))),
            Scope(params, f'stage2.{stream.label}'),
            config,
        )


def test_stage_one_disabled() -> None:
    config = tiny_config('3m:no-stage1')
    with pytest.raises(ConfigError, match='stage one'):
        stage_one_forward(make_batch(np.random.default_rng(0)), config, {})
