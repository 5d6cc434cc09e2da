"""The full network: feature projections, knowledge cascade, group pooling and decoder."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .attention import CcaParams, cca_forward, cca_params
from .config import RunConfig
from .data import BOS, EOS, PAD, AlbumRecord, Vocabulary, load_album_features, project_feature, tokenize
from .decoder import (
    DecoderParams,
    IndicatorVectors,
    decoder_params,
    flatten_indicator,
    generate_beam,
    generate_greedy,
    trace_regional_attention,
)
from .errors import DimensionError, ValidationError
from .gsm import SopParams, class_activation_map, gsm_forward, sop_params
from .knowledge import ConceptTriple, KnowledgeGraph, embed_concepts, retrieve_concepts
from .nn import Linear, Mode, count_parameters, linear
from .search import Hypothesis
from .tensor import Tensor, no_grad, stack, zeros
from .utils import rng_stream

__all__ = [
    "KagsModel",
    "AlbumExample",
    "EncodedAlbum",
    "init_model",
    "prepare_album",
    "prepare_album_stories",
    "encode_album",
    "training_mode",
    "inference_mode",
    "generate_album",
    "album_attention",
    "album_cams",
    "parameter_summary",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass
class KagsModel:
    conv_proj: Linear
    region_proj: Linear
    concept_proj: Linear
    cca: CcaParams
    gsm_inner: SopParams
    gsm_outer: SopParams
    decoder: DecoderParams


@dataclass(frozen=True)
class AlbumExample:
    """An album ready for the network.

    ``inputs`` and ``targets`` are ``N x L`` token ids (``L`` = longest
    sentence plus one): ``inputs`` starts with the begin token, ``targets``
    ends with the end token, and both are padded with the pad id.
    """

    album_id: str
    conv: np.ndarray
    regions: np.ndarray
    concepts: tuple[tuple[ConceptTriple, ...], ...]
    inputs: np.ndarray
    targets: np.ndarray


class EncodedAlbum(NamedTuple):
    indicators: IndicatorVectors
    regions: Tensor
    conv: Tensor
    a_tilde: Tensor


def init_model(config: RunConfig, vocab_size: int) -> KagsModel:
    """Initialize every weight from the ``init`` stream of ``config.seed``."""

    rng = rng_stream(config.seed, "init")
    d = config.d_model
    model = KagsModel(
        conv_proj=linear(rng, config.feature_dim, d),
        region_proj=linear(rng, config.feature_dim, d),
        concept_proj=linear(rng, d, d, bias=False),
        cca=cca_params(rng, d, config.n_heads, config.cca_layers),
        gsm_inner=sop_params(rng, d, config.reduced_channels),
        gsm_outer=sop_params(rng, d, config.reduced_channels),
        decoder=decoder_params(
            rng,
            vocab_size,
            d,
            config.d_hidden,
            config.n_heads,
            flatten_activation=config.flatten_activation,
        ),
    )
    logger.info("Initialized model with %d parameters (vocabulary %d)", count_parameters(model), vocab_size)
    return model


def training_mode(config: RunConfig) -> Mode:
    return Mode(training=True, batch_stats_at_eval=config.bn_inference == "batch")


def inference_mode(config: RunConfig) -> Mode:
    return Mode(training=False, batch_stats_at_eval=config.bn_inference == "batch")


def prepare_album(
    record: AlbumRecord,
    graph: KnowledgeGraph,
    vocab: Vocabulary,
    config: RunConfig,
    *,
    reference: int = 0,
) -> AlbumExample:
    """Load features, retrieve concepts and encode one reference story.

    ``reference`` picks the story used as ``inputs``/``targets``; generation
    and scoring only need the features, so they keep the default first story.
    Use :func:`prepare_album_stories` to get one example per reference.
    Sentences longer than ``config.max_sentence_len - 1`` tokens are truncated
    so that every target, end token included, fits the generation bound.

    Raises
    ------
    DimensionError
        If the feature files disagree with ``config`` (region count or channel width).
    ValidationError
        If the image count is wrong or ``reference`` is out of range.
    """

    if not 0 <= reference < len(record.references):
        raise ValidationError(
            f"album {record.album_id!r}: reference {reference} out of range ({len(record.references)} stories)"
        )
    conv, regions, concepts = _album_inputs(record, graph, config)
    inputs, targets = _encode_story(record.references[reference], vocab, config)
    return AlbumExample(record.album_id, conv, regions, concepts, inputs, targets)


def prepare_album_stories(
    record: AlbumRecord,
    graph: KnowledgeGraph,
    vocab: Vocabulary,
    config: RunConfig,
) -> list[AlbumExample]:
    """One :class:`AlbumExample` per reference story, sharing the album's features and concepts."""

    conv, regions, concepts = _album_inputs(record, graph, config)
    examples = []
    for story in record.references:
        inputs, targets = _encode_story(story, vocab, config)
        examples.append(AlbumExample(record.album_id, conv, regions, concepts, inputs, targets))
    return examples


def _album_inputs(
    record: AlbumRecord, graph: KnowledgeGraph, config: RunConfig
) -> tuple[np.ndarray, np.ndarray, tuple[tuple[ConceptTriple, ...], ...]]:
    if record.n_images != config.n_images:
        raise ValidationError(f"album {record.album_id!r}: {record.n_images} images, expected {config.n_images}")
    features = load_album_features(record)
    if features.regions.shape[1] != config.m_boxes or features.regions.shape[2] != config.feature_dim:
        raise DimensionError(
            f"album {record.album_id!r}: regions {features.regions.shape[1:]} do not match "
            f"m_boxes={config.m_boxes}, feature_dim={config.feature_dim}"
        )
    concepts = tuple(tuple(retrieve_concepts(graph, image.labels, config.k_relations)) for image in record.images)
    return features.conv, features.regions, concepts


def _encode_story(story: Sequence[str], vocab: Vocabulary, config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    sentences = [vocab.encode(tokenize(s))[: config.max_sentence_len - 1] for s in story]
    length = max(len(s) for s in sentences) + 1
    inputs = np.full((len(sentences), length), PAD, dtype=np.int64)
    targets = np.full((len(sentences), length), PAD, dtype=np.int64)
    for n, ids in enumerate(sentences):
        inputs[n, : len(ids) + 1] = [BOS, *ids]
        targets[n, : len(ids) + 1] = [*ids, EOS]
    return inputs, targets


def encode_album(
    model: KagsModel,
    example: AlbumExample,
    vocab: Vocabulary,
    config: RunConfig,
    mode: Mode,
) -> EncodedAlbum:
    """Run the encoder side for all ``N`` images of an album at once.

    ``config.ablation`` removes parts of the network: ``k`` drops the
    knowledge cascade (zero knowledge rows, raw regions), ``c`` skips only the
    cascade, ``g`` replaces group pooling by the mean projected conv feature,
    and ``kg`` combines ``k`` and ``g``.
    """

    n_images = example.conv.shape[0]
    d = config.d_model
    conv = project_feature(Tensor(example.conv), model.conv_proj)
    regions = project_feature(Tensor(example.regions), model.region_proj)

    if config.ablation in ("k", "kg"):
        knowledge = zeros(n_images, config.k_relations, d)
    else:
        embedding = model.decoder.embedding
        knowledge = stack(
            [embed_concepts(c, vocab, embedding, model.concept_proj, config.k_relations) for c in example.concepts]
        )
        if config.ablation != "c":
            knowledge, regions = cca_forward(knowledge, regions, model.cca, mode)

    if config.ablation in ("g", "kg"):
        a_tilde = conv.mean(axis=(0, 1, 2)).reshape(1, d)
    else:
        a_tilde = gsm_forward(conv, model.gsm_inner, model.gsm_outer).reshape(1, d)

    indicators = IndicatorVectors(
        k_bar=flatten_indicator(knowledge, model.decoder.flatten_knowledge).reshape(n_images, d),
        r_bar=flatten_indicator(regions, model.decoder.flatten_regions).reshape(n_images, d),
        a_tilde=a_tilde[np.zeros(n_images, dtype=np.int64)],
    )
    return EncodedAlbum(indicators, regions, conv, a_tilde)


def generate_album(
    model: KagsModel,
    example: AlbumExample,
    vocab: Vocabulary,
    config: RunConfig,
    *,
    beam: int,
) -> list[Hypothesis]:
    """Decode one sentence per image; ``beam == 1`` is greedy decoding."""

    mode = inference_mode(config)
    with no_grad():
        encoded = encode_album(model, example, vocab, config, mode)
    common = dict(max_len=config.max_sentence_len, mode=mode, regional_keys=config.regional_ca_keys)
    if beam == 1:
        return generate_greedy(model.decoder, encoded.indicators, encoded.regions, **common)
    return generate_beam(model.decoder, encoded.indicators, encoded.regions, beam=beam, **common)


def album_attention(
    model: KagsModel,
    example: AlbumExample,
    vocab: Vocabulary,
    config: RunConfig,
    sentences: list[tuple[int, ...]],
) -> list[np.ndarray]:
    """Regional attention weights (``tokens x M`` per image) while emitting ``sentences``."""

    mode = inference_mode(config)
    with no_grad():
        encoded = encode_album(model, example, vocab, config, mode)
    return trace_regional_attention(
        model.decoder,
        encoded.indicators,
        encoded.regions,
        sentences,
        mode=mode,
        regional_keys=config.regional_ca_keys,
    )


def album_cams(model: KagsModel, example: AlbumExample, vocab: Vocabulary, config: RunConfig) -> list[np.ndarray]:
    """Class activation map (``h x w``) of every image against the album aggregation."""

    with no_grad():
        encoded = encode_album(model, example, vocab, config, inference_mode(config))
        return [class_activation_map(encoded.conv[n], encoded.a_tilde).numpy() for n in range(example.conv.shape[0])]


def parameter_summary(model: KagsModel) -> dict[str, int]:
    """Trainable parameter count per top-level component."""
    return {field.name: count_parameters(getattr(model, field.name)) for field in dataclasses.fields(model)}
