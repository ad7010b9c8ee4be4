"""
The encoder-decoder captioner.

The encoder projects voxel features to the model width and runs a
stack of role-aware self-attention layers over them. The decoder runs
causal role-aware self-attention over the caption prefix, role-aware
cross-attention over the encoder states and a feedforward block, all
post-norm. Training combines masked-input next-token cross entropy
with the quantization losses of every attention site.

Typical Usage:

>>> from r3_captioner.model import R3Config, R3Captioner, make_batch, train_step
>>> config = R3Config(vocab_size=len(vocabulary))
>>> model = R3Captioner(config)
>>> record = train_step(model, optimizer, make_batch(records, config), rng)
"""

from typing import Dict, List, NamedTuple, Optional, Sequence
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from r3_captioner.attention import (
    BINDINGS,
    VARIANTS,
    QuantizationResult,
    R3MultiHeadAttention,
    codebook_stats,
)
from r3_captioner.errors import ConfigError, ContractError, NumericError, RangeError
from r3_captioner.optim import Adam
from r3_captioner.positions import (
    BiasTable,
    SpatioTemporalTables,
    bias_matrix,
    encode_text_positions,
    encode_video_positions,
    video_position_indices,
)
from r3_captioner.tensor import (
    Tensor,
    add,
    cross_entropy,
    dropout,
    layer_norm,
    make_rng,
    matmul,
    no_grad,
    relu,
    take_rows,
)
from r3_captioner.world import EOS_ID, MASK_ID, PAD_ID, SPECIAL_IDS

logger = logging.getLogger(__name__)

MAX_CAPTION_TOKENS = 50


class R3Config(BaseModel):
    """
    Every hyperparameter of the captioner. vocab_size is left unset
    until the vocabulary of a world is known.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(128, gt=0)
    d_k: int = Field(32, gt=0)
    heads: int = Field(4, gt=0)
    roles: int = Field(64, gt=0)
    beta: float = Field(0.25, ge=0.0)
    spatial_buckets: int = Field(4, gt=0)
    temporal_buckets: int = Field(50, gt=0)
    max_text_len: int = Field(MAX_CAPTION_TOKENS, gt=0, le=MAX_CAPTION_TOKENS)
    encoder_layers: int = Field(2, ge=1)
    decoder_layers: int = Field(2, ge=1)
    feedforward: int = Field(256, gt=0)
    d_feat: int = Field(32, gt=0)
    vocab_size: Optional[int] = None
    mask_rate: float = 0.15
    dropout: float = 0.1
    similarity_dropout: float = 0.1
    learning_rate: float = Field(3e-4, ge=0.0)
    relative_buckets: int = Field(32, gt=0)
    max_distance: int = Field(128, gt=0)
    variant: str = "r3"
    bind: str = "quantized"
    init_std: float = Field(0.02, gt=0.0)
    layer_norm_eps: float = Field(1e-5, gt=0.0)
    seed: int = 0

    @field_validator("mask_rate", "dropout", "similarity_dropout")
    @classmethod
    def check_rate(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError(f"rates must lie in [0, 1), got {value}")
        return value

    @field_validator("vocab_size")
    @classmethod
    def check_vocab(cls, value):
        if value is not None and value <= len(SPECIAL_IDS):
            raise ValueError(f"vocab_size must exceed the {len(SPECIAL_IDS)} special ids")
        return value

    @field_validator("variant")
    @classmethod
    def check_variant(cls, value):
        if value not in VARIANTS:
            raise ValueError(f"{value} not supported, expected one of {VARIANTS}")
        return value

    @field_validator("bind")
    @classmethod
    def check_bind(cls, value):
        if value not in BINDINGS:
            raise ValueError(f"{value} not supported, expected one of {BINDINGS}")
        return value

    @model_validator(mode="after")
    def check_widths(self):
        if self.d_model != self.heads * self.d_k:
            raise ValueError(
                f"d_model ({self.d_model}) must equal heads * d_k ({self.heads} * {self.d_k})"
            )

        if self.relative_buckets % 2:
            raise ValueError("relative_buckets must be even")

        return self


class Batch(BaseModel):
    """
    Padded video and caption arrays for B examples.

    features: [B, Lv, d_feat]
    positions: int [B, Lv, 3] table indices
    video_mask: bool [B, Lv], False on padding
    captions: int [B, Lc] target ids ending with EOS, PAD padded
    caption_mask: bool [B, Lc]
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    positions: np.ndarray
    video_mask: np.ndarray
    captions: Optional[np.ndarray] = None
    caption_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.features.shape[0]


def make_batch(records: Sequence, config: R3Config) -> Batch:
    """
    Pads a list of EpisodeRecords into a Batch. Captions are kept
    only when every record carries one.
    """

    if not records:
        raise ContractError("make_batch needs at least one record")

    lengths = [r.features.shape[0] for r in records]
    width = max(lengths)

    features = np.zeros((len(records), width, config.d_feat))
    positions = np.zeros((len(records), width, 3), dtype=np.int64)
    video_mask = np.zeros((len(records), width), dtype=bool)

    for i, record in enumerate(records):
        if record.features.shape[1] != config.d_feat:
            raise RangeError(
                f"record {i} has {record.features.shape[1]} features, expected {config.d_feat}"
            )

        n = lengths[i]
        features[i, :n] = record.features
        positions[i, :n] = video_position_indices(
            record.positions, config.spatial_buckets, config.temporal_buckets
        )
        video_mask[i, :n] = True

    if any(r.caption is None for r in records):
        return Batch(features=features, positions=positions, video_mask=video_mask)

    caption_len = max(len(r.caption) for r in records) + 1

    if caption_len > config.max_text_len:
        raise RangeError(
            f"caption of {caption_len} tokens exceeds the {config.max_text_len} token limit"
        )

    captions = np.full((len(records), caption_len), PAD_ID, dtype=np.int64)
    caption_mask = np.zeros_like(captions, dtype=bool)

    for i, record in enumerate(records):
        n = len(record.caption)
        captions[i, :n] = record.caption
        captions[i, n] = EOS_ID
        caption_mask[i, : n + 1] = True

    return Batch(
        features=features,
        positions=positions,
        video_mask=video_mask,
        captions=captions,
        caption_mask=caption_mask,
    )


class Linear:
    """
    Affine map x W + b. W starts gaussian, b at zero.

    Args:
        d_in: Input width
        d_out: Output width
        rng: Generator the weights are drawn from
        init_std: Standard deviation of the weight init
    """

    def __init__(self, d_in: int, d_out: int, rng, init_std: float):
        self.weight = Tensor(rng.normal(0.0, init_std, (d_in, d_out)), True)
        self.bias = Tensor(np.zeros(d_out), True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str = "") -> dict:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


class LayerNorm:
    """
    Layer normalization over the model width with a learned gain
    (ones) and bias (zeros).

    Args:
        d_model: Model width
        eps: Added to the variance
    """

    def __init__(self, d_model: int, eps: float):
        self.gain = Tensor(np.ones(d_model), True)
        self.bias = Tensor(np.zeros(d_model), True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix: str = "") -> dict:
        return {f"{prefix}gain": self.gain, f"{prefix}bias": self.bias}


class FeedForward:
    """
    Position-wise two-layer relu network.

    Args:
        d_model: Model width
        width: Hidden width
        rng: Generator for both layers
        init_std: Standard deviation of the weight init
    """

    def __init__(self, d_model: int, width: int, rng, init_std: float):
        self.inner = Linear(d_model, width, rng, init_std)
        self.outer = Linear(width, d_model, rng, init_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu(self.inner(x)))

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            **self.inner.named_parameters(f"{prefix}inner."),
            **self.outer.named_parameters(f"{prefix}outer."),
        }


def _attention(config: R3Config, rng) -> R3MultiHeadAttention:
    return R3MultiHeadAttention(
        d_model=config.d_model,
        heads=config.heads,
        d_k=config.d_k,
        roles=config.roles,
        beta=config.beta,
        similarity_dropout=config.similarity_dropout,
        variant=config.variant,
        bind=config.bind,
        seed=rng,
        init_std=config.init_std,
    )


class EncoderLayer:
    """
    Self-attention and feedforward, each followed by a residual
    add and post-norm.

    Args:
        config: Hyperparameters
        rng: Generator shared by every parameter of the layer
    """

    def __init__(self, config: R3Config, rng):
        self.attention = _attention(config, rng)
        self.norm1 = LayerNorm(config.d_model, config.layer_norm_eps)
        self.feedforward = FeedForward(config.d_model, config.feedforward, rng, config.init_std)
        self.norm2 = LayerNorm(config.d_model, config.layer_norm_eps)

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            **self.attention.named_parameters(f"{prefix}self."),
            **self.norm1.named_parameters(f"{prefix}norm1."),
            **self.feedforward.named_parameters(f"{prefix}ff."),
            **self.norm2.named_parameters(f"{prefix}norm2."),
        }


class DecoderLayer:
    """
    Causal self-attention, cross-attention to the video and
    feedforward, with the same residual pattern as EncoderLayer.
    """

    def __init__(self, config: R3Config, rng):
        self.self_attention = _attention(config, rng)
        self.norm1 = LayerNorm(config.d_model, config.layer_norm_eps)
        self.cross_attention = _attention(config, rng)
        self.norm2 = LayerNorm(config.d_model, config.layer_norm_eps)
        self.feedforward = FeedForward(config.d_model, config.feedforward, rng, config.init_std)
        self.norm3 = LayerNorm(config.d_model, config.layer_norm_eps)

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            **self.self_attention.named_parameters(f"{prefix}self."),
            **self.norm1.named_parameters(f"{prefix}norm1."),
            **self.cross_attention.named_parameters(f"{prefix}cross."),
            **self.norm2.named_parameters(f"{prefix}norm2."),
            **self.feedforward.named_parameters(f"{prefix}ff."),
            **self.norm3.named_parameters(f"{prefix}norm3."),
        }


class Site(NamedTuple):
    """
    Quantization output of one attention site with the rows that
    count towards its loss and statistics.
    """

    result: QuantizationResult
    valid: np.ndarray


class Encoded(NamedTuple):
    states: Tensor
    mask: np.ndarray
    positions: Tensor
    sites: Dict[str, Site]


class Decoded(NamedTuple):
    logits: Tensor
    sites: Dict[str, Site]


class LossRecord(NamedTuple):
    total: Tensor
    ce: Tensor
    l_q: Tensor


class StepRecord(NamedTuple):
    step: int
    total: float
    ce: float
    l_q: float
    perplexity: Dict[str, float]


class Generation(NamedTuple):
    """
    tokens: generated ids without EOS
    roles: site -> one [H] role list per generated token
    encoder_roles: site -> one [H] role list per valid video token
    """

    tokens: List[int]
    roles: Dict[str, List[List[int]]]
    encoder_roles: Dict[str, List[List[int]]]


def _residual(x: Tensor, sublayer: Tensor, norm: LayerNorm, rate: float, rng, training) -> Tensor:
    return norm(add(x, dropout(sublayer, rate, rng, training)))


def _site(sites: dict, name: str, quantization: Optional[QuantizationResult], valid):
    if quantization is not None:
        sites[name] = Site(quantization, np.broadcast_to(valid, quantization.indices.shape))


class R3Captioner:
    """
    Holds every parameter of the captioner.

    Args:
        config: Hyperparameters; vocab_size must be set
    """

    def __init__(self, config: R3Config):
        if config.vocab_size is None:
            raise ConfigError("vocab_size must be resolved before building a model")

        rng = make_rng(config.seed)
        self.config = config

        self.feature_projection = Linear(config.d_feat, config.d_model, rng, config.init_std)
        self.tables = SpatioTemporalTables(
            config.d_model,
            config.spatial_buckets,
            config.temporal_buckets,
            config.max_text_len,
            rng,
            config.init_std,
        )
        self.embedding = Tensor(
            rng.normal(0.0, config.init_std, (config.vocab_size, config.d_model)), True
        )

        def table(bidirectional):
            return BiasTable(
                config.heads,
                bidirectional,
                config.relative_buckets,
                config.max_distance,
                rng,
                config.init_std,
            )

        self.encoder_bias = table(True)
        self.decoder_self_bias = table(False)
        self.decoder_cross_bias = table(True)

        self.encoder = [EncoderLayer(config, rng) for _ in range(config.encoder_layers)]
        self.decoder = [DecoderLayer(config, rng) for _ in range(config.decoder_layers)]
        self.output = Linear(config.d_model, config.vocab_size, rng, config.init_std)

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {
            **self.feature_projection.named_parameters("features."),
            **self.tables.named_parameters("positions."),
            "embedding": self.embedding,
            **self.encoder_bias.named_parameters("bias.encoder."),
            **self.decoder_self_bias.named_parameters("bias.decoder_self."),
            **self.decoder_cross_bias.named_parameters("bias.decoder_cross."),
        }

        for i, layer in enumerate(self.encoder):
            params.update(layer.named_parameters(f"enc{i}."))

        for i, layer in enumerate(self.decoder):
            params.update(layer.named_parameters(f"dec{i}."))

        params.update(self.output.named_parameters("output."))
        return params

    def load_parameters(self, arrays: Dict[str, np.ndarray]):
        """
        Overwrites every parameter from a name -> array mapping.
        """

        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))

        if missing:
            raise ContractError(f"parameters missing: {missing[:5]}")

        for name, param in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ContractError(f"{name}: expected {param.shape}, got {value.shape}")
            param.data = value.copy()
            param.grad = None

    @property
    def site_names(self) -> List[str]:
        names = [f"enc{i}.self" for i in range(len(self.encoder))]
        for i in range(len(self.decoder)):
            names += [f"dec{i}.self", f"dec{i}.cross"]
        return names

    def encode(self, batch: Batch, training: bool = False, rng=None) -> Encoded:
        """
        Runs the encoder stack. The encoder bias is looked up once and
        shared by every layer; absolute positions feed every special
        branch.
        """

        mask = np.asarray(batch.video_mask, dtype=bool)

        if mask.shape[1] == 0 or not mask.any(axis=1).all():
            raise ContractError("every example needs at least one video token")

        config = self.config
        x = self.feature_projection(Tensor._wrap(np.asarray(batch.features, dtype=np.float64)))
        positions = encode_video_positions(batch.positions, self.tables)
        bias = bias_matrix(mask.shape[1], mask.shape[1], self.encoder_bias)
        sites = {}

        for i, layer in enumerate(self.encoder):
            out = layer.attention(
                x,
                x,
                bias=bias,
                query_positions=positions,
                context_positions=positions,
                key_mask=mask,
                query_mask=mask,
                training=training,
                seed=rng,
            )
            _site(sites, f"enc{i}.self", out.quantization, mask[:, None, :])

            x = _residual(x, out.output, layer.norm1, config.dropout, rng, training)
            x = _residual(x, layer.feedforward(x), layer.norm2, config.dropout, rng, training)

        return Encoded(x, mask, positions, sites)

    def decode(
        self,
        inputs: np.ndarray,
        encoded: Encoded,
        training: bool = False,
        rng=None,
        query_mask: Optional[np.ndarray] = None,
    ) -> Decoded:
        """
        Runs the decoder stack on already shifted input ids.

        Args:
            inputs: int [B, L], position 0 holding the bos (pad) id
            encoded: Encoder output
            query_mask: bool [B, L]; False rows are padding
        """

        inputs = np.asarray(inputs, dtype=np.int64)
        length = inputs.shape[1]

        if length > self.config.max_text_len:
            raise RangeError(f"caption of {length} tokens exceeds {self.config.max_text_len}")

        if query_mask is None:
            query_mask = np.ones(inputs.shape, dtype=bool)

        config = self.config
        x = take_rows(self.embedding, inputs)
        text_positions = encode_text_positions(length, self.tables)
        self_bias = bias_matrix(length, length, self.decoder_self_bias)
        cross_bias = bias_matrix(length, encoded.mask.shape[1], self.decoder_cross_bias)
        valid = query_mask[:, None, :]
        sites = {}

        for i, layer in enumerate(self.decoder):
            out = layer.self_attention(
                x,
                x,
                bias=self_bias,
                query_positions=text_positions,
                context_positions=text_positions,
                key_mask=query_mask,
                query_mask=query_mask,
                causal=True,
                training=training,
                seed=rng,
            )
            _site(sites, f"dec{i}.self", out.quantization, valid)
            x = _residual(x, out.output, layer.norm1, config.dropout, rng, training)

            out = layer.cross_attention(
                x,
                encoded.states,
                bias=cross_bias,
                query_positions=text_positions,
                context_positions=encoded.positions,
                key_mask=encoded.mask,
                query_mask=query_mask,
                training=training,
                seed=rng,
            )
            _site(sites, f"dec{i}.cross", out.quantization, valid)
            x = _residual(x, out.output, layer.norm2, config.dropout, rng, training)

            x = _residual(x, layer.feedforward(x), layer.norm3, config.dropout, rng, training)

        return Decoded(self.output(x), sites)


def shift_right(ids: np.ndarray) -> np.ndarray:
    """
    Prepends the bos (pad) id and drops the last position.
    """

    ids = np.asarray(ids, dtype=np.int64)
    shifted = np.full_like(ids, PAD_ID)
    shifted[:, 1:] = ids[:, :-1]
    return shifted


def decoder_forward(
    model: R3Captioner,
    masked_ids: np.ndarray,
    encoded: Encoded,
    training: bool = False,
    rng=None,
    query_mask: Optional[np.ndarray] = None,
) -> Decoded:
    """
    Logits for every position of masked_ids given the encoder states;
    the decoder reads shift_right(masked_ids).
    """

    masked_ids = np.asarray(masked_ids, dtype=np.int64)

    if masked_ids.shape[1] > model.config.max_text_len:
        raise RangeError(
            f"caption of {masked_ids.shape[1]} tokens exceeds {model.config.max_text_len}"
        )

    return model.decode(shift_right(masked_ids), encoded, training, rng, query_mask)


def mask_text(tokens: np.ndarray, rate: float, seed) -> np.ndarray:
    """
    Replaces every non-special token by the mask id with probability
    rate. One uniform draw is taken per position, special or not.
    """

    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"mask rate must lie in [0, 1), got {rate}")

    tokens = np.asarray(tokens, dtype=np.int64)
    draws = make_rng(seed).random(tokens.shape)
    maskable = ~np.isin(tokens, SPECIAL_IDS)

    return np.where(maskable & (draws < rate), MASK_ID, tokens)


def quantization_loss(sites: Dict[str, Site]) -> Tensor:
    total = Tensor(0.0)

    for site in sites.values():
        total = add(total, site.result.loss)

    return total


def training_loss(
    model: R3Captioner, batch: Batch, rng=None, training: bool = True
) -> LossRecord:
    """
    Cross entropy of the unmasked targets given the masked, shifted
    input and the video, plus the quantization loss of every site.

    Args:
        model: Captioner
        batch: Batch with captions
        rng: Integer seed or Generator for masking and dropout
        training: Enables residual and similarity dropout; text
            masking is applied either way

    Returns:
        LossRecord(total, ce, l_q), total = ce + l_q
    """

    return _loss_and_sites(model, batch, rng, training)[0]


def _loss_and_sites(model: R3Captioner, batch: Batch, rng, training: bool):
    if batch.captions is None:
        raise ContractError("training_loss needs captions")

    if not np.asarray(batch.caption_mask).any(axis=1).all():
        raise ContractError("a caption consists only of padding")

    rng = make_rng(rng)
    masked = mask_text(batch.captions, model.config.mask_rate, rng)

    encoded = model.encode(batch, training, rng)
    decoded = decoder_forward(model, masked, encoded, training, rng, batch.caption_mask)
    sites = {**encoded.sites, **decoded.sites}

    ce = cross_entropy(decoded.logits, batch.captions, batch.caption_mask)
    l_q = quantization_loss(sites)

    return LossRecord(add(ce, l_q), ce, l_q), sites


def site_perplexity(sites: Dict[str, Site], roles: int) -> Dict[str, float]:
    """
    Codebook perplexity per site over valid rows, plus "all" pooled
    across sites.
    """

    report, pooled = {}, []

    for name, site in sites.items():
        used = site.result.indices[site.valid]
        if used.size:
            report[name] = codebook_stats(used, roles).perplexity
            pooled.append(used)

    if pooled:
        report["all"] = codebook_stats(np.concatenate(pooled), roles).perplexity

    return report


def train_step(model: R3Captioner, optimizer: Adam, batch: Batch, rng=None) -> StepRecord:
    """
    One fixed-learning-rate Adam update on training_loss.
    """

    optimizer.zero_grad()
    loss, sites = _loss_and_sites(model, batch, rng, True)

    if not np.isfinite(loss.total.item()):
        raise NumericError(
            f"non-finite loss at step {optimizer.step_count + 1}: "
            f"ce={loss.ce.item()} l_q={loss.l_q.item()}"
        )

    loss.total.backward()
    optimizer.step()

    return StepRecord(
        optimizer.step_count,
        loss.total.item(),
        loss.ce.item(),
        loss.l_q.item(),
        site_perplexity(sites, model.config.roles),
    )


def token_accuracy(model: R3Captioner, batch: Batch) -> float:
    """
    Teacher-forced next-token accuracy over non-pad positions with
    an unmasked input.
    """

    with no_grad():
        encoded = model.encode(batch)
        decoded = decoder_forward(model, batch.captions, encoded, query_mask=batch.caption_mask)

    predicted = decoded.logits.data.argmax(axis=-1)
    mask = np.asarray(batch.caption_mask, dtype=bool)

    return float((predicted == batch.captions)[mask].mean())


def generate_greedy(model: R3Captioner, batch: Batch, max_len: int = MAX_CAPTION_TOKENS):
    """
    Greedy autoregressive decoding from the bos id on the unmasked
    running prefix, stopping at EOS or after max_len tokens.

    Returns:
        One Generation per example
    """

    if not 0 < max_len <= model.config.max_text_len:
        raise RangeError(f"max_len must lie in [1, {model.config.max_text_len}], got {max_len}")

    size = batch.size
    tokens = [[] for _ in range(size)]
    roles = [{} for _ in range(size)]
    finished = np.zeros(size, dtype=bool)

    with no_grad():
        encoded = model.encode(batch)
        inputs = np.full((size, 1), PAD_ID, dtype=np.int64)

        for _ in range(max_len):
            decoded = model.decode(inputs, encoded)
            step = decoded.logits.data[:, -1, :].argmax(axis=-1)

            for b in range(size):
                if finished[b]:
                    continue

                if step[b] == EOS_ID:
                    finished[b] = True
                    continue

                tokens[b].append(int(step[b]))
                for name, site in decoded.sites.items():
                    roles[b].setdefault(name, []).append(
                        site.result.indices[b, :, -1].tolist()
                    )

            if finished.all():
                break

            inputs = np.concatenate([inputs, step[:, None]], axis=1)

    generations = []

    for b in range(size):
        valid = encoded.mask[b]
        encoder_roles = {
            name: site.result.indices[b][:, valid].T.tolist()
            for name, site in encoded.sites.items()
        }
        generations.append(Generation(tokens[b], roles[b], encoder_roles))

    logger.debug("generated batch=%d finished=%d", size, int(finished.sum()))
    return generations
