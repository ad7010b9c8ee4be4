"""
Role-aware multi-head attention.

Two attention branches run side by side with independent weights.
The special branch attends with scaled dot products and snaps every
per-head output onto the nearest role in a codebook shared by all
heads, passing gradients straight through. The general branch
attends without scaling and adds a learned relative-position bias.
The layer output binds the two per head with a Hadamard product,
merges heads and applies an output projection.

Typical Usage:

>>> from r3_captioner.attention import R3MultiHeadAttention
>>> layer = R3MultiHeadAttention(d_model=8, heads=2, d_k=4, roles=4, seed=0)
>>> out = layer(x, x, bias=bias)
"""

from typing import NamedTuple, Optional
import math
import logging

import numpy as np

from r3_captioner.errors import ContractError, DimensionError, RangeError
from r3_captioner.tensor import (
    Tensor,
    add,
    l2_normalize,
    make_rng,
    matmul,
    mul,
    reshape,
    softmax,
    stop_gradient,
    straight_through,
    sub,
    take_rows,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

VARIANTS = ("r3", "baseline")
BINDINGS = ("quantized", "continuous")


class RoleCodebook:
    """
    K x d_k role embeddings shared by every head of one attention
    site. Rows are stored raw and normalized at lookup time.
    """

    def __init__(self, roles: int, d_k: int, similarity_dropout: float = 0.1, seed=0):
        self.embeddings = Tensor(make_rng(seed).normal(0.0, 1.0, (roles, d_k)), True)
        self.similarity_dropout = similarity_dropout

    @property
    def roles(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_k(self) -> int:
        return self.embeddings.shape[1]


class BranchWeights:
    """
    Query, key and value projections of one branch. Each matrix is
    d_model x (H * d_k); head h owns columns h*d_k .. (h+1)*d_k.
    """

    def __init__(self, d_model: int, heads: int, d_k: int, seed=0, init_std: float = 0.02):
        rng = make_rng(seed)
        width = heads * d_k

        self.heads = heads
        self.w_q = Tensor(rng.normal(0.0, init_std, (d_model, width)), True)
        self.w_k = Tensor(rng.normal(0.0, init_std, (d_model, width)), True)
        self.w_v = Tensor(rng.normal(0.0, init_std, (d_model, width)), True)

    def named_parameters(self, prefix: str = "") -> dict:
        return {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k, f"{prefix}w_v": self.w_v}


class QuantizationResult(NamedTuple):
    """
    z_q: straight-through values, same shape as the input
    indices: selected role per row (input shape without d_k)
    loss: scalar dictionary + beta * commitment loss
    """

    z_q: Tensor
    indices: np.ndarray
    loss: Tensor


class AttentionOutput(NamedTuple):
    output: Tensor
    quantization: Optional[QuantizationResult]


class CodebookStats(NamedTuple):
    histogram: np.ndarray
    perplexity: float


def split_heads(x: Tensor, heads: int) -> Tensor:
    """
    [..., L, H*d_k] -> [..., H, L, d_k]
    """

    *lead, length, width = x.shape

    if width % heads:
        raise DimensionError(f"width {width} is not divisible by {heads} heads")

    x = reshape(x, (*lead, length, heads, width // heads))
    n = len(lead)
    return transpose(x, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """
    [..., H, L, d_k] -> [..., L, H*d_k]
    """

    *lead, heads, length, d_k = x.shape
    n = len(lead)
    x = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(x, (*lead, length, heads * d_k))


def project_qkv(
    q_in: Tensor, k_in: Tensor, v_in: Tensor, weights: BranchWeights
) -> tuple:
    """
    Projects the inputs of one branch into per-head queries, keys
    and values. No bias terms.

    Returns:
        (Q, K, V), each Tensor[..., H, L, d_k]
    """

    return (
        split_heads(matmul(q_in, weights.w_q), weights.heads),
        split_heads(matmul(k_in, weights.w_k), weights.heads),
        split_heads(matmul(v_in, weights.w_v), weights.heads),
    )


def _attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float,
    bias: Optional[Tensor],
    mask: Optional[np.ndarray],
    causal: bool,
) -> Tensor:
    if k.shape[-2] == 0:
        raise ContractError("attention over an empty context")

    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in length")

    scores = matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)))

    if scale != 1.0:
        scores = mul(scores, scale)

    if bias is not None:
        if bias.shape != scores.shape[-bias.ndim:]:
            raise DimensionError(f"bias {bias.shape} does not match scores {scores.shape}")
        scores = add(scores, bias)

    additive = np.zeros(scores.shape[-2:])

    if causal:
        additive = np.where(np.triu(np.ones(scores.shape[-2:], dtype=bool), k=1), -np.inf, 0.0)

    if mask is not None:
        additive = additive + np.where(np.asarray(mask, dtype=bool), 0.0, -np.inf)

    additive = np.broadcast_to(additive, scores.shape)

    if np.isneginf(additive).all(axis=-1).any():
        raise ContractError("an attention row has every key masked")

    if np.isneginf(additive).any():
        scores = add(scores, Tensor._wrap(np.ascontiguousarray(additive)))

    return matmul(softmax(scores, axis=-1), v)


def special_relativity(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[np.ndarray] = None,
    causal: bool = False,
) -> Tensor:
    """
    Scaled dot-product attention, softmax(Q K^T / sqrt(d_k)) V.
    With K and V taken from the other modality this is the
    cross-modal form.

    Args:
        q: Tensor[..., Lq, d_k]
        k: Tensor[..., Lk, d_k]
        v: Tensor[..., Lk, d_k]
        mask: bool array broadcastable to [..., Lq, Lk]; False hides a key
        causal: Hide keys after the query position
    """

    return _attend(q, k, v, 1.0 / math.sqrt(q.shape[-1]), None, mask, causal)


def general_relativity(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Optional[Tensor] = None,
    causal: bool = False,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Unscaled attention with an additive relative-position bias,
    softmax(Q K^T + b) V.

    Args:
        bias: Tensor[H, Lq, Lk] (or matching trailing axes of the scores)
        causal: Hide keys after the query position
        mask: bool key-validity mask broadcastable to the scores
    """

    return _attend(q, k, v, 1.0, bias, mask, causal)


def quantize(
    x: Tensor,
    codebook: RoleCodebook,
    training: bool = False,
    seed=None,
    beta: float = 0.25,
    valid: Optional[np.ndarray] = None,
) -> QuantizationResult:
    """
    Snaps every d_k row of x onto its most similar codebook role.

    Rows and roles are L2-normalized first (zero rows are left as
    they are). In training each similarity is dropped with the
    codebook's dropout rate and the argmax runs over the surviving
    roles only; ties go to the lowest role index. The forward
    value is the selected normalized role, the backward pass treats
    the lookup as identity on x.

    Args:
        x: Tensor[..., d_k]
        codebook: Shared role codebook
        training: Enables similarity dropout
        seed: Integer seed or Generator for the dropout mask
        beta: Weight of the commitment term
        valid: Optional bool array of shape x.shape[:-1]; only valid
            rows contribute to the loss

    Returns:
        QuantizationResult with z_q, indices and the averaged loss
    """

    if x.shape[-1] != codebook.d_k:
        raise DimensionError(f"input width {x.shape[-1]} vs codebook width {codebook.d_k}")

    x_unit = l2_normalize(x)
    roles_unit = l2_normalize(codebook.embeddings)

    similarities = x_unit.data @ roles_unit.data.T
    rate = codebook.similarity_dropout

    if training and rate > 0.0:
        keep = make_rng(seed).random(similarities.shape) >= rate
        # a row that loses every role keeps them all
        keep |= ~keep.any(axis=-1, keepdims=True)
        similarities = np.where(keep, similarities, -np.inf)

    indices = np.argmax(similarities, axis=-1)
    selected = take_rows(roles_unit, indices)
    z_q = straight_through(x, selected.data)

    dictionary = sub(stop_gradient(x_unit), selected)
    commitment = sub(x_unit, stop_gradient(selected))
    per_row = add(
        tensor_sum(mul(dictionary, dictionary), axis=-1),
        mul(tensor_sum(mul(commitment, commitment), axis=-1), beta),
    )

    weights = np.ones(x.shape[:-1]) if valid is None else np.broadcast_to(valid, x.shape[:-1])
    count = weights.sum()

    if count == 0:
        raise ContractError("quantize: no valid rows")

    loss = tensor_sum(mul(per_row, Tensor._wrap(np.asarray(weights, dtype=np.float64) / count)))

    return QuantizationResult(z_q, indices, loss)


def r3_bind(z_q: Optional[Tensor], x_g: Tensor, w_o: Tensor) -> Tensor:
    """
    Per-head Hadamard product of the role output and the general
    output, heads merged, then projected by w_o.

    Args:
        z_q: Tensor[..., H, L, d_k], or None to bind with constant ones
        x_g: Tensor[..., H, L, d_k]
        w_o: Tensor[H*d_k, d_model]
    """

    if z_q is not None:
        if z_q.shape != x_g.shape:
            raise DimensionError(f"r3_bind: {z_q.shape} vs {x_g.shape}")
        x_g = mul(z_q, x_g)

    return matmul(merge_heads(x_g), w_o)


def codebook_stats(indices: np.ndarray, roles: int) -> CodebookStats:
    """
    Usage histogram over roles and the perplexity exp(entropy) of the
    empirical role distribution.
    """

    indices = np.asarray(indices, dtype=np.int64).reshape(-1)

    if indices.size == 0:
        raise ContractError("codebook_stats needs at least one index")

    if indices.min() < 0 or indices.max() >= roles:
        raise RangeError(f"role index outside [0, {roles})")

    histogram = np.bincount(indices, minlength=roles)
    probs = histogram[histogram > 0] / indices.size

    return CodebookStats(histogram, float(np.exp(-np.sum(probs * np.log(probs)))))


class R3MultiHeadAttention:
    """
    One attention site: special and general branch weights, a role
    codebook and the output projection.

    Args:
        d_model: Model width
        heads: Number of heads H
        d_k: Per-head width
        roles: Codebook size K
        beta: Commitment weight
        similarity_dropout: Dropout on role similarities in training
        variant: "r3", or "baseline" to bind with constant ones
        bind: "quantized" binds z_q, "continuous" binds the
            pre-quantization special output
        seed: Integer seed or Generator for initialization
        init_std: Standard deviation of projection init
    """

    def __init__(
        self,
        d_model: int,
        heads: int,
        d_k: int,
        roles: int,
        beta: float = 0.25,
        similarity_dropout: float = 0.1,
        variant: str = "r3",
        bind: str = "quantized",
        seed=0,
        init_std: float = 0.02,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"{variant} not supported.")

        if bind not in BINDINGS:
            raise ValueError(f"{bind} not supported.")

        rng = make_rng(seed)

        self.heads = heads
        self.d_k = d_k
        self.beta = beta
        self.variant = variant
        self.bind = bind
        self.special = BranchWeights(d_model, heads, d_k, rng, init_std)
        self.general = BranchWeights(d_model, heads, d_k, rng, init_std)
        self.codebook = RoleCodebook(roles, d_k, similarity_dropout, rng)
        self.w_o = Tensor(rng.normal(0.0, init_std, (heads * d_k, d_model)), True)

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            **self.special.named_parameters(f"{prefix}special."),
            **self.general.named_parameters(f"{prefix}general."),
            f"{prefix}codebook": self.codebook.embeddings,
            f"{prefix}w_o": self.w_o,
        }

    def __call__(
        self,
        query: Tensor,
        context: Tensor,
        *,
        bias: Optional[Tensor] = None,
        query_positions: Optional[Tensor] = None,
        context_positions: Optional[Tensor] = None,
        key_mask: Optional[np.ndarray] = None,
        query_mask: Optional[np.ndarray] = None,
        causal: bool = False,
        training: bool = False,
        seed=None,
    ) -> AttentionOutput:
        """
        Runs both branches and binds them.

        Args:
            query: Tensor[B, Lq, d_model]
            context: Tensor[B, Lk, d_model] (the query itself for
                self-attention)
            bias: Relative-position bias Tensor[H, Lq, Lk]
            query_positions / context_positions: absolute position
                embeddings added to the special branch inputs only
            key_mask: bool [B, Lk], False marks padding
            query_mask: bool [B, Lq], rows excluded from the role loss
            causal: Hide keys after each query position
            training: Enables similarity dropout
            seed: Integer seed or Generator for dropout
        """

        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, None, :]
        quantization = None
        roles = None

        if self.variant == "r3":
            special_query = query if query_positions is None else add(query, query_positions)
            special_context = (
                context if context_positions is None else add(context, context_positions)
            )

            q, k, v = project_qkv(special_query, special_context, special_context, self.special)
            x_s = special_relativity(q, k, v, mask=mask, causal=causal)

            valid = None
            if query_mask is not None:
                valid = np.broadcast_to(
                    np.asarray(query_mask, dtype=bool)[..., None, :], x_s.shape[:-1]
                )

            quantization = quantize(x_s, self.codebook, training, seed, self.beta, valid)
            roles = quantization.z_q if self.bind == "quantized" else x_s

        q, k, v = project_qkv(query, context, context, self.general)
        x_g = general_relativity(q, k, v, bias=bias, causal=causal, mask=mask)

        return AttentionOutput(r3_bind(roles, x_g, self.w_o), quantization)
