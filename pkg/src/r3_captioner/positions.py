"""
Positional information for the captioner: bucketed spatio-temporal
embeddings for video tokens, a separate temporal table for text, and
relative-position bias buckets for the general attention branch.

Typical Usage:

>>> from r3_captioner.positions import spatiotemporal_index
>>> spatiotemporal_index(0, (0.0, 0.0, 1.0, 1.0), N=4, T=50)
(0, 10, 15)
"""

from typing import Iterable, Tuple

import numpy as np

from r3_captioner.errors import ConfigError, ContractError, RangeError
from r3_captioner.tensor import Tensor, add, make_rng, take_rows, transpose


def video_position_indices(positions: np.ndarray, N: int, T: int) -> np.ndarray:
    """
    Vectorized form of spatiotemporal_index.

    Args:
        positions: float array [..., 5] holding (t, x0, y0, x1, y1)
        N: Spatial buckets per axis (N * N regions)
        T: Temporal buckets

    Returns:
        int array [..., 3] holding (t_idx, rc_idx, rs_idx)
    """

    positions = np.asarray(positions, dtype=np.float64)

    if positions.shape[-1:] != (5,):
        raise RangeError(f"positions need a trailing axis of 5, got {positions.shape}")

    t, x0, y0, x1, y1 = np.moveaxis(positions, -1, 0)

    if np.any(t < 0) or np.any(t >= T) or np.any(t != np.floor(t)):
        raise RangeError(f"temporal index must be an integer in [0, {T})")

    inside = (
        (x0 >= 0) & (y0 >= 0) & (x1 <= 1) & (y1 <= 1) & (x0 <= x1) & (y0 <= y1)
    )

    if not np.all(inside):
        raise RangeError("bounding box lies outside the unit square")

    def bucket(value):
        return np.minimum(np.floor(value * N).astype(np.int64), N - 1)

    center = bucket((y0 + y1) / 2) * N + bucket((x0 + x1) / 2)
    size = bucket(np.abs(y1 - y0)) * N + bucket(np.abs(x1 - x0))

    return np.stack([t.astype(np.int64), center, size], axis=-1)


def spatiotemporal_index(
    t: int, box: Tuple[float, float, float, float], N: int, T: int
) -> Tuple[int, int, int]:
    """
    Maps a timestamp bucket and a bounding box to the row indices of
    the temporal, region-center and region-size tables.

    Args:
        t: Temporal bucket, 0 <= t < T
        box: (x0, y0, x1, y1) inside the unit square
        N: Spatial buckets per axis
        T: Temporal buckets

    Returns:
        (t_idx, rc_idx, rs_idx)
    """

    row = video_position_indices(np.array([t, *box], dtype=np.float64), N, T)
    return int(row[0]), int(row[1]), int(row[2])


class SpatioTemporalTables:
    """
    The four learnable position tables: video temporal (T rows),
    region center (N*N rows), region size (N*N rows) and the text
    temporal table (L_text rows).
    """

    def __init__(
        self,
        d_model: int,
        N: int,
        T: int,
        L_text: int,
        seed=0,
        init_std: float = 0.02,
    ):
        rng = make_rng(seed)

        self.N = N
        self.T = T
        self.L_text = L_text
        self.temporal = Tensor(rng.normal(0.0, init_std, (T, d_model)), True)
        self.region_center = Tensor(rng.normal(0.0, init_std, (N * N, d_model)), True)
        self.region_size = Tensor(rng.normal(0.0, init_std, (N * N, d_model)), True)
        self.text_temporal = Tensor(rng.normal(0.0, init_std, (L_text, d_model)), True)

    def named_parameters(self, prefix: str = "") -> dict:
        return {
            f"{prefix}temporal": self.temporal,
            f"{prefix}region_center": self.region_center,
            f"{prefix}region_size": self.region_size,
            f"{prefix}text_temporal": self.text_temporal,
        }


def encode_video_positions(indices: np.ndarray, tables: SpatioTemporalTables) -> Tensor:
    """
    Sums the three table rows selected for every video token.

    Args:
        indices: int array [..., 3] from video_position_indices
        tables: Position tables

    Returns:
        Tensor[..., d_model]
    """

    indices = np.asarray(indices, dtype=np.int64)

    return add(
        add(
            take_rows(tables.temporal, indices[..., 0]),
            take_rows(tables.region_center, indices[..., 1]),
        ),
        take_rows(tables.region_size, indices[..., 2]),
    )


def encode_text_positions(length: int, tables: SpatioTemporalTables) -> Tensor:
    """
    Returns the first length rows of the text temporal table.
    """

    if length > tables.L_text:
        raise RangeError(f"text length {length} exceeds {tables.L_text}")

    return take_rows(tables.text_temporal, np.arange(length))


def relative_buckets(
    offsets,
    num_buckets: int = 32,
    max_distance: int = 128,
    bidirectional: bool = True,
) -> np.ndarray:
    """
    Vectorized relative-position bucketing for key-minus-query
    offsets. Small distances get their own bucket, larger ones share
    logarithmically wider buckets up to max_distance and saturate
    beyond it. Bidirectional mode gives keys after the query the
    upper half of the buckets; causal mode folds them onto bucket 0.
    """

    if bidirectional and num_buckets % 2:
        raise ConfigError(f"bidirectional bucketing needs an even count, got {num_buckets}")

    distance = -np.asarray(offsets, dtype=np.int64)
    buckets = np.zeros_like(distance)

    if bidirectional:
        num_buckets //= 2
        buckets = buckets + (distance < 0) * num_buckets
        distance = np.abs(distance)
    else:
        distance = np.maximum(distance, 0)

    max_exact = num_buckets // 2
    scaled = np.log(np.maximum(distance, 1) / max_exact) / np.log(max_distance / max_exact)
    large = max_exact + (scaled * (num_buckets - max_exact)).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)

    return buckets + np.where(distance < max_exact, distance, large)


def relative_bucket(
    offset: int,
    num_buckets: int = 32,
    max_distance: int = 128,
    bidirectional: bool = True,
) -> int:
    return int(relative_buckets(offset, num_buckets, max_distance, bidirectional))


class BiasTable:
    """
    One learnable scalar per (bucket, head). The model owns three:
    encoder self-attention, decoder self-attention (causal) and
    decoder cross-attention.
    """

    def __init__(
        self,
        heads: int,
        bidirectional: bool,
        num_buckets: int = 32,
        max_distance: int = 128,
        seed=0,
        init_std: float = 0.02,
    ):
        self.heads = heads
        self.bidirectional = bidirectional
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.buckets = Tensor(make_rng(seed).normal(0.0, init_std, (num_buckets, heads)), True)

    def named_parameters(self, prefix: str = "") -> dict:
        return {f"{prefix}buckets": self.buckets}


def bias_matrix(len_q: int, len_k: int, table: BiasTable) -> Tensor:
    """
    Looks up the per-head bias for every (query, key) pair.

    Returns:
        Tensor[H, len_q, len_k] with entry (h, i, j) equal to
        table.buckets[relative_bucket(j - i), h]
    """

    if len_q <= 0 or len_k <= 0:
        raise ContractError(f"bias_matrix needs positive lengths, got {len_q}x{len_k}")

    offsets = np.arange(len_k)[None, :] - np.arange(len_q)[:, None]
    buckets = relative_buckets(
        offsets, table.num_buckets, table.max_distance, table.bidirectional
    )

    return transpose(take_rows(table.buckets, buckets), (2, 0, 1))


def iter_boxes(grid: int) -> Iterable[Tuple[int, int, Tuple[float, float, float, float]]]:
    """
    Yields (row, col, box) for every cell of a grid x grid partition
    of the unit square, row-major.
    """

    for row in range(grid):
        for col in range(grid):
            yield row, col, (col / grid, row / grid, (col + 1) / grid, (row + 1) / grid)
