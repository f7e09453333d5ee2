"""3D rotary position embedding over (frame, row, column) token grids.

The head dimension is viewed as D/2 adjacent pairs ``(x[2j], x[2j+1])``; pair
``j`` is rotated as the complex number ``x[2j] + i x[2j+1]`` multiplied by
``exp(i * angle)``. Pairs are split into a temporal band, a height band and a
width band (in that order), each driven by its own position index.

Two application paths exist:

* :func:`apply_rope_global` needs the whole block on the caller and derives
  ``(t, h, w)`` from the token's index in that block.
* :func:`apply_rope_causal_local` works on one rank's contiguous slice and
  derives the same indices from ``rank * L/P + i_local``, so no exchange is
  needed before rotation.

Both paths look up the same table and run the same elementwise arithmetic, so
their results agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PartitionError, PositionRangeError, ShapeError
from .tensor_core import DTYPE, Shape4

DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class GridSpec:
    """Token grid of one generation block: ``frames x height x width``."""

    frames: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.frames, self.height, self.width) < 1:
            raise ConfigurationError(f"grid extents must be >= 1, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def seq_len(self) -> int:
        return self.frames * self.height * self.width


@dataclass(frozen=True)
class BlockContext:
    block_index: int
    block_size: int

    @property
    def start_frame(self) -> int:
        return self.block_index * self.block_size


def default_band_split(head_dim: int) -> tuple[int, int, int]:
    """Equal height/width bands; the temporal band takes the remainder."""
    if head_dim < 2 or head_dim % 2:
        raise ConfigurationError(f"head_dim must be even and >= 2, got {head_dim}")
    pairs = head_dim // 2
    spatial = pairs // 3
    return (pairs - 2 * spatial, spatial, spatial)


def band_inverse_frequencies(pairs: int, base: float) -> np.ndarray:
    """``base ** (-2j / (2 * pairs))`` for ``j in range(pairs)``."""
    if pairs == 0:
        return np.zeros(0, dtype=DTYPE)
    j = np.arange(pairs, dtype=DTYPE)
    return base ** (-(2.0 * j) / (2.0 * pairs))


def _check_split(head_dim: int, band_split: tuple[int, int, int]) -> None:
    if head_dim < 2 or head_dim % 2:
        raise ConfigurationError(f"head_dim must be even and >= 2, got {head_dim}")
    if any(p < 0 for p in band_split) or sum(band_split) != head_dim // 2:
        raise ConfigurationError(
            f"band split {tuple(band_split)} must be non-negative and sum to D/2 = {head_dim // 2}"
        )


def _cos_sin_pairs(positions: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    angles = positions.astype(DTYPE)[:, None] * inv_freq[None, :]
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


@dataclass(frozen=True)
class RopeFrequencyTable:
    """Fully materialized cos/sin pairs for every frame, row and column.

    ``temporal[m, j]`` holds ``(cos, sin)`` of ``m * inv_freq_t[j]``; likewise
    for ``height`` and ``width``. Arrays are C-contiguous and read-only.
    """

    band_split: tuple[int, int, int]
    base: float | None
    inv_freqs: tuple[np.ndarray, np.ndarray, np.ndarray]
    temporal: np.ndarray = field(repr=False)
    height: np.ndarray = field(repr=False)
    width: np.ndarray = field(repr=False)

    @classmethod
    def from_inverse_frequencies(
        cls,
        max_frames: int,
        max_h: int,
        max_w: int,
        inv_freqs: tuple[np.ndarray, np.ndarray, np.ndarray],
        base: float | None = None,
    ) -> "RopeFrequencyTable":
        if min(max_frames, max_h, max_w) < 1:
            raise ConfigurationError("table extents must be >= 1")
        inv = tuple(np.ascontiguousarray(np.asarray(f, dtype=DTYPE).reshape(-1)) for f in inv_freqs)
        tables = []
        for n, f in zip((max_frames, max_h, max_w), inv):
            t = np.ascontiguousarray(_cos_sin_pairs(np.arange(n), f))
            t.setflags(write=False)
            f.setflags(write=False)
            tables.append(t)
        split = tuple(len(f) for f in inv)
        return cls(split, base, inv, *tables)

    @property
    def head_dim(self) -> int:
        return 2 * sum(self.band_split)

    @property
    def max_frames(self) -> int:
        return self.temporal.shape[0]

    @property
    def max_h(self) -> int:
        return self.height.shape[0]

    @property
    def max_w(self) -> int:
        return self.width.shape[0]

    def angles(self, band: int) -> np.ndarray:
        """Stored angle grid of one band (0 temporal, 1 height, 2 width)."""
        n = (self.max_frames, self.max_h, self.max_w)[band]
        return np.arange(n, dtype=DTYPE)[:, None] * self.inv_freqs[band][None, :]

    def cos_sin(self, t: np.ndarray, h: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-token ``(cos, sin)`` of shape (S, D/2), pure reads from the table."""
        _check_range(t, self.max_frames, "frame")
        _check_range(h, self.max_h, "row")
        _check_range(w, self.max_w, "column")
        pairs = np.concatenate([self.temporal[t], self.height[h], self.width[w]], axis=1)
        return pairs[..., 0], pairs[..., 1]


class DynamicFrequencies:
    """Recomputes cos/sin for the requested positions on every lookup.

    Stands in for an on-demand frequency path; ``evaluations`` counts how many
    angles were produced, which is the work the precomputed table avoids.
    """

    def __init__(self, inv_freqs: tuple[np.ndarray, np.ndarray, np.ndarray]):
        self.inv_freqs = tuple(np.asarray(f, dtype=DTYPE).reshape(-1) for f in inv_freqs)
        self.band_split = tuple(len(f) for f in self.inv_freqs)
        self.evaluations = 0

    @classmethod
    def from_base(cls, head_dim: int, base: float = DEFAULT_BASE, band_split=None) -> "DynamicFrequencies":
        band_split = tuple(band_split) if band_split is not None else default_band_split(head_dim)
        _check_split(head_dim, band_split)
        return cls(tuple(band_inverse_frequencies(p, base) for p in band_split))

    @classmethod
    def like(cls, table: RopeFrequencyTable) -> "DynamicFrequencies":
        return cls(table.inv_freqs)

    @property
    def head_dim(self) -> int:
        return 2 * sum(self.band_split)

    def cos_sin(self, t, h, w):
        parts = []
        for pos, f in zip((t, h, w), self.inv_freqs):
            parts.append(_cos_sin_pairs(np.asarray(pos), f))
            self.evaluations += len(pos) * len(f)
        pairs = np.concatenate(parts, axis=1)
        return pairs[..., 0], pairs[..., 1]


def _check_range(idx: np.ndarray, limit: int, what: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise PositionRangeError(
            f"{what} index range [{idx.min()}, {idx.max()}] exceeds table extent {limit}"
        )


def precompute_frequencies(
    max_frames: int,
    max_h: int,
    max_w: int,
    head_dim: int,
    base: float = DEFAULT_BASE,
    band_split: tuple[int, int, int] | None = None,
) -> RopeFrequencyTable:
    band_split = tuple(band_split) if band_split is not None else default_band_split(head_dim)
    _check_split(head_dim, band_split)
    inv = tuple(band_inverse_frequencies(p, base) for p in band_split)
    return RopeFrequencyTable.from_inverse_frequencies(max_frames, max_h, max_w, inv, base=base)


def global_time_index(i_local: int, rank: int, local_len: int, grid_hw: int, start_frame: int) -> int:
    """Frame index, offset by ``start_frame``, of a rank-local token."""
    return start_frame + (rank * local_len + i_local) // grid_hw


def token_positions(grid: GridSpec, offset: int, count: int, start_frame: int):
    """``(t_global, h, w)`` index arrays for block tokens ``offset .. offset+count``.

    Tokens are ordered frame-major, then row, then column.
    """
    i_global = np.arange(offset, offset + count)
    hw = grid.tokens_per_frame
    t = start_frame + i_global // hw
    rem = i_global % hw
    return t, rem // grid.width, rem % grid.width


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """``(a, b) -> (a cos - b sin, a sin + b cos)`` on adjacent pairs.

    ``cos``/``sin`` are (S, D/2) and broadcast over batch and heads.
    """
    b, s, h, d = x.shape
    xp = x.reshape(b, s, h, d // 2, 2)
    a, bb = xp[..., 0], xp[..., 1]
    c = cos[None, :, None, :]
    sn = sin[None, :, None, :]
    out = np.empty_like(xp)
    out[..., 0] = a * c - bb * sn
    out[..., 1] = a * sn + bb * c
    return out.reshape(b, s, h, d)


def _check_dims(x: np.ndarray, table) -> Shape4:
    shape = Shape4.of(x)
    if shape.head_dim != table.head_dim:
        raise ShapeError(f"tensor head_dim {shape.head_dim} != frequency head_dim {table.head_dim}")
    return shape


def apply_rope_global(x: np.ndarray, grid: GridSpec, table, start_frame: int) -> np.ndarray:
    """Rotate a full block (B, F*Hg*Wg, H, D) with frames offset by ``start_frame``."""
    shape = _check_dims(x, table)
    if shape.seq != grid.seq_len:
        raise ShapeError(f"sequence length {shape.seq} != F*H*W = {grid.seq_len}")
    cos, sin = table.cos_sin(*token_positions(grid, 0, shape.seq, start_frame))
    return rotate_pairs(x, cos, sin)


def apply_rope_causal_local(
    x_local: np.ndarray, grid: GridSpec, table, start_frame: int, rank: int, world: int
) -> np.ndarray:
    """Rotate rank ``rank``'s contiguous L/P slice without seeing other ranks."""
    shape = _check_dims(x_local, table)
    if grid.seq_len % world:
        raise PartitionError(f"block length {grid.seq_len} not divisible by world size {world}")
    local_len = grid.seq_len // world
    if shape.seq != local_len:
        raise ShapeError(f"local sequence length {shape.seq} != L/P = {local_len}")
    if not 0 <= rank < world:
        raise ConfigurationError(f"rank {rank} outside world of size {world}")
    cos, sin = table.cos_sin(*token_positions(grid, rank * local_len, local_len, start_frame))
    return rotate_pairs(x_local, cos, sin)
