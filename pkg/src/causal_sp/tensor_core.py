"""Dense (B, S, H, D) float64 arrays and the attention kernel built on them.

Tensors are plain ``numpy.ndarray`` objects in row-major (batch, seq, heads,
head_dim) order. :class:`Shape4` carries the validation rules; everything else
accepts and returns arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

BATCH, SEQ, HEADS, HEAD_DIM = 0, 1, 2, 3
AXIS_NAMES = {"batch": BATCH, "seq": SEQ, "heads": HEADS, "head_dim": HEAD_DIM}

DTYPE = np.float64


@dataclass(frozen=True)
class Shape4:
    batch: int
    seq: int
    heads: int
    head_dim: int

    def __post_init__(self):
        dims = self.as_tuple()
        if any(int(d) != d or d < 1 for d in dims):
            raise ShapeError(f"all extents must be positive integers, got {dims}")
        if self.head_dim % 2:
            raise ShapeError(f"head_dim must be even for pairwise rotation, got {self.head_dim}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.seq, self.heads, self.head_dim)

    @property
    def numel(self) -> int:
        return self.batch * self.seq * self.heads * self.head_dim

    @classmethod
    def of(cls, x: np.ndarray) -> "Shape4":
        if x.ndim != 4:
            raise ShapeError(f"expected a 4-axis (B, S, H, D) tensor, got ndim={x.ndim}")
        return cls(*x.shape)


def axis_index(dim: int | str) -> int:
    """Resolve an axis given by name (``"seq"``) or position."""
    if isinstance(dim, str):
        try:
            return AXIS_NAMES[dim]
        except KeyError:
            raise ShapeError(f"unknown axis name {dim!r}") from None
    if not 0 <= dim < 4:
        raise ShapeError(f"axis {dim} out of range for a 4-axis tensor")
    return dim


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional integer stream path.

    PCG64 and SeedSequence are specified bit-for-bit by numpy, so identical
    keys yield identical streams on every platform.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def random_tensor(shape: Shape4 | tuple[int, int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Standard-normal draws scaled by ``1/sqrt(D)``; consumes exactly B*S*H*D normals."""
    if not isinstance(shape, Shape4):
        shape = Shape4(*shape)
    data = rng.standard_normal(shape.numel, dtype=DTYPE)
    return (data / np.sqrt(shape.head_dim)).reshape(shape.as_tuple())


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=axis, keepdims=True)


def scaled_dot_product_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unmasked softmax(q k^T / sqrt(D)) v, independently per batch and head.

    q is (B, S_q, H, D); k and v are (B, S_kv, H, D). Causality is the
    caller's job: only the keys it passes in are visible.
    """
    sq, sk, sv = Shape4.of(q), Shape4.of(k), Shape4.of(v)
    if sk != sv:
        raise ShapeError(f"k and v shapes differ: {sk.as_tuple()} vs {sv.as_tuple()}")
    if (sq.batch, sq.heads, sq.head_dim) != (sk.batch, sk.heads, sk.head_dim):
        raise ShapeError(f"q {sq.as_tuple()} incompatible with k/v {sk.as_tuple()}")

    qh = q.transpose(0, 2, 1, 3)  # (B, H, S_q, D)
    kh = k.transpose(0, 2, 1, 3)
    vh = v.transpose(0, 2, 1, 3)
    logits = np.matmul(qh, kh.transpose(0, 1, 3, 2)) / np.sqrt(sq.head_dim)
    out = np.matmul(softmax(logits), vh)
    return np.ascontiguousarray(out.transpose(0, 2, 1, 3))


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalize every token over its (heads, head_dim) features."""
    return x / np.sqrt(np.mean(x * x, axis=(HEADS, HEAD_DIM), keepdims=True) + eps)


def allclose(a: np.ndarray, b: np.ndarray, abs_tol: float = 0.0, rel_tol: float = 0.0) -> bool:
    """True iff ``|a - b| <= abs_tol + rel_tol * |b|`` everywhere."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(np.abs(a - b) <= abs_tol + rel_tol * np.abs(b)))


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))
