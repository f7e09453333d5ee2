"""Self-attention pipelines: single-rank reference, baseline SP and optimized SP.

The baseline gathers q, k and v along the sequence, rotates the full block,
then splits heads. The optimized pipeline rotates each rank's slice locally
and exchanges q, k and v in one fused all-to-all (sequence gather + head
split). Three :class:`Ablation` flags switch each optimization on
independently; the baseline is the all-off point of that lattice.

Every pipeline ends with an all-to-all that restores sequence sharding,
followed by the output projection applied locally.
"""

from __future__ import annotations

import enum
import itertools
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .collectives import CommStats, CommWorld, Communicator, split_heads
from .errors import PartitionError
from .kv_cache import KvCache
from .rope import DynamicFrequencies, GridSpec, RopeFrequencyTable, apply_rope_causal_local, apply_rope_global
from .tensor_core import DTYPE, HEADS, SEQ, Shape4, scaled_dot_product_attention

STAGES = ("qkv", "gather_or_fused", "rope", "cache", "attention", "output_exchange")


@dataclass(frozen=True)
class AttentionLayerParams:
    """Square (H*D, H*D) projections, replicated on every rank."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @classmethod
    def random(cls, heads: int, head_dim: int, rng: np.random.Generator) -> "AttentionLayerParams":
        n = heads * head_dim
        mats = [rng.standard_normal((n, n), dtype=DTYPE) / np.sqrt(n) for _ in range(4)]
        return cls(*mats)

    @classmethod
    def zeros(cls, heads: int, head_dim: int) -> "AttentionLayerParams":
        n = heads * head_dim
        return cls(*(np.zeros((n, n), dtype=DTYPE) for _ in range(4)))

    @classmethod
    def identity(cls, heads: int, head_dim: int) -> "AttentionLayerParams":
        n = heads * head_dim
        return cls(*(np.eye(n, dtype=DTYPE) for _ in range(4)))


def project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, s, h, d = x.shape
    return (x.reshape(b, s, h * d) @ w).reshape(b, s, h, d)


@dataclass(frozen=True)
class Ablation:
    use_fused_all_to_all: bool = False
    use_local_rope: bool = False
    use_precomputed_freqs: bool = False

    @classmethod
    def all_on(cls) -> "Ablation":
        return cls(True, True, True)

    @classmethod
    def lattice(cls) -> list["Ablation"]:
        """All 2**3 flag combinations, all-off first."""
        return [cls(*flags) for flags in itertools.product((False, True), repeat=3)]

    def as_dict(self) -> dict[str, bool]:
        return asdict(self)

    def label(self) -> str:
        names = {"use_fused_all_to_all": "fused", "use_local_rope": "local_rope", "use_precomputed_freqs": "precomp"}
        on = [names[k] for k, v in self.as_dict().items() if v]
        return "+".join(on) if on else "none"


class VariantKind(str, enum.Enum):
    REFERENCE = "reference"
    BASELINE = "baseline"
    OPTIMIZED = "optimized"


@dataclass(frozen=True)
class PipelineVariant:
    kind: VariantKind
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if self.kind is not VariantKind.OPTIMIZED and self.ablation != Ablation():
            raise ValueError(f"{self.kind.value} variant takes no ablation flags")

    @classmethod
    def reference(cls) -> "PipelineVariant":
        return cls(VariantKind.REFERENCE)

    @classmethod
    def baseline(cls) -> "PipelineVariant":
        return cls(VariantKind.BASELINE)

    @classmethod
    def optimized(cls, ablation: Ablation | None = None) -> "PipelineVariant":
        return cls(VariantKind.OPTIMIZED, Ablation.all_on() if ablation is None else ablation)

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "ablation": self.ablation.as_dict()}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "PipelineVariant":
        return cls(VariantKind(d["kind"]), Ablation(**d["ablation"]))


class StageTimer:
    """Contiguous stage segments: each :meth:`mark` closes the previous one.

    Because segments share boundaries, the per-stage times sum to the total
    exactly. A stage label may recur; its time and ledger delta accumulate
    and its position in :attr:`order` is that of its first appearance.
    """

    def __init__(self, stats: CommStats | None = None):
        self._stats = stats
        self.order: list[str] = []
        self.times_ns: dict[str, int] = {}
        self.ledger: dict[str, CommStats] = {}
        self._current: str | None = None
        self._t0 = self._start = 0
        self._snap = CommStats()
        self.rope_angle_evaluations = 0

    def _snapshot(self) -> CommStats:
        return self._stats.copy() if self._stats is not None else CommStats()

    def mark(self, stage: str) -> None:
        now = time.perf_counter_ns()
        snap = self._snapshot()
        if self._current is None:
            self._start = now
        else:
            self._close(now, snap)
        if stage not in self.times_ns:
            self.order.append(stage)
            self.times_ns[stage] = 0
            self.ledger[stage] = CommStats()
        self._current, self._t0, self._snap = stage, now, snap

    def _close(self, now: int, snap: CommStats) -> None:
        self.times_ns[self._current] += now - self._t0
        self.ledger[self._current] = self.ledger[self._current] + (snap - self._snap)

    def finish(self) -> int:
        """Close the open stage; return total elapsed nanoseconds."""
        now = time.perf_counter_ns()
        if self._current is not None:
            self._close(now, self._snapshot())
            self._current = None
        return now - self._start


class _NullTimer:
    def mark(self, stage: str) -> None:
        pass


_NULL = _NullTimer()


@dataclass
class CallProfile:
    """Stage breakdown of one self-attention invocation (as seen by rank 0)."""

    variant: str
    ablation: dict[str, bool]
    stage_order: list[str]
    stage_times_us: dict[str, float]
    stage_ledger: dict[str, CommStats]
    ledger_delta: CommStats
    total_us: float
    rope_angle_evaluations: int = 0

    def to_json(self, element_width: int = 2) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "ablation": dict(self.ablation),
            "stage_order": list(self.stage_order),
            "stage_times_us": dict(self.stage_times_us),
            "stage_ledger": {k: v.to_json(element_width) for k, v in self.stage_ledger.items()},
            "ledger_delta": self.ledger_delta.to_json(element_width),
            "total_us": self.total_us,
            "rope_angle_evaluations": self.rope_angle_evaluations,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CallProfile":
        return cls(
            variant=d["variant"],
            ablation=dict(d["ablation"]),
            stage_order=list(d["stage_order"]),
            stage_times_us=dict(d["stage_times_us"]),
            stage_ledger={k: CommStats.from_json(v) for k, v in d["stage_ledger"].items()},
            ledger_delta=CommStats.from_json(d["ledger_delta"]),
            total_us=d["total_us"],
            rope_angle_evaluations=d.get("rope_angle_evaluations", 0),
        )


def _frequencies(table: RopeFrequencyTable, precomputed: bool):
    return table if precomputed else DynamicFrequencies.like(table)


def reference_self_attention(
    x_full: np.ndarray,
    params: AttentionLayerParams,
    grid: GridSpec,
    table: RopeFrequencyTable,
    start_frame: int,
    cache: KvCache,
    block_index: int | None = None,
    timer: StageTimer | None = None,
) -> np.ndarray:
    """Single-rank oracle over all heads; no collectives."""
    timer = timer or _NULL
    timer.mark("qkv")
    q, k, v = project(x_full, params.w_q), project(x_full, params.w_k), project(x_full, params.w_v)
    timer.mark("rope")
    q = apply_rope_global(q, grid, table, start_frame)
    k = apply_rope_global(k, grid, table, start_frame)
    timer.mark("cache")
    cache.update(k, v, block_index)
    timer.mark("attention")
    kc, vc = cache.read()
    o = scaled_dot_product_attention(q, kc, vc)
    timer.mark("output_exchange")
    return project(o, params.w_o)


def _check_partition(x_local: np.ndarray, grid: GridSpec, world: int) -> None:
    shape = Shape4.of(x_local)
    if grid.seq_len % world:
        raise PartitionError(f"block length {grid.seq_len} not divisible by world size {world}")
    if shape.heads % world:
        raise PartitionError(f"{shape.heads} heads not divisible by world size {world}")
    if shape.seq * world != grid.seq_len:
        raise PartitionError(f"local length {shape.seq} x {world} ranks != block length {grid.seq_len}")


def sp_self_attention(
    comm: Communicator,
    x_local: np.ndarray,
    params: AttentionLayerParams,
    grid: GridSpec,
    table: RopeFrequencyTable,
    start_frame: int,
    cache: KvCache,
    ablation: Ablation,
    block_index: int | None = None,
    timer: StageTimer | None = None,
) -> np.ndarray:
    """Sequence-parallel self-attention with individually switchable optimizations.

    With every flag off this is the baseline schedule step for step; with
    every flag on it is the optimized schedule.
    """
    p, r = comm.world_size, comm.rank
    _check_partition(x_local, grid, p)
    timer = timer or _NULL
    freqs = _frequencies(table, ablation.use_precomputed_freqs)

    timer.mark("qkv")
    q, k, v = project(x_local, params.w_q), project(x_local, params.w_k), project(x_local, params.w_v)

    if ablation.use_local_rope:
        # global token offset r * L/P is derived inside the local rotation
        timer.mark("rope")
        q = apply_rope_causal_local(q, grid, freqs, start_frame, r, p)
        k = apply_rope_causal_local(k, grid, freqs, start_frame, r, p)

    timer.mark("gather_or_fused")
    if ablation.use_fused_all_to_all:
        q, k, v = comm.fused_all_to_all(q, k, v, scatter_dim=HEADS, gather_dim=SEQ)
        if not ablation.use_local_rope:
            timer.mark("rope")
            q = apply_rope_global(q, grid, freqs, start_frame)
            k = apply_rope_global(k, grid, freqs, start_frame)
    else:
        q = comm.all_gather(q, dim=SEQ)
        k = comm.all_gather(k, dim=SEQ)
        v = comm.all_gather(v, dim=SEQ)
        if not ablation.use_local_rope:
            timer.mark("rope")
            q = apply_rope_global(q, grid, freqs, start_frame)
            k = apply_rope_global(k, grid, freqs, start_frame)
        timer.mark("gather_or_fused")
        k = split_heads(k, p, r)
        v = split_heads(v, p, r)

    timer.mark("cache")
    cache.update(k, v, block_index)

    timer.mark("attention")
    if not ablation.use_fused_all_to_all:
        q = split_heads(q, p, r)
    kc, vc = cache.read()
    o = scaled_dot_product_attention(q, kc, vc)

    timer.mark("output_exchange")
    o = comm.all_to_all(o, scatter_dim=SEQ, gather_dim=HEADS)
    out = project(o, params.w_o)
    if isinstance(freqs, DynamicFrequencies) and isinstance(timer, StageTimer):
        timer.rope_angle_evaluations += freqs.evaluations
    return out


def baseline_sp_self_attention(comm, x_local, params, grid, table, start_frame, cache, block_index=None, timer=None):
    """Gather q/k/v, rotate the full block, split heads, attend, restore layout."""
    return sp_self_attention(comm, x_local, params, grid, table, start_frame, cache, Ablation(), block_index, timer)


def optimized_sp_self_attention(
    comm, x_local, params, grid, table, start_frame, cache, ablation: Ablation | None = None, block_index=None, timer=None
):
    """Rotate locally, exchange q/k/v with one fused all-to-all, attend, restore layout."""
    ablation = Ablation.all_on() if ablation is None else ablation
    return sp_self_attention(comm, x_local, params, grid, table, start_frame, cache, ablation, block_index, timer)


def run_variant_call(
    variant: PipelineVariant,
    comm: Communicator | None,
    x: np.ndarray,
    params: AttentionLayerParams,
    grid: GridSpec,
    table: RopeFrequencyTable,
    start_frame: int,
    cache: KvCache,
    block_index: int | None = None,
    timer: StageTimer | None = None,
) -> np.ndarray:
    """Dispatch one call to the pipeline named by ``variant``."""
    if variant.kind is VariantKind.REFERENCE:
        return reference_self_attention(x, params, grid, table, start_frame, cache, block_index, timer)
    return sp_self_attention(comm, x, params, grid, table, start_frame, cache, variant.ablation, block_index, timer)


def build_profile(variant: PipelineVariant, timer: StageTimer, total_ns: int, ledger_delta: CommStats,
                  fuse_qkv_rope: bool = False) -> CallProfile:
    order = list(timer.order)
    times = {k: v / 1e3 for k, v in timer.times_ns.items()}
    ledger = dict(timer.ledger)
    if fuse_qkv_rope and order[:2] == ["qkv", "rope"]:
        # kernel-level fusion is not simulated; only the stage boundary is dropped
        order = ["qkv_rope"] + order[2:]
        times["qkv_rope"] = times.pop("qkv") + times.pop("rope")
        ledger["qkv_rope"] = ledger.pop("qkv") + ledger.pop("rope")
    return CallProfile(
        variant=variant.kind.value,
        ablation=variant.ablation.as_dict(),
        stage_order=order,
        stage_times_us=times,
        stage_ledger=ledger,
        ledger_delta=ledger_delta,
        total_us=total_ns / 1e3,
        rope_angle_evaluations=timer.rope_angle_evaluations,
    )


def profile_call(
    variant: PipelineVariant,
    x_full: np.ndarray,
    params: AttentionLayerParams,
    grid: GridSpec,
    table: RopeFrequencyTable,
    start_frame: int = 0,
    world_size: int = 1,
    fuse_qkv_rope: bool = False,
) -> CallProfile:
    """Time one self-attention call stage by stage on a fresh world and cache."""
    grid_hw = grid.tokens_per_frame
    if variant.kind is VariantKind.REFERENCE:
        timer = StageTimer()
        reference_self_attention(x_full, params, grid, table, start_frame, KvCache(grid_hw), timer=timer)
        total = timer.finish()
        return build_profile(variant, timer, total, CommStats(), fuse_qkv_rope)

    world = CommWorld(world_size)
    local_len = Shape4.of(x_full).seq // world_size

    def rank_fn(comm: Communicator):
        timer = StageTimer(comm.stats)
        x_local = x_full[:, comm.rank * local_len:(comm.rank + 1) * local_len]
        run_variant_call(variant, comm, x_local, params, grid, table, start_frame, KvCache(grid_hw), timer=timer)
        return timer, timer.finish()

    timer, total = world.run(rank_fn)[0]
    return build_profile(variant, timer, total, world.stats.copy(), fuse_qkv_rope)
