"""Block-wise autoregressive driver over the self-attention pipelines.

Block ``k`` covers frames ``k*tau .. k*tau + tau - 1`` and is processed with
``start_frame = k*tau``. Its input is seeded noise (there is no denoising
network here); each denoising step pushes it through a stack of pre-norm
residual self-attention layers, each layer owning its own per-rank KV cache. A block's
output is assembled and emitted before the next block starts.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .collectives import DEFAULT_ELEMENT_WIDTH, CommStats, CommWorld, Communicator
from .errors import ConfigurationError, PartitionError
from .kv_cache import KvCache
from .rope import DEFAULT_BASE, GridSpec, precompute_frequencies
from .sp_attention import (
    AttentionLayerParams,
    PipelineVariant,
    StageTimer,
    VariantKind,
    run_variant_call,
)
from .tensor_core import Shape4, make_rng, max_abs_diff, random_tensor, rms_norm

# seed stream tags
_PARAMS_STREAM = 1
_INPUT_STREAM = 2

DEFAULT_TOLERANCE = 1e-10


@dataclass(frozen=True)
class GenerationConfig:
    frames_per_block: int = 3
    grid_h: int = 4
    grid_w: int = 4
    num_blocks: int = 5
    layers: int = 4
    denoise_steps: int = 2
    batch: int = 1
    heads: int = 8
    head_dim: int = 16
    world_size: int = 1
    seed: int = 0
    variant: PipelineVariant = field(default_factory=PipelineVariant.optimized)
    window_frames: int | None = None
    element_width_bytes: int = DEFAULT_ELEMENT_WIDTH
    rope_base: float = DEFAULT_BASE
    band_split: tuple[int, int, int] | None = None
    corrupt_start_frame: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", self._coerce_variant(self.variant))
        for name in ("frames_per_block", "grid_h", "grid_w", "num_blocks", "layers",
                     "denoise_steps", "batch", "heads", "world_size", "element_width_bytes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        Shape4(self.batch, self.block_len, self.heads, self.head_dim)
        p = self.world_size
        if self.block_len % p:
            raise PartitionError(
                f"block length {self.block_len} (= {self.frames_per_block}x{self.grid_h}x{self.grid_w}) "
                f"not divisible by world size {p}"
            )
        if self.heads % p:
            raise PartitionError(f"{self.heads} heads not divisible by world size {p}")
        if self.variant.kind is VariantKind.REFERENCE and p != 1:
            raise ConfigurationError("the reference pipeline runs on a single rank")
        if self.window_frames is not None and self.window_frames < self.frames_per_block:
            raise ConfigurationError(
                f"window of {self.window_frames} frames cannot hold a {self.frames_per_block}-frame block"
            )

    @staticmethod
    def _coerce_variant(v) -> PipelineVariant:
        if isinstance(v, PipelineVariant):
            return v
        return {
            "reference": PipelineVariant.reference,
            "baseline": PipelineVariant.baseline,
            "optimized": PipelineVariant.optimized,
        }[VariantKind(v).value]()

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.frames_per_block, self.grid_h, self.grid_w)

    @property
    def block_len(self) -> int:
        return self.frames_per_block * self.grid_h * self.grid_w

    @property
    def total_calls(self) -> int:
        return self.num_blocks * self.denoise_steps * self.layers

    @property
    def total_frames(self) -> int:
        return self.num_blocks * self.frames_per_block

    def start_frame(self, block: int) -> int:
        return 0 if self.corrupt_start_frame else block * self.frames_per_block

    def to_json(self) -> dict[str, Any]:
        return {
            "frames_per_block": self.frames_per_block,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "num_blocks": self.num_blocks,
            "layers": self.layers,
            "denoise_steps": self.denoise_steps,
            "batch": self.batch,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "world_size": self.world_size,
            "seed": self.seed,
            "variant": self.variant.to_json(),
            "window_frames": self.window_frames,
            "element_width_bytes": self.element_width_bytes,
            "rope_base": self.rope_base,
            "band_split": list(self.band_split) if self.band_split is not None else None,
            "corrupt_start_frame": self.corrupt_start_frame,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "GenerationConfig":
        d = dict(d)
        d["variant"] = PipelineVariant.from_json(d["variant"])
        if d.get("band_split") is not None:
            d["band_split"] = tuple(d["band_split"])
        return cls(**d)


def expected_call_signature(variant: PipelineVariant) -> dict[str, int]:
    """Collective invocations one self-attention call of ``variant`` performs."""
    if variant.kind is VariantKind.REFERENCE:
        return {"ag": 0, "a2a": 0, "fused": 0}
    if variant.ablation.use_fused_all_to_all:
        return {"ag": 0, "a2a": 1, "fused": 1}
    return {"ag": 3, "a2a": 1, "fused": 0}


@dataclass
class GenerationProfile:
    """Aggregated timing and traffic of one generation run (rank 0's view)."""

    variant: str
    ablation: dict[str, bool]
    world_size: int
    calls: int
    stage_order: list[str]
    stage_times_us: dict[str, float]  # summed over calls
    comm: CommStats
    wall_time_s: float
    first_block_latency_s: float
    rope_angle_evaluations: int = 0

    @property
    def mean_stage_times_us(self) -> dict[str, float]:
        return {k: v / self.calls for k, v in self.stage_times_us.items()}

    def to_json(self, element_width: int = DEFAULT_ELEMENT_WIDTH, timing: bool = True) -> dict[str, Any]:
        d = {
            "variant": self.variant,
            "ablation": dict(self.ablation),
            "world_size": self.world_size,
            "calls": self.calls,
            "stage_order": list(self.stage_order),
            "comm": self.comm.to_json(element_width),
            "rope_angle_evaluations": self.rope_angle_evaluations,
        }
        if timing:
            d["stage_times_us"] = dict(self.stage_times_us)
            d["mean_stage_times_us"] = self.mean_stage_times_us
            d["wall_time_s"] = self.wall_time_s
            d["first_block_latency_s"] = self.first_block_latency_s
        return d


@dataclass
class GenerationResult:
    config: GenerationConfig
    blocks: list[np.ndarray]
    start_frames: list[int]
    profile: GenerationProfile

    def to_json(self, timing: bool = True) -> dict[str, Any]:
        return {
            "config": self.config.to_json(),
            "blocks": [
                {
                    "index": k,
                    "start_frame": s,
                    "shape": list(b.shape),
                    "sha256": hashlib.sha256(np.ascontiguousarray(b).tobytes()).hexdigest(),
                    "max_abs": float(np.max(np.abs(b))),
                }
                for k, (b, s) in enumerate(zip(self.blocks, self.start_frames))
            ],
            "profile": self.profile.to_json(self.config.element_width_bytes, timing=timing),
        }


def layer_params(config: GenerationConfig) -> list[AttentionLayerParams]:
    return [
        AttentionLayerParams.random(config.heads, config.head_dim, make_rng(config.seed, _PARAMS_STREAM, layer))
        for layer in range(config.layers)
    ]


def block_input(config: GenerationConfig, block: int) -> np.ndarray:
    shape = (config.batch, config.block_len, config.heads, config.head_dim)
    return random_tensor(shape, make_rng(config.seed, _INPUT_STREAM, block))


def generate(
    config: GenerationConfig,
    on_block: Callable[[int, np.ndarray], None] | None = None,
) -> GenerationResult:
    """Run every block through ``denoise_steps x layers`` self-attention calls.

    ``on_block(k, output)`` fires once block ``k`` is final, before any rank
    starts block ``k + 1``.
    """
    grid = config.grid
    p = config.world_size
    local_len = config.block_len // p
    table = precompute_frequencies(
        config.total_frames, config.grid_h, config.grid_w, config.head_dim, config.rope_base, config.band_split
    )
    params = layer_params(config)
    world = CommWorld(p)
    pending: list[np.ndarray | None] = [None] * p
    blocks: list[np.ndarray] = []
    emitted_at: list[float] = []
    t_start = time.perf_counter()

    def rank_fn(comm: Communicator):
        r = comm.rank
        caches = [KvCache(grid.tokens_per_frame, config.window_frames) for _ in range(config.layers)]
        timer = StageTimer(comm.stats)
        for k in range(config.num_blocks):
            s = config.start_frame(k)
            h = block_input(config, k)[:, r * local_len:(r + 1) * local_len]
            for _step in range(config.denoise_steps):
                for layer in range(config.layers):
                    h = h + run_variant_call(
                        config.variant, comm, rms_norm(h), params[layer], grid, table, s, caches[layer],
                        block_index=k, timer=timer,
                    )
            pending[r] = h
            comm.barrier()
            if r == 0:
                out = np.concatenate(pending, axis=1)
                blocks.append(out)
                emitted_at.append(time.perf_counter())
                if on_block is not None:
                    on_block(k, out)
            comm.barrier()
        timer.finish()
        return timer

    timer = world.run(rank_fn)[0]
    t_end = time.perf_counter()
    profile = GenerationProfile(
        variant=config.variant.kind.value,
        ablation=config.variant.ablation.as_dict(),
        world_size=p,
        calls=config.total_calls,
        stage_order=list(timer.order),
        stage_times_us={k: v / 1e3 for k, v in timer.times_ns.items()},
        comm=world.stats.copy(),
        wall_time_s=t_end - t_start,
        first_block_latency_s=emitted_at[0] - t_start,
        rope_angle_evaluations=timer.rope_angle_evaluations,
    )
    starts = [config.start_frame(k) for k in range(config.num_blocks)]
    return GenerationResult(config, blocks, starts, profile)


def reference_config(config: GenerationConfig) -> GenerationConfig:
    """Same seeds and shapes, single-rank reference pipeline, honest start frames."""
    return replace(config, world_size=1, variant=PipelineVariant.reference(), corrupt_start_frame=False)


@dataclass
class VerificationReport:
    config: GenerationConfig
    tolerance: float
    block_deviations: list[float]
    block_passed: list[bool]
    ledger: CommStats
    expected_ledger: dict[str, int]
    ledger_ok: bool
    calls: int

    @property
    def passed(self) -> bool:
        return all(self.block_passed) and self.ledger_ok

    def to_json(self) -> dict[str, Any]:
        return {
            "config": self.config.to_json(),
            "tolerance": self.tolerance,
            "calls": self.calls,
            "block_deviations": list(self.block_deviations),
            "block_passed": list(self.block_passed),
            "ledger": self.ledger.to_json(self.config.element_width_bytes),
            "expected_ledger": dict(self.expected_ledger),
            "ledger_ok": self.ledger_ok,
            "passed": self.passed,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "VerificationReport":
        return cls(
            config=GenerationConfig.from_json(d["config"]),
            tolerance=d["tolerance"],
            block_deviations=list(d["block_deviations"]),
            block_passed=list(d["block_passed"]),
            ledger=CommStats.from_json(d["ledger"]),
            expected_ledger=dict(d["expected_ledger"]),
            ledger_ok=d["ledger_ok"],
            calls=d["calls"],
        )


def verify_stream(
    config: GenerationConfig,
    tolerance: float = DEFAULT_TOLERANCE,
    reference: GenerationResult | None = None,
) -> VerificationReport:
    """Compare ``config``'s run against the single-rank reference, block by block.

    A precomputed ``reference`` result may be passed to share it across cells.
    """
    if config.variant.kind is VariantKind.REFERENCE:
        raise ConfigurationError("verify_stream needs a parallel variant to check")
    if reference is None:
        reference = generate(reference_config(config))
    result = generate(config)
    devs = [max_abs_diff(a, b) for a, b in zip(result.blocks, reference.blocks)]
    per_call = expected_call_signature(config.variant)
    expected = {k: v * config.total_calls for k, v in per_call.items()}
    return VerificationReport(
        config=config,
        tolerance=tolerance,
        block_deviations=devs,
        block_passed=[d <= tolerance for d in devs],
        ledger=result.profile.comm,
        expected_ledger=expected,
        ledger_ok=result.profile.comm.signature() == expected,
        calls=config.total_calls,
    )
