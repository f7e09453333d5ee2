"""Sequence-parallel block-wise autoregressive self-attention with causal 3D RoPE."""

from .collectives import CommStats, CommWorld, Communicator, split_heads
from .errors import (
    AlignmentError,
    CausalSPError,
    CollectiveError,
    ConfigurationError,
    DeadlockError,
    EmptyCacheError,
    PartitionError,
    PositionRangeError,
    ShapeError,
)
from .generator import GenerationConfig, GenerationResult, VerificationReport, generate, verify_stream
from .kv_cache import KvCache
from .rope import (
    GridSpec,
    RopeFrequencyTable,
    apply_rope_causal_local,
    apply_rope_global,
    global_time_index,
    precompute_frequencies,
)
from .sp_attention import (
    Ablation,
    AttentionLayerParams,
    CallProfile,
    PipelineVariant,
    baseline_sp_self_attention,
    optimized_sp_self_attention,
    profile_call,
    reference_self_attention,
)
from .tensor_core import Shape4, allclose, make_rng, random_tensor, scaled_dot_product_attention

__version__ = "0.1.0"
