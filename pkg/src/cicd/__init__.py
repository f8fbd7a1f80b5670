"""Cross-image contrastive decoding: divergence-gated logit fusion,
a synthetic vision-language backend, and hallucination metrics."""

__version__ = "0.1.0"

from .engine import (
    EngineConfig,
    GenerationResult,
    SessionPair,
    StepTrace,
    cicd_step,
    dynamic_alpha,
    fuse_logits,
    generate,
    sample_token,
)
from .logits import (
    Distribution,
    DivergenceValue,
    LogitVector,
    adaptive_plausibility_mask,
    distance_suite,
    js_divergence,
    kl_divergence,
    softmax,
)
from .metrics import (
    CaptionRecord,
    ConfusionCounts,
    amber_composite,
    capture_score,
    chair_scores,
    jsd_stats,
    overlap_ratio,
    pope_scores,
)
from .selector import (
    EmbeddingStore,
    build_store,
    load_store,
    save_store,
    select_random,
    select_retrieved,
)
from .simworld import (
    SimBackend,
    SynthWorld,
    WorldConfig,
    build_trap_world,
    build_world,
    ground_truth_objects,
    load_world,
    save_world,
)

__all__ = [
    "__version__",
    # kernels
    "Distribution", "DivergenceValue", "LogitVector",
    "adaptive_plausibility_mask", "distance_suite",
    "js_divergence", "kl_divergence", "softmax",
    # engine
    "EngineConfig", "GenerationResult", "SessionPair", "StepTrace",
    "cicd_step", "dynamic_alpha", "fuse_logits", "generate", "sample_token",
    # selection
    "EmbeddingStore", "build_store", "load_store", "save_store",
    "select_random", "select_retrieved",
    # synthetic backend
    "SimBackend", "SynthWorld", "WorldConfig", "build_trap_world",
    "build_world", "ground_truth_objects", "load_world", "save_world",
    # metrics
    "CaptionRecord", "ConfusionCounts", "amber_composite", "capture_score",
    "chair_scores", "jsd_stats", "overlap_ratio", "pope_scores",
]
