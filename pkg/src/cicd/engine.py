"""Divergence-gated contrastive decoding over a pair of lockstep sessions.

Per step: softmax both sessions' logits, measure their Jensen-Shannon
divergence, and compare its log10 against the gating threshold. At or
below the threshold the step is image-irrelevant and the original logits
pass through untouched; above it, candidates are restricted to the
plausible set of the original distribution and the two logit vectors are
fused with a divergence-dependent coefficient. The sampled token is fed to
both sessions so their textual context never diverges.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDivergence,
    DimensionError,
    EmptySupport,
    SessionError,
    SessionMismatch,
)
from .logits import (
    DivergenceValue,
    LogitVector,
    adaptive_plausibility_mask,
    js_divergence,
    softmax,
)
from .protocol import lockstep_barrier

__all__ = [
    "EngineConfig",
    "StepTrace",
    "GenerationResult",
    "SessionPair",
    "dynamic_alpha",
    "fuse_logits",
    "cicd_step",
    "sample_token",
    "generate",
]

ALPHA_MODES = ("dynamic", "fixed", "off")


@dataclass(frozen=True)
class EngineConfig:
    """Decoding policy; defaults follow the method's reference settings."""

    gamma: float = -4.0               # threshold on log10(JSD); may be +-inf
    beta: float = 0.1                 # plausibility cutoff, in (0, 1)
    alpha_mode: str = "dynamic"       # dynamic | fixed | off
    fixed_alpha: float | None = None  # required when alpha_mode == "fixed"
    alpha_clip: tuple[float, float] = (1.0, 3.0)
    temperature: float = 1.0
    greedy: bool = False
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.gamma):
            raise ConfigError("gamma must not be NaN")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.alpha_mode == "fixed" and (
                self.fixed_alpha is None or not math.isfinite(self.fixed_alpha)):
            raise ConfigError("alpha_mode 'fixed' requires a finite fixed_alpha")
        low, high = self.alpha_clip
        if not low <= high:
            raise ConfigError(f"alpha_clip {self.alpha_clip!r} must be ordered")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.max_len < 0:
            raise ConfigError("max_len must be >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["alpha_clip"] = list(self.alpha_clip)
        return d


@dataclass(frozen=True)
class StepTrace:
    """Everything observed at one decoding step."""

    step: int
    jsd: DivergenceValue
    gated_contrastive: bool
    alpha: float | None
    token: int
    token_text: str
    kept_indices_count: int
    orig_digest: str
    contrast_digest: str
    orig_logits: list[float] | None = None      # only with full tracing
    contrast_logits: list[float] | None = None

    def to_json_line(self, full: bool = False) -> str:
        obj = {
            "step": self.step,
            "jsd": self.jsd.jsd,
            "log10_jsd": self.jsd.log10_jsd if math.isfinite(self.jsd.log10_jsd) else None,
            "gated": self.gated_contrastive,
            "alpha": self.alpha,
            "token": self.token,
            "token_text": self.token_text,
        }
        if full:
            obj["kept_indices_count"] = self.kept_indices_count
            obj["orig_digest"] = self.orig_digest
            obj["contrast_digest"] = self.contrast_digest
            if self.orig_logits is not None:
                obj["orig_logits"] = self.orig_logits
                obj["contrast_logits"] = self.contrast_logits
        return json.dumps(obj)


@dataclass
class GenerationResult:
    tokens: list[int]
    text: str
    traces: list[StepTrace]
    config_echo: EngineConfig

    def write_trace_jsonl(self, path, full: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for trace in self.traces:
                fh.write(trace.to_json_line(full=full) + "\n")


def dynamic_alpha(d: DivergenceValue | float,
                  clip: tuple[float, float] = (1.0, 3.0)) -> float:
    """Contrastive coefficient 1 - log10(jsd), clamped to the clip interval.

    More similar distributions (smaller divergence) get a stronger
    coefficient: harder-to-remove priors need more suppression. Accepts a
    DivergenceValue or a bare positive divergence.
    """
    if isinstance(d, DivergenceValue):
        jsd, log10_jsd = d.jsd, d.log10_jsd
    else:
        jsd = float(d)
        log10_jsd = math.log10(jsd) if jsd > 0.0 else -math.inf
    if jsd <= 0.0:
        raise DegenerateDivergence(
            "alpha undefined at zero divergence; gating must bypass this step")
    alpha = 1.0 - log10_jsd
    low, high = clip
    return min(max(alpha, low), high)


def fuse_logits(orig: LogitVector, contrast: LogitVector, alpha: float) -> LogitVector:
    """(1 + alpha) * orig - alpha * contrast, elementwise; masks union."""
    if orig.vocab_size != contrast.vocab_size:
        raise DimensionError(
            f"vocab sizes differ: {orig.vocab_size} vs {contrast.vocab_size}")
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    mask = None
    if orig.mask is not None or contrast.mask is not None:
        mask = np.zeros(orig.vocab_size, dtype=bool)
        if orig.mask is not None:
            mask |= orig.mask
        if contrast.mask is not None:
            mask |= contrast.mask
    values = (1.0 + alpha) * orig.values - alpha * contrast.values
    if mask is not None:
        values = np.where(mask, 0.0, values)  # keep masked slots finite
    return LogitVector(values, mask=mask)


@dataclass(frozen=True)
class StepOutcome:
    """The per-step decision record, minus the sampled token."""

    jsd: DivergenceValue
    gated_contrastive: bool
    alpha: float | None
    kept_indices_count: int
    orig_digest: str
    contrast_digest: str


def cicd_step(orig: LogitVector, contrast: LogitVector,
              cfg: EngineConfig) -> tuple[LogitVector, StepOutcome]:
    """One gating/fusion decision for a lockstep step.

    Regular branch (divergence at or below the threshold, or contrast
    disabled): the original logits are returned unchanged, bit for bit.
    Contrastive branch: candidates are restricted to the plausibility set
    of the *original* distribution, then the vectors are fused.
    """
    if orig.vocab_size != contrast.vocab_size:
        raise SessionMismatch(
            f"sessions disagree on vocabulary size: "
            f"{orig.vocab_size} vs {contrast.vocab_size}")
    p = softmax(orig)
    q = softmax(contrast)
    d = js_divergence(p, q)
    if cfg.alpha_mode == "off" or d.log10_jsd <= cfg.gamma:
        return orig, StepOutcome(
            jsd=d, gated_contrastive=False, alpha=None,
            kept_indices_count=orig.vocab_size,
            orig_digest=orig.digest(), contrast_digest=contrast.digest())
    alpha = (dynamic_alpha(d, cfg.alpha_clip) if cfg.alpha_mode == "dynamic"
             else float(cfg.fixed_alpha))
    kept = adaptive_plausibility_mask(p, cfg.beta)
    fused = fuse_logits(orig, contrast, alpha)
    restricted = np.ones(orig.vocab_size, dtype=bool)
    restricted[kept] = False
    if fused.mask is not None:
        restricted |= fused.mask
    final = LogitVector(np.where(restricted, 0.0, fused.values), mask=restricted)
    return final, StepOutcome(
        jsd=d, gated_contrastive=True, alpha=alpha,
        kept_indices_count=int(len(kept)),
        orig_digest=orig.digest(), contrast_digest=contrast.digest())


def sample_token(final: LogitVector, temperature: float,
                 rng: np.random.Generator, greedy: bool = False) -> int:
    """Draw a token from softmax(final / temperature) over unmasked indices.

    Greedy mode returns the argmax (lowest index on exact ties). Sampling
    consumes exactly one uniform variate, so runs with equal step counts
    stay aligned on the same rng stream.
    """
    unmasked = final.unmasked_indices()
    if unmasked.size == 0:
        raise EmptySupport("no unmasked index to sample from")
    if greedy:
        values = final.values[unmasked]
        return int(unmasked[int(np.argmax(values))])
    scaled = LogitVector(final.values / temperature, mask=final.mask)
    probs = softmax(scaled).probs
    cdf = np.cumsum(probs)
    u = rng.random()
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= final.vocab_size or probs[idx] == 0.0:
        idx = int(unmasked[-1])
    return idx


class SessionPair:
    """Two generation sessions sharing prompt and generated prefix.

    ``orig_backend`` / ``contrast_backend`` may be the same object (one
    world or one connection serving both sessions) or two endpoints; either
    way their vocabularies must agree, which is checked via digests.
    """

    def __init__(self, orig_backend, contrast_backend, orig_image: str,
                 contrast_image: str):
        if orig_backend.vocab_digest != contrast_backend.vocab_digest:
            raise SessionMismatch(
                "backends disagree on vocabulary digest; refusing to pair")
        self.orig_backend = orig_backend
        self.contrast_backend = contrast_backend
        self.orig_image = orig_image
        self.contrast_image = contrast_image
        self.orig = None
        self.contrast = None

    @property
    def eos_id(self) -> int:
        return self.orig_backend.eos_id

    def token_text(self, token: int) -> str:
        return self.orig_backend.token_text(token)

    def open(self, prompt: Sequence[int]) -> None:
        self.orig = self.orig_backend.open_session(
            self.orig_image, prompt, session_id="orig")
        self.contrast = self.contrast_backend.open_session(
            self.contrast_image, prompt, session_id="contrast")

    def barrier(self) -> None:
        lockstep_barrier(self.orig.state, self.contrast.state)

    def feed_both(self, token: int) -> None:
        self.orig.feed(token)
        self.contrast.feed(token)


def generate(pair: SessionPair, prompt: Sequence[int], cfg: EngineConfig,
             full_trace: bool = False) -> GenerationResult:
    """Lockstep dual-session generation loop.

    Each iteration requests step logits from both sessions, runs the
    gating/fusion decision, samples one token, and feeds that same token
    to both sessions. Stops at the end token or after ``cfg.max_len``
    steps. Bit-reproducible for a fixed (config, backend, seed).
    """
    pair.open(prompt)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    tokens: list[int] = []
    traces: list[StepTrace] = []
    for step in range(cfg.max_len):
        pair.barrier()
        try:
            raw_orig = pair.orig.step_logits()
            raw_contrast = pair.contrast.step_logits()
        except SessionError as exc:
            if exc.step is None:
                exc.step = step
            raise
        except Exception as exc:
            raise SessionError(f"backend failed: {exc}", step=step) from exc
        final, outcome = cicd_step(LogitVector(raw_orig), LogitVector(raw_contrast), cfg)
        token = sample_token(final, cfg.temperature, rng, greedy=cfg.greedy)
        try:
            pair.feed_both(token)
        except SessionError as exc:
            if exc.step is None:
                exc.step = step
            raise
        except Exception as exc:
            raise SessionError(f"backend failed on feed: {exc}", step=step) from exc
        traces.append(StepTrace(
            step=step, jsd=outcome.jsd,
            gated_contrastive=outcome.gated_contrastive,
            alpha=outcome.alpha, token=token,
            token_text=pair.token_text(token),
            kept_indices_count=outcome.kept_indices_count,
            orig_digest=outcome.orig_digest,
            contrast_digest=outcome.contrast_digest,
            orig_logits=[float(x) for x in raw_orig] if full_trace else None,
            contrast_logits=[float(x) for x in raw_contrast] if full_trace else None,
        ))
        tokens.append(token)
        if token == pair.eos_id:
            break
    text = " ".join(t.token_text for t in traces if t.token != pair.eos_id)
    return GenerationResult(tokens=tokens, text=text, traces=traces, config_echo=cfg)


def regular_config(cfg: EngineConfig) -> EngineConfig:
    """The same policy with contrast disabled (plain sampling)."""
    return replace(cfg, alpha_mode="off")
