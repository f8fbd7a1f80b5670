"""Deterministic synthetic vision-language backend.

The world mixes two channels per decoding step:

* a language-prior channel: co-occurrence scores over object words given
  the recently mentioned objects, identical whichever image a session
  looks at;
* a visual channel: +1 for object words present in the session's image,
  -1 for absent ones, active only at object slots.

A fixed cyclic template decides per position whether the next slot takes a
function word or an object word; past a length cap the only remaining slot
favors the end token overwhelmingly. Function-word slots carry no visual
weight, so two lockstep sessions with different images produce *identical*
logits there (divergence exactly zero) unless a small image-keyed jitter is
enabled; object slots diverge through the visual channel. This makes the
two gating regimes of the decoding engine separable by construction, and
every caption has a ground-truth object set to score hallucinations
against.

Worlds are immutable after build and serializable to a single JSON
document; sessions hold all per-generation state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NotFound
from .protocol import SessionState, vocab_digest

OFF_LOGIT = -40.0  # tokens a slot rules out
END_LOGIT = 40.0   # end token at end slots

# Context window for the co-occurrence prior: only the most recently
# mentioned objects keep pulling their partners.
PRIOR_CONTEXT_WINDOW = 4

FUNCTION_WORD_POOL = [
    "the", "a", "is", "on", "with", "and", "of", "in", "near", "under",
    "over", "by", "at", "beside", "some", "this", "that", "it", "as",
    "was", "are", "there", "then", "while", "also", "its", "very", "'s",
]

OBJECT_WORD_POOL = [
    "dog", "cat", "car", "tree", "chair", "table", "bird", "boat",
    "house", "road", "cup", "book", "lamp", "phone", "shoe", "hat",
    "fish", "horse", "cake", "door", "clock", "flower", "bench",
    "bottle", "plate", "glass", "fence", "cloud", "star", "stone",
    "grass", "river", "bridge", "tower", "train", "plane", "kite",
    "sofa", "mirror", "basket",
]

END_TOKEN_TEXT = "<eos>"

__all__ = [
    "WorldConfig",
    "SynthWorld",
    "SynthSession",
    "SimBackend",
    "build_world",
    "build_trap_world",
    "find_trap_pairs",
    "ground_truth_objects",
    "world_to_json",
    "world_from_json",
    "save_world",
    "load_world",
    "image_indicator_embeddings",
    "with_jitter",
]


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for :func:`build_world`; defaults give the calibrated world."""

    n_function_words: int = 24
    n_objects: int = 36
    n_images: int = 200
    objects_per_image: int = 5
    caption_len: int = 12
    template: str = "ffo"
    # channel weights (object slots)
    w_lang: float = 2.0
    w_vis: float = 1.3
    # prior shape
    prior_sharpness: float = 1.5   # partner score; others are U(0, 0.4)
    prior_other_scale: float = 0.4
    prior_base_scale: float = 0.3
    # function-slot shape
    fn_scale: float = 1.4
    fn_leak_scale: float = 6.0     # prior bleed-through onto object words
    fn_leak_offset: float = 7.7
    # cross-image noise on function-slot logits; 0 keeps them exactly equal
    prior_jitter: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_function_words < 2 or self.n_objects < 2:
            raise ConfigError("need at least 2 function words and 2 objects")
        if not 0 < self.objects_per_image <= self.n_objects:
            raise ConfigError(
                f"objects_per_image {self.objects_per_image} outside 1..{self.n_objects}")
        if self.n_images < 2:
            raise ConfigError("need at least 2 images")
        if self.caption_len < 1:
            raise ConfigError("caption_len must be positive")
        if not self.template or set(self.template) - {"f", "o"}:
            raise ConfigError(f"template {self.template!r} must be drawn from 'f'/'o'")
        if self.w_lang < 0 or self.w_vis <= 0:
            raise ConfigError("w_lang must be >= 0 and w_vis > 0 at object slots")
        if self.prior_jitter < 0:
            raise ConfigError("prior_jitter must be >= 0")


def _pad_words(pool: list[str], count: int, prefix: str) -> list[str]:
    words = list(pool[:count])
    while len(words) < count:
        words.append(f"{prefix}{len(words)}")
    return words


@dataclass
class SynthWorld:
    """Immutable synthetic universe; see module docstring."""

    config: WorldConfig
    function_words: list[str]
    object_words: list[str]
    images: dict[str, tuple[int, ...]]      # image id -> sorted object indices
    prior: np.ndarray                       # (n_objects + 1, n_objects); row 0 = no context
    fn_scores: np.ndarray                   # (caption_len, n_function_words)
    token_table: list[str] = field(init=False)
    eos_id: int = field(init=False)

    def __post_init__(self):
        self.token_table = self.function_words + self.object_words + [END_TOKEN_TEXT]
        self.eos_id = len(self.token_table) - 1

    # --- vocabulary layout -------------------------------------------------
    @property
    def vocab_size(self) -> int:
        return len(self.token_table)

    @property
    def n_function(self) -> int:
        return len(self.function_words)

    @property
    def n_objects(self) -> int:
        return len(self.object_words)

    def object_token(self, obj_index: int) -> int:
        return self.n_function + obj_index

    def object_index(self, token: int) -> int | None:
        idx = token - self.n_function
        return idx if 0 <= idx < self.n_objects else None

    def is_function_token(self, token: int) -> bool:
        return 0 <= token < self.n_function

    def token_text(self, token: int) -> str:
        return self.token_table[token]

    def vocab_digest(self) -> str:
        return vocab_digest(self.token_table)

    # --- grammar -----------------------------------------------------------
    def slot_kind(self, position: int) -> str:
        """'function' | 'object' | 'end' for the slot at this position."""
        if position >= self.config.caption_len:
            return "end"
        tpl = self.config.template
        return "function" if tpl[position % len(tpl)] == "f" else "object"

    # --- channels ----------------------------------------------------------
    def prior_scores(self, mentioned: list[int]) -> np.ndarray:
        """Language-prior score per object given recently mentioned objects.

        The pull of each mentioned object is its prior row; rows combine by
        elementwise max so a trap partner stays favored until satisfied.
        """
        recent = mentioned[-PRIOR_CONTEXT_WINDOW:]
        if not recent:
            return self.prior[0]
        return np.max(self.prior[[c + 1 for c in recent]], axis=0)

    def visual_scores(self, image_id: str) -> np.ndarray:
        present = np.full(self.n_objects, -1.0)
        present[list(self.images[image_id])] = 1.0
        return present

    def _jitter(self, image_id: str, position: int) -> np.ndarray | None:
        j = self.config.prior_jitter
        if j == 0.0:
            return None
        key = f"{self.config.seed}:{image_id}:{position}".encode()
        seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")
        rng = np.random.Generator(np.random.PCG64(seed))
        return rng.uniform(-j, j, self.vocab_size)

    def next_logits(self, image_id: str, fed_tokens: list[int]) -> np.ndarray:
        """Dense logits for the next slot given an image and fed context."""
        if image_id not in self.images:
            raise NotFound(f"unknown image id {image_id!r}")
        position = len(fed_tokens)
        kind = self.slot_kind(position)
        cfg = self.config
        out = np.full(self.vocab_size, OFF_LOGIT)
        if kind == "end":
            out[self.eos_id] = END_LOGIT
            return out
        mentioned = [i for t in fed_tokens if (i := self.object_index(t)) is not None]
        lang = self.prior_scores(mentioned)
        objs = slice(self.n_function, self.n_function + self.n_objects)
        if kind == "function":
            out[: self.n_function] = cfg.fn_scale * self.fn_scores[position]
            out[objs] = cfg.fn_leak_scale * lang - cfg.fn_leak_offset
            jitter = self._jitter(image_id, position)
            if jitter is not None:
                out = out + jitter
        else:
            out[objs] = cfg.w_lang * lang + cfg.w_vis * self.visual_scores(image_id)
        return out


def build_world(config: WorldConfig) -> SynthWorld:
    """Build a world deterministically from its config (seed included).

    Guarantees at least one hallucination trap: a pair (c, partner) with
    maximal co-occurrence score where some image contains c but not the
    partner. Verified by exhaustive scan.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    function_words = _pad_words(FUNCTION_WORD_POOL, config.n_function_words, "fw")
    object_words = _pad_words(OBJECT_WORD_POOL, config.n_objects, "obj")

    images: dict[str, tuple[int, ...]] = {}
    for i in range(config.n_images):
        chosen = rng.choice(config.n_objects, size=config.objects_per_image, replace=False)
        images[f"img_{i:03d}"] = tuple(sorted(int(x) for x in chosen))

    prior = np.zeros((config.n_objects + 1, config.n_objects))
    prior[0] = rng.uniform(0.0, config.prior_base_scale, config.n_objects)
    for c in range(config.n_objects):
        row = rng.uniform(0.0, config.prior_other_scale, config.n_objects)
        partner = int(rng.integers(config.n_objects - 1))
        if partner >= c:
            partner += 1
        row[partner] = config.prior_sharpness
        row[c] = 0.0  # an object does not pull itself
        prior[c + 1] = row

    fn_scores = rng.normal(0.0, 1.0, (config.caption_len, config.n_function_words))

    world = SynthWorld(config=config, function_words=function_words,
                       object_words=object_words, images=images,
                       prior=prior, fn_scores=fn_scores)
    if not _find_trap_pairs(world):
        raise ConfigError(
            "world has no hallucination trap (every partner co-occurs everywhere); "
            "change the seed or enlarge the object pool")
    return world


def _find_trap_pairs(world: SynthWorld) -> list[tuple[int, int]]:
    """All (context, partner) pairs where some image has the context object
    but lacks the prior-favored partner."""
    traps = []
    for c in range(world.n_objects):
        partner = int(np.argmax(world.prior[c + 1]))
        if world.prior[c + 1, partner] <= 0:
            continue
        for members in world.images.values():
            if c in members and partner not in members:
                traps.append((c, partner))
                break
    return traps


def find_trap_pairs(world: SynthWorld) -> list[tuple[int, int]]:
    return _find_trap_pairs(world)


def build_trap_world(
    *,
    n_distractors: int = 5,
    n_scenes: int = 1,
    w_lang: float = 6.0,
    w_vis: float = 0.8,
    runner_score: float = 0.55,
    contrast_has_partner: bool = True,
    prior_jitter: float = 0.0,
    seed: int = 11,
) -> tuple[SynthWorld, dict]:
    """A small world with one engineered trap, for prefix experiments.

    Image ``scene`` contains a cue object and a present "runner"; the prior
    row of the cue points hard at an absent partner object, so a
    prior-dominated decoder names the partner even though only the runner
    is visible. Additional scenes (``scene_1``, ...) pair the cue with
    their own runner so cross-image consistency can be measured. All other
    images avoid the cue and every runner (and carry the partner when
    ``contrast_has_partner``), so any contrast image gives the visual
    channel a clean shot at the trap. Returns the world plus a dict naming
    the special tokens.
    """
    if n_scenes < 1 or n_distractors < n_scenes + 1:
        raise ConfigError("need at least one scene and a distractor per extra scene")
    cfg = WorldConfig(
        n_function_words=8, n_objects=3 + n_distractors, n_images=5 + n_scenes,
        objects_per_image=2, caption_len=9, template="ffo",
        w_lang=w_lang, w_vis=w_vis, prior_sharpness=1.0,
        prior_other_scale=0.2, prior_base_scale=0.2,
        fn_leak_offset=20.0,  # no prior bleed-through in the trap world
        prior_jitter=prior_jitter, seed=seed,
    )
    cfg.validate()
    rng = np.random.default_rng(seed)
    function_words = _pad_words(FUNCTION_WORD_POOL, cfg.n_function_words, "fw")
    object_words = _pad_words(OBJECT_WORD_POOL, cfg.n_objects, "obj")
    cue, runner, partner = 0, 1, 2
    # extra scenes use the tail distractors as runners; contrast images
    # draw only from the remaining pool so they never show a runner
    extra_runners = list(range(cfg.n_objects - (n_scenes - 1), cfg.n_objects))
    pool = list(range(3, cfg.n_objects - (n_scenes - 1)))

    images: dict[str, tuple[int, ...]] = {"scene": (cue, runner)}
    for k, extra in enumerate(extra_runners, start=1):
        images[f"scene_{k}"] = tuple(sorted((cue, extra)))
    for i in range(5):
        picks = rng.choice(pool, size=2, replace=False)
        members = {int(picks[0])} | ({partner} if contrast_has_partner else {int(picks[1])})
        images[f"other_{i}"] = tuple(sorted(members))

    prior = np.zeros((cfg.n_objects + 1, cfg.n_objects))
    prior[0] = rng.uniform(0.0, cfg.prior_base_scale, cfg.n_objects)
    for c in range(cfg.n_objects):
        row = rng.uniform(0.0, cfg.prior_other_scale, cfg.n_objects)
        row[partner] = 1.0   # everything keeps pulling the absent partner
        row[c] = 0.0
        prior[c + 1] = row
    prior[cue + 1, runner] = runner_score  # visible runner stays plausible
    prior[0, partner] = 0.0

    fn_scores = rng.normal(0.0, 1.0, (cfg.caption_len, cfg.n_function_words))
    world = SynthWorld(config=cfg, function_words=function_words,
                       object_words=object_words, images=images,
                       prior=prior, fn_scores=fn_scores)
    tokens = {
        "cue": world.object_token(cue),
        "runner": world.object_token(runner),
        "partner": world.object_token(partner),
        "trap_image": "scene",
        "extra_scenes": [f"scene_{k}" for k in range(1, n_scenes)],
        "contrast_pool": [f"other_{i}" for i in range(5)],
    }
    return world, tokens


def ground_truth_objects(world: SynthWorld, image_id: str) -> frozenset[int]:
    """Exact object-token set of an image (vocabulary indices)."""
    if image_id not in world.images:
        raise NotFound(f"unknown image id {image_id!r}")
    return frozenset(world.object_token(i) for i in world.images[image_id])


# ---------------------------------------------------------------------------
# Sessions / backend interface
# ---------------------------------------------------------------------------

class SynthSession:
    """One generation context over a world: an image plus fed tokens."""

    def __init__(self, world: SynthWorld, image_id: str, prompt, session_id: str = ""):
        if image_id not in world.images:
            raise NotFound(f"unknown image id {image_id!r}")
        self.world = world
        self.state = SessionState(session_id=session_id or image_id,
                                  image_id=image_id,
                                  fed_tokens=[int(t) for t in prompt])

    @property
    def image_id(self) -> str:
        return self.state.image_id

    def step_logits(self) -> np.ndarray:
        self.state.last_step += 1
        return self.world.next_logits(self.state.image_id, self.state.fed_tokens)

    def feed(self, token: int) -> None:
        token = int(token)
        if not 0 <= token < self.world.vocab_size:
            raise ValueError(f"token {token} outside vocabulary")
        self.state.fed_tokens.append(token)


class SimBackend:
    """In-process backend handle over one world.

    Exposes the same surface the engine expects from a wire client
    (``open_session``/``token_text``/``eos_id``/``vocab_digest``) and the
    surface :func:`cicd.protocol.serve_stream` expects from a served model.
    """

    def __init__(self, world: SynthWorld):
        self.world = world
        self.token_table = world.token_table
        self.eos_id = world.eos_id
        self.vocab_size = world.vocab_size
        self.vocab_digest = world.vocab_digest()

    def token_text(self, token: int) -> str:
        return self.world.token_text(token)

    def open_session(self, image_id: str, prompt, session_id: str = "") -> SynthSession:
        return SynthSession(self.world, image_id, prompt, session_id=session_id)

    def close(self) -> None:  # symmetry with WireBackendClient
        pass


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def world_to_json(world: SynthWorld) -> str:
    cfg = world.config
    doc = {
        "format": "cicd-world/1",
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "function_words": world.function_words,
        "object_words": world.object_words,
        "images": {k: list(v) for k, v in world.images.items()},
        "prior": world.prior.tolist(),
        "fn_scores": world.fn_scores.tolist(),
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def world_from_json(text: str) -> SynthWorld:
    doc = json.loads(text)
    if doc.get("format") != "cicd-world/1":
        raise ConfigError(f"not a world document: format={doc.get('format')!r}")
    try:
        cfg = WorldConfig(**doc["config"])
        world = SynthWorld(
            config=cfg,
            function_words=list(doc["function_words"]),
            object_words=list(doc["object_words"]),
            images={k: tuple(int(i) for i in v) for k, v in doc["images"].items()},
            prior=np.asarray(doc["prior"], dtype=np.float64),
            fn_scores=np.asarray(doc["fn_scores"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed world document: {exc}") from exc
    _validate_world(world)
    return world


def _validate_world(world: SynthWorld) -> None:
    cfg = world.config
    cfg.validate()
    n = world.n_objects
    if len(world.function_words) != cfg.n_function_words or n != cfg.n_objects:
        raise ConfigError("vocabulary sizes disagree with the config")
    if world.prior.shape != (n + 1, n):
        raise ConfigError(f"prior table shape {world.prior.shape} != {(n + 1, n)}")
    if not np.isfinite(world.prior).all() or not np.isfinite(world.fn_scores).all():
        raise ConfigError("prior/function score tables must be finite")
    if world.fn_scores.shape != (cfg.caption_len, cfg.n_function_words):
        raise ConfigError(
            f"function score shape {world.fn_scores.shape} != "
            f"{(cfg.caption_len, cfg.n_function_words)}")
    for image_id, members in world.images.items():
        if not members:
            raise ConfigError(f"image {image_id!r} has no objects")
        if any(not 0 <= i < n for i in members):
            raise ConfigError(f"image {image_id!r} references unknown objects")


def save_world(world: SynthWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(world_to_json(world))


def load_world(path) -> SynthWorld:
    with open(path, "r", encoding="utf-8") as fh:
        return world_from_json(fh.read())


def image_indicator_embeddings(world: SynthWorld) -> list[tuple[str, np.ndarray]]:
    """Unit-normalized object-indicator vectors, one per image.

    Cosine similarity between them reflects object overlap, so retrieval
    by minimal similarity picks the most disjoint image.
    """
    out = []
    for image_id, members in world.images.items():
        vec = np.zeros(world.n_objects)
        vec[list(members)] = 1.0
        out.append((image_id, vec / np.linalg.norm(vec)))
    return out


def with_jitter(world: SynthWorld, prior_jitter: float) -> SynthWorld:
    """Same world with a different function-slot jitter setting."""
    return SynthWorld(
        config=replace(world.config, prior_jitter=prior_jitter),
        function_words=world.function_words,
        object_words=world.object_words,
        images=world.images,
        prior=world.prior,
        fn_scores=world.fn_scores,
    )
