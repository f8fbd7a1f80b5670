"""Stub model: deterministic tabular logits, no weights, no GPU.

Logits are read from a fixed pseudo-random table keyed by (image id, fed
token sequence), so identical contexts always replay identical vectors and
different images genuinely differ. The end token drifts upward with
context length so driven generations terminate.
"""

from __future__ import annotations

import hashlib

import numpy as np

STUB_TOKENS = [
    "the", "a", "is", "on", "and", "with", "near", "under",
    "box", "ball", "cup", "lamp", "tree", "bird", "road", "door",
    "red", "blue", "tall", "small", "wide", "dark", "flat", "round",
    "left", "right", "front", "back", "above", "below", "inside",
    "<eos>",
]

EOS_ID = len(STUB_TOKENS) - 1


class StubSession:
    def __init__(self, model: "StubModel", image_id: str, prompt):
        self.model = model
        self.image_id = image_id
        self.fed = [int(t) for t in prompt]

    def step_logits(self) -> np.ndarray:
        return self.model.table_logits(self.image_id, self.fed)

    def feed(self, token: int) -> None:
        self.fed.append(int(token))


class StubModel:
    """Accepts any image id; serves the fixed vocabulary above."""

    def __init__(self, table_seed: int = 0, eos_drift_after: int = 8):
        self.token_table = list(STUB_TOKENS)
        self.eos_id = EOS_ID
        self.vocab_size = len(self.token_table)
        self.table_seed = table_seed
        self.eos_drift_after = eos_drift_after

    def table_logits(self, image_id: str, fed) -> np.ndarray:
        key = f"{self.table_seed}|{image_id}|{','.join(map(str, fed))}".encode()
        seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")
        rng = np.random.Generator(np.random.PCG64(seed))
        logits = rng.uniform(-2.0, 2.0, self.vocab_size)
        logits[self.eos_id] += float(len(fed) - self.eos_drift_after)
        return logits

    def open_session(self, image_id: str, prompt) -> StubSession:
        for token in prompt:
            if not 0 <= int(token) < self.vocab_size:
                raise ValueError(f"prompt token {token} outside vocabulary")
        return StubSession(self, str(image_id), prompt)
