"""Contrastive-image selection over a store of precomputed embeddings.

Two strategies: retrieval of the least cosine-similar image (exact linear
scan, deterministic tie-break by id) and uniform random choice excluding
the query image. The store is immutable after construction and safe for
concurrent read-only queries.

Store file format (``CICD-EMB v1``)::

    CICD-EMB v1 <dim> <count>
    <id> <v1> <v2> ... <vdim>
    ...

ids are whitespace-free strings; components are decimal text.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DuplicateId, InsufficientPool, NotFound, ParseError, ZeroNormError

EMB_MAGIC = "CICD-EMB"
EMB_VERSION = "v1"

__all__ = [
    "EmbeddingStore",
    "SelectionResult",
    "build_store",
    "select_retrieved",
    "select_random",
    "load_store",
    "save_store",
]


@dataclass
class EmbeddingStore:
    """Immutable id -> vector table; insertion order is preserved."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # shape (len(ids), dim)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, image_id: str) -> np.ndarray:
        try:
            return self.vectors[self.ids.index(image_id)]
        except ValueError:
            raise NotFound(f"unknown image id {image_id!r}") from None


@dataclass(frozen=True)
class SelectionResult:
    chosen_id: str
    mode: str  # "retrieved" | "random"
    similarity: float | None = None


def build_store(records: Iterable[tuple[str, Sequence[float]]]) -> EmbeddingStore:
    """Build a store from (id, vector) pairs; validates dims and id uniqueness."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim: int | None = None
    for image_id, vec in records:
        if image_id in seen:
            raise DuplicateId(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        row = np.asarray(vec, dtype=np.float64)
        if row.ndim != 1 or row.size == 0:
            raise DimensionError(f"vector for {image_id!r} must be 1-D and non-empty")
        if dim is None:
            dim = row.size
        elif row.size != dim:
            raise DimensionError(
                f"vector for {image_id!r} has dim {row.size}, expected {dim}")
        ids.append(image_id)
        rows.append(row)
    if not ids:
        raise DimensionError("cannot build an empty embedding store")
    return EmbeddingStore(ids=tuple(ids), vectors=np.stack(rows))


def _cosine_similarities(store: EmbeddingStore, query_vec: np.ndarray) -> np.ndarray:
    qnorm = float(np.linalg.norm(query_vec))
    if qnorm == 0.0:
        raise ZeroNormError("query vector has zero norm")
    norms = np.linalg.norm(store.vectors, axis=1)
    if np.any(norms == 0.0):
        bad = store.ids[int(np.argmin(norms))]
        raise ZeroNormError(f"stored vector {bad!r} has zero norm")
    return (store.vectors @ query_vec) / (norms * qnorm)


def select_retrieved(store: EmbeddingStore, query_id: str, query_vec: Sequence[float]) -> SelectionResult:
    """Candidate (id != query_id) with the lowest cosine similarity.

    Ties are broken toward the lexicographically smallest id, so results
    are reproducible regardless of store insertion order.
    """
    if len(store) < 2:
        raise InsufficientPool("need at least 2 stored images to retrieve a contrast")
    sims = _cosine_similarities(store, np.asarray(query_vec, dtype=np.float64))
    best_id: str | None = None
    best_sim = np.inf
    for image_id, sim in zip(store.ids, sims):
        if image_id == query_id:
            continue
        sim = float(sim)
        if sim < best_sim or (sim == best_sim and (best_id is None or image_id < best_id)):
            best_id, best_sim = image_id, sim
    if best_id is None:
        raise InsufficientPool(f"no candidate differs from query {query_id!r}")
    return SelectionResult(chosen_id=best_id, mode="retrieved", similarity=best_sim)


def select_random(store: EmbeddingStore, query_id: str, rng: np.random.Generator) -> SelectionResult:
    """Uniform choice over stored ids excluding the query id."""
    candidates = [image_id for image_id in store.ids if image_id != query_id]
    if len(store) < 2 or not candidates:
        raise InsufficientPool("need at least 2 distinct images for random selection")
    chosen = candidates[int(rng.integers(len(candidates)))]
    return SelectionResult(chosen_id=chosen, mode="random")


def save_store(store: EmbeddingStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{EMB_MAGIC} {EMB_VERSION} {store.dim} {len(store)}\n")
        for image_id, row in zip(store.ids, store.vectors):
            comps = " ".join(repr(float(x)) for x in row)
            fh.write(f"{image_id} {comps}\n")


def load_store(path) -> EmbeddingStore:
    """Parse and validate a CICD-EMB v1 file."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != EMB_MAGIC:
            raise ParseError(f"{path}: not a {EMB_MAGIC} file")
        if header[1] != EMB_VERSION:
            raise ParseError(f"{path}: unsupported version {header[1]!r}")
        try:
            dim, count = int(header[2]), int(header[3])
        except ValueError as exc:
            raise ParseError(f"{path}: bad header counts") from exc
        records = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ParseError(f"{path}:{lineno}: expected {dim} components")
            try:
                records.append((parts[0], [float(x) for x in parts[1:]]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad component") from exc
    if len(records) != count:
        raise ParseError(f"{path}: header declares {count} records, found {len(records)}")
    return build_store(records)
