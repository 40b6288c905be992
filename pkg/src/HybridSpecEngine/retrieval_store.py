"""Task-sharded vector store of demonstration steps.

Each shard (collection) holds unit embeddings, the action payload recorded at
that step and, optionally, the verifier feature vector used for skip
calibration. Exact cosine search is the default; an HNSW graph can be built
per shard and then answers the same queries approximately.
"""
import json
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from .errors import InvalidInputError, ParseError, SchemaError, VersionError
from .hnsw_index import HNSWIndex
from .models import Payload, SearchHit, ShardSummary
from .utils import as_finite_array, dumps_line

FORMAT_VERSION = 1
SHARD_SUFFIX = ".jsonl"
_NORM_TOL = 1e-6


def l2_normalize(v: Sequence[float]) -> np.ndarray:
    arr = as_finite_array(v, "vector", ndim=1)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise InvalidInputError("cannot normalize the zero vector")
    if abs(norm - 1.0) <= _NORM_TOL:
        return arr
    return arr / norm


class Collection:
    def __init__(self, name: str, dim: int):
        if dim < 1:
            raise SchemaError(f"collection dim must be positive, got {dim}")
        self.name = name
        self.dim = dim
        self.payloads: list[Payload] = []
        self.features: list[Optional[np.ndarray]] = []
        self._rows: list[np.ndarray] = []
        self._matrix: Optional[np.ndarray] = None
        self.index: Optional[HNSWIndex] = None

    def __len__(self) -> int:
        return len(self.payloads)

    @property
    def embeddings(self) -> np.ndarray:
        if self._matrix is None or len(self._matrix) != len(self._rows):
            self._matrix = np.vstack(self._rows) if self._rows else np.zeros((0, self.dim))
        return self._matrix

    def insert(self, embedding: Sequence[float], payload: Payload, feature: Optional[Sequence[float]] = None) -> int:
        vec = np.asarray(embedding, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise SchemaError(f"{self.name}: embedding has shape {vec.shape}, collection dim is {self.dim}")
        self._rows.append(l2_normalize(vec))
        self.payloads.append(payload)
        self.features.append(None if feature is None else as_finite_array(feature, "feature", ndim=1))
        if self.index is not None:
            logger.debug(f"{self.name}: insert after index build, dropping HNSW index")
            self.index = None
        return len(self.payloads) - 1

    @property
    def has_features(self) -> bool:
        return len(self.features) > 0 and all(f is not None for f in self.features)

    def build_hnsw(self, m: int = 16, ef_construct: int = 100, seed: int = 0) -> HNSWIndex:
        if len(self) == 0:
            raise InvalidInputError(f"{self.name}: cannot index an empty collection")
        self.index = HNSWIndex(self.embeddings, m=m, ef_construct=ef_construct, seed=seed)
        return self.index

    def _hits(self, ids: np.ndarray, scores: np.ndarray, k: int) -> list[SearchHit]:
        order = np.lexsort((ids, -scores))[:k]
        return [
            SearchHit(score=float(scores[i]), payload=self.payloads[int(ids[i])], record_id=int(ids[i]))
            for i in order
        ]

    def search_topk_exact(self, query: Sequence[float], k: int) -> list[SearchHit]:
        if k < 1:
            raise InvalidInputError(f"k must be at least 1, got {k}")
        if len(self) == 0:
            return []
        q = self._query(query)
        scores = self.embeddings @ q
        return self._hits(np.arange(len(self)), scores, k)

    def search(self, query: Sequence[float], k: int, ef_search: int = 100) -> list[SearchHit]:
        """Top-k through the HNSW index when one is built, exact otherwise."""
        if self.index is None:
            return self.search_topk_exact(query, k)
        if k < 1:
            raise InvalidInputError(f"k must be at least 1, got {k}")
        q = self._query(query)
        ids = np.asarray(self.index.search(q, k, ef_search=ef_search), dtype=np.int64)
        scores = self.embeddings[ids] @ q
        return self._hits(ids, scores, k)

    def _query(self, query: Sequence[float]) -> np.ndarray:
        q = l2_normalize(query)
        if q.shape != (self.dim,):
            raise SchemaError(f"{self.name}: query has dim {q.shape[0]}, collection dim is {self.dim}")
        return q

    def episode_features(self) -> list[list[np.ndarray]]:
        """Stored features grouped per episode, in step order."""
        episodes: dict[tuple[str, int], list[tuple[int, np.ndarray]]] = {}
        for payload, feat in zip(self.payloads, self.features):
            if feat is None:
                continue
            episodes.setdefault((payload.dataset_name, payload.episode_idx), []).append((payload.step_idx, feat))
        return [[f for _, f in sorted(steps, key=lambda s: s[0])] for _, steps in sorted(episodes.items())]

    def summary(self) -> ShardSummary:
        payload_bytes = sum(len(p.model_dump_json().encode("utf-8")) for p in self.payloads)
        return ShardSummary(
            name=self.name,
            records=len(self),
            embedding_bytes=len(self) * self.dim * 8,
            payload_bytes=payload_bytes,
        )

    # ---- persistence ----

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            header = {"version": FORMAT_VERSION, "name": self.name, "dim": self.dim, "metric": "cosine"}
            f.write(dumps_line(header) + "\n")
            for row, payload, feat in zip(self._rows, self.payloads, self.features):
                record = {
                    "embedding": [float(x) for x in row],
                    "payload": payload.model_dump(),
                    "feature": None if feat is None else [float(x) for x in feat],
                }
                f.write(dumps_line(record) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Collection":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ParseError(f"{path}: empty database file", line=1)

        header = _parse_line(path, lines[0], 1)
        if not isinstance(header, dict) or "version" not in header:
            raise ParseError(f"{path}: missing header", line=1)
        if header["version"] != FORMAT_VERSION:
            raise VersionError(f"{path}: unsupported database version {header['version']!r}, expected {FORMAT_VERSION}")
        try:
            collection = cls(name=str(header["name"]), dim=int(header["dim"]))
        except (KeyError, TypeError, ValueError, SchemaError) as e:
            raise ParseError(f"{path}: bad header: {e}", line=1) from None
        if header.get("metric", "cosine") != "cosine":
            raise ParseError(f"{path}: unsupported metric {header.get('metric')!r}", line=1)

        for lineno, text in enumerate(lines[1:], start=2):
            record = _parse_line(path, text, lineno)
            try:
                payload = Payload.model_validate(record["payload"])
                collection.insert(record["embedding"], payload, record.get("feature"))
            except (KeyError, TypeError, ValidationError, SchemaError, InvalidInputError) as e:
                raise ParseError(f"{path}: bad record: {e}", line=lineno) from None
        return collection


def _parse_line(path, text: str, lineno: int):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON: {e.msg}", line=lineno) from None


class RetrievalStore:
    """One collection per task shard."""

    def __init__(self, dim: int):
        self.dim = dim
        self.collections: dict[str, Collection] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.collections

    def __len__(self) -> int:
        return sum(len(c) for c in self.collections.values())

    def shard(self, name: str) -> Collection:
        if name not in self.collections:
            self.collections[name] = Collection(name, self.dim)
        return self.collections[name]

    def names(self) -> list[str]:
        return sorted(self.collections)

    def search(self, name: str, query: Sequence[float], k: int, ef_search: int = 100) -> list[SearchHit]:
        collection = self.collections.get(name)
        if collection is None or len(collection) == 0:
            return []
        return collection.search(query, k, ef_search=ef_search)

    def build_hnsw(self, m: int = 16, ef_construct: int = 100, seed: int = 0) -> None:
        for name in self.names():
            if len(self.collections[name]):
                self.collections[name].build_hnsw(m=m, ef_construct=ef_construct, seed=seed)

    def summaries(self) -> list[ShardSummary]:
        return [self.collections[name].summary() for name in self.names()]

    def save(self, directory: Union[str, Path]) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name in self.names():
            path = directory / f"{name}{SHARD_SUFFIX}"
            self.collections[name].save(path)
            written.append(path)
        logger.info(f"saved {len(written)} shards to {directory}")
        return written

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "RetrievalStore":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"database directory not found: {directory}")
        paths = sorted(directory.glob(f"*{SHARD_SUFFIX}"))
        if not paths:
            raise FileNotFoundError(f"no {SHARD_SUFFIX} shards in {directory}")
        collections = [Collection.load(p) for p in paths]
        dims = {c.dim for c in collections}
        if len(dims) != 1:
            raise SchemaError(f"shards in {directory} disagree on dim: {sorted(dims)}")
        store = cls(dim=dims.pop())
        for c in collections:
            store.collections[c.name] = c
        logger.debug(f"loaded {len(collections)} shards ({len(store)} records) from {directory}")
        return store
