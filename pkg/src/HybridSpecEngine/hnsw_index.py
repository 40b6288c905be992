"""Hierarchical navigable small-world graph over unit vectors.

Layer 0 holds every vector; each higher layer holds a geometrically shrinking
subset used as long-range shortcuts. Distances are ``1 - dot`` so the index
ranks exactly like the store's cosine scores.
"""
import heapq
import math
from typing import Optional

import numpy as np
from loguru import logger


class HNSWIndex:
    def __init__(self, vectors: np.ndarray, m: int = 16, ef_construct: int = 100, seed: int = 0):
        if vectors.ndim != 2 or len(vectors) == 0:
            raise ValueError("HNSW index needs a non-empty (n, dim) matrix")
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.m = m
        self.m0 = 2 * m
        self.ef_construct = ef_construct
        self.ml = 1.0 / math.log(m)
        self._rng = np.random.default_rng(seed)
        self.levels: list[int] = []
        # neighbors[layer][node] -> list of node ids
        self.neighbors: list[dict[int, list[int]]] = []
        self.entry_point: Optional[int] = None
        for node in range(len(self.vectors)):
            self._insert(node)
        logger.debug(f"built HNSW over {len(self.vectors)} vectors, {len(self.neighbors)} layers")

    def __len__(self) -> int:
        return len(self.levels)

    def _distance(self, query: np.ndarray, node: int) -> float:
        return 1.0 - float(self.vectors[node] @ query)

    def _random_level(self) -> int:
        return int(-math.log(1.0 - self._rng.random()) * self.ml)

    def _search_layer(self, query: np.ndarray, entries: list[int], ef: int, layer: int) -> list[tuple[float, int]]:
        visited = set(entries)
        candidates = [(self._distance(query, e), e) for e in entries]
        heapq.heapify(candidates)
        # max-heap of the current best ef results
        best = [(-d, e) for d, e in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        graph = self.neighbors[layer]
        while candidates:
            dist, node = heapq.heappop(candidates)
            if dist > -best[0][0] and len(best) >= ef:
                break
            for nb in graph.get(node, ()):
                if nb in visited:
                    continue
                visited.add(nb)
                d = self._distance(query, nb)
                if len(best) < ef or d < -best[0][0]:
                    heapq.heappush(candidates, (d, nb))
                    heapq.heappush(best, (-d, nb))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-d, e) for d, e in best)

    def _select_neighbors(self, candidates: list[tuple[float, int]], limit: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        base than to every neighbor already kept; top up with the rest."""
        chosen: list[int] = []
        skipped: list[int] = []
        for dist, node in candidates:
            if len(chosen) >= limit:
                break
            vec = self.vectors[node]
            if all(1.0 - float(vec @ self.vectors[c]) > dist for c in chosen):
                chosen.append(node)
            else:
                skipped.append(node)
        for node in skipped:
            if len(chosen) >= limit:
                break
            chosen.append(node)
        return chosen

    def _link(self, layer: int, node: int, new_neighbors: list[int]) -> None:
        graph = self.neighbors[layer]
        graph[node] = list(new_neighbors)
        limit = self.m0 if layer == 0 else self.m
        for nb in new_neighbors:
            links = graph.setdefault(nb, [])
            if node in links:
                continue
            links.append(node)
            if len(links) > limit:
                base = self.vectors[nb]
                ranked = sorted((1.0 - float(base @ self.vectors[x]), x) for x in links)
                graph[nb] = self._select_neighbors(ranked, limit)

    def _insert(self, node: int) -> None:
        level = self._random_level()
        self.levels.append(level)
        while len(self.neighbors) <= level:
            self.neighbors.append({})
        for layer in range(level + 1):
            self.neighbors[layer].setdefault(node, [])
        if self.entry_point is None:
            self.entry_point = node
            return

        query = self.vectors[node]
        entry = [self.entry_point]
        top = self.levels[self.entry_point]
        for layer in range(top, level, -1):
            entry = [self._search_layer(query, entry, 1, layer)[0][1]]
        for layer in range(min(top, level), -1, -1):
            found = self._search_layer(query, entry, self.ef_construct, layer)
            limit = self.m0 if layer == 0 else self.m
            self._link(layer, node, self._select_neighbors(found, limit))
            entry = [e for _, e in found]
        if level > top:
            self.entry_point = node

    def search(self, query: np.ndarray, k: int, ef_search: int = 100) -> list[int]:
        """Ids of approximately the ``k`` closest vectors, closest first."""
        if self.entry_point is None:
            return []
        query = np.asarray(query, dtype=np.float64)
        entry = [self.entry_point]
        for layer in range(self.levels[self.entry_point], 0, -1):
            entry = [self._search_layer(query, entry, 1, layer)[0][1]]
        found = self._search_layer(query, entry, max(ef_search, k), 0)
        return [node for _, node in found[:k]]
