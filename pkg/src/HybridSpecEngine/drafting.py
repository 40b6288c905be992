"""Draft generation and the sequence-wise draft tree.

Retrieved lookahead actions are quantized and cut into kinematic groups
(position xyz, rotation, gripper). Groups from several retrieval hits are
merged level by level into a tree whose root-to-leaf chains are the
candidate continuations handed to verification.
"""
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import networkx as nx
import numpy as np
from loguru import logger

from .actions import quantize_many
from .errors import InvalidInputError
from .models import ACTION_DIM, ActionSpaceBounds, SearchHit
from .retrieval_store import RetrievalStore

ROOT = "root"
GROUP_LAYOUT = (("position", 3), ("rotation", 3), ("gripper", 1))


@dataclass(frozen=True)
class SequenceGroup:
    kind: str
    tokens: tuple[int, ...]
    source_rank: Optional[int]  # None for drafter output
    slice_index: int


@dataclass
class Draft:
    groups: list[SequenceGroup]
    score: Optional[float] = None
    rank: Optional[int] = None
    hit: Optional[SearchHit] = None

    @property
    def tokens(self) -> list[int]:
        return [t for g in self.groups for t in g.tokens]


def split_groups(tokens: Sequence[int], source_rank: Optional[int], first_slice: int = 0) -> list[SequenceGroup]:
    if len(tokens) % ACTION_DIM:
        raise InvalidInputError(f"draft length {len(tokens)} is not a whole number of action slices")
    groups = []
    for s in range(len(tokens) // ACTION_DIM):
        offset = s * ACTION_DIM
        for kind, width in GROUP_LAYOUT:
            groups.append(SequenceGroup(kind, tuple(int(t) for t in tokens[offset:offset + width]), source_rank, first_slice + s))
            offset += width
    return groups


def retrieve_drafts(
    store: RetrievalStore,
    query: Sequence[float],
    task: str,
    k_top: int,
    bounds: ActionSpaceBounds,
    n_bins: int = 256,
    ef_search: int = 100,
) -> list[Draft]:
    if k_top < 1:
        raise InvalidInputError(f"k_top must be at least 1, got {k_top}")
    hits = store.search(task, query, k_top, ef_search=ef_search)
    drafts = []
    for rank, hit in enumerate(hits):
        tokens = quantize_many(hit.payload.next_actions, bounds, n_bins)
        drafts.append(Draft(groups=split_groups(tokens, rank), score=hit.score, rank=rank, hit=hit))
    return drafts


class DrafterModel(Protocol):
    cost_per_token: float

    def draft(self, context: Sequence[int], observation, length: int) -> list[int]:
        ...


class GreedySource(Protocol):
    def greedy_tokens(self, context: Sequence[int], observation, draft: Sequence[int]) -> list[int]:
        ...


class NoisyOracleDrafter:
    """Drafter that agrees with a reference model with probability ``accuracy``.

    Each drafted token is the reference's greedy token given the drafter's own
    prefix, or, on a miss, a uniformly drawn different bin.
    """

    def __init__(self, reference: GreedySource, accuracy: float, n_bins: int, rng: np.random.Generator, cost_per_token: float = 0.1):
        self.reference = reference
        self.accuracy = accuracy
        self.n_bins = n_bins
        self.rng = rng
        self.cost_per_token = cost_per_token

    def draft(self, context: Sequence[int], observation, length: int) -> list[int]:
        if length < 1:
            raise InvalidInputError(f"draft length must be at least 1, got {length}")
        out: list[int] = []
        for _ in range(length):
            greedy = self.reference.greedy_tokens(context, observation, out)[-1]
            if self.rng.random() < self.accuracy:
                out.append(int(greedy))
            else:
                r = int(self.rng.integers(0, self.n_bins - 1))
                out.append(r if r < greedy else r + 1)
        return out


def drafter_generate(drafter: DrafterModel, context: Sequence[int], observation, length: int) -> list[int]:
    tokens = drafter.draft(context, observation, length)
    if len(tokens) != length:
        raise InvalidInputError(f"drafter returned {len(tokens)} tokens, expected {length}")
    return tokens


@dataclass
class DraftTree:
    graph: nx.DiGraph
    levels: list[list[str]] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def node(self, node_id: str) -> dict:
        return self.graph.nodes[node_id]

    def chain_tokens(self, chain: Sequence[str]) -> list[int]:
        return [t for n in chain for t in self.graph.nodes[n]["tokens"]]

    def chain_groups(self, chain: Sequence[str]) -> list[SequenceGroup]:
        return [self.graph.nodes[n]["group"] for n in chain]


def build_sequence_tree(drafts: Sequence[Draft]) -> DraftTree:
    if not drafts:
        raise InvalidInputError("cannot build a tree from zero drafts")
    depth = len(drafts[0].groups)
    if any(len(d.groups) != depth for d in drafts):
        raise InvalidInputError("all drafts must cover the same number of slices")

    graph = nx.DiGraph()
    graph.add_node(ROOT, level=-1)
    tree = DraftTree(graph=graph)
    for level in range(depth):
        kind = drafts[0].groups[level].kind
        tree.kinds.append(kind)
        by_tokens: dict[tuple[int, ...], str] = {}
        ids: list[str] = []
        for i, d in enumerate(drafts):
            group = d.groups[level]
            rank = d.rank if d.rank is not None else i
            node_id = by_tokens.get(group.tokens)
            if node_id is None:
                node_id = f"L{level}N{len(ids)}"
                by_tokens[group.tokens] = node_id
                ids.append(node_id)
                graph.add_node(node_id, level=level, kind=kind, tokens=group.tokens, ranks={rank}, best_rank=rank, group=group)
            else:
                attrs = graph.nodes[node_id]
                attrs["ranks"].add(rank)
                if rank < attrs["best_rank"]:
                    attrs["best_rank"] = rank
                    attrs["group"] = group
        tree.levels.append(ids)

    for level in range(depth):
        parents = [ROOT] if level == 0 else tree.levels[level - 1]
        for p in parents:
            for c in tree.levels[level]:
                if _may_link(graph, p, c):
                    graph.add_edge(p, c)
    return tree


def _may_link(graph: nx.DiGraph, parent: str, child: str) -> bool:
    if parent == ROOT:
        return True
    p, c = graph.nodes[parent], graph.nodes[child]
    if p["kind"] == "gripper" or c["kind"] == "gripper":
        return bool(p["ranks"] & c["ranks"])
    return True


def enumerate_chains(tree: DraftTree, cap: int = 64) -> list[list[str]]:
    """Depth-first chains, best source rank first, at most ``cap``.

    A chain is kept only if a single source rank is shared by every gripper
    node on it and by that node's neighbors on the chain.
    """
    graph = tree.graph
    chains: list[list[str]] = []
    if cap < 1 or tree.depth == 0:
        return chains

    def children(node: str) -> list[str]:
        return sorted(graph.successors(node), key=lambda n: (graph.nodes[n]["best_rank"], n))

    def visit(node: str, path: list[str], allowed: Optional[frozenset]) -> None:
        if len(chains) >= cap:
            return
        if len(path) == tree.depth:
            chains.append(list(path))
            return
        for child in children(node):
            narrowed = allowed
            attrs = graph.nodes[child]
            touches_gripper = attrs["kind"] == "gripper" or (node != ROOT and graph.nodes[node]["kind"] == "gripper")
            if touches_gripper:
                narrowed = frozenset(attrs["ranks"]) if narrowed is None else narrowed & attrs["ranks"]
                if attrs["kind"] == "gripper" and node != ROOT:
                    narrowed = narrowed & graph.nodes[node]["ranks"]
                if not narrowed:
                    continue
            path.append(child)
            visit(child, path, narrowed)
            path.pop()
            if len(chains) >= cap:
                return

    visit(ROOT, [], None)
    if len(chains) >= cap:
        logger.debug(f"chain enumeration stopped at cap {cap}")
    return chains
