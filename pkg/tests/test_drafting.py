import itertools

import numpy as np
import pytest

from HybridSpecEngine.actions import quantize_many
from HybridSpecEngine.drafting import (
    Draft,
    NoisyOracleDrafter,
    build_sequence_tree,
    drafter_generate,
    enumerate_chains,
    retrieve_drafts,
    split_groups,
)
from HybridSpecEngine.errors import InvalidInputError
from HybridSpecEngine.models import ActionSpaceBounds, Payload
from HybridSpecEngine.retrieval_store import RetrievalStore


class PositionalGreedy:
    """Greedy token at absolute position j is (7 j) mod 256."""

    def greedy_tokens(self, context, observation, draft):
        start = len(context)
        return [(7 * (start + i)) % 256 for i in range(len(draft) + 1)]


def draft_from(tokens, rank):
    return Draft(groups=split_groups(tokens, rank), rank=rank)


def payload(step, next_actions):
    return Payload(
        dataset_name="toy-suite",
        episode_idx=0,
        step_idx=step,
        current_action=[0.0] * 7,
        next_actions=next_actions,
        language_instruction="task",
    )


def lookahead(value):
    return [[value] * 6 + [0.0]] * 3


@pytest.fixture
def bounds():
    return ActionSpaceBounds()


def test_split_groups_layout():
    groups = split_groups(list(range(21)), source_rank=2)
    assert [g.kind for g in groups[:3]] == ["position", "rotation", "gripper"]
    assert len(groups) == 9
    assert groups[0].tokens == (0, 1, 2)
    assert groups[8].tokens == (20,) and groups[8].slice_index == 2
    with pytest.raises(InvalidInputError):
        split_groups(list(range(8)), 0)


def test_retrieve_self_and_truncation(bounds):
    store = RetrievalStore(dim=3)
    store.shard("task-0").insert([1, 0, 0], payload(0, lookahead(0.01)))
    store.shard("task-0").insert([0.6, 0.8, 0], payload(1, lookahead(-0.01)))

    top1 = retrieve_drafts(store, [1, 0, 0], "task-0", 1, bounds)
    assert len(top1) == 1
    assert top1[0].tokens == quantize_many(lookahead(0.01), bounds)

    drafts = retrieve_drafts(store, [1, 0, 0], "task-0", 3, bounds)
    assert len(drafts) == 2
    assert [d.rank for d in drafts] == [0, 1]
    assert drafts[0].score > drafts[1].score
    assert all(g.source_rank == d.rank for d in drafts for g in d.groups)

    assert retrieve_drafts(store, [1, 0, 0], "task-5", 3, bounds) == []
    with pytest.raises(InvalidInputError):
        retrieve_drafts(store, [1, 0, 0], "task-0", 0, bounds)


def test_retrieve_order_matches_exact_search(bounds):
    rng = np.random.default_rng(4)
    store = RetrievalStore(dim=8)
    for i in range(30):
        store.shard("task-0").insert(rng.normal(size=8), payload(i, lookahead(0.0005 * i)))
    q = rng.normal(size=8)
    drafts = retrieve_drafts(store, q, "task-0", 3, bounds)
    exact = store.shard("task-0").search_topk_exact(q, 3)
    assert [d.hit.record_id for d in drafts] == [h.record_id for h in exact]


def test_noisy_drafter_extremes():
    reference = PositionalGreedy()
    context = [5, 6, 7]
    expected = reference.greedy_tokens(context, None, [0] * 13)[:14]
    perfect = NoisyOracleDrafter(reference, 1.0, 256, np.random.default_rng(0))
    assert drafter_generate(perfect, context, None, 14) == expected
    broken = NoisyOracleDrafter(reference, 0.0, 256, np.random.default_rng(0))
    tokens = drafter_generate(broken, context, None, 14)
    assert all(t != e and 0 <= t < 256 for t, e in zip(tokens, expected))


def test_noisy_drafter_match_rate():
    reference = PositionalGreedy()
    drafter = NoisyOracleDrafter(reference, 0.85, 256, np.random.default_rng(9))
    matches = total = 0
    for _ in range(500):
        tokens = drafter.draft([], None, 20)
        expected = reference.greedy_tokens([], None, [0] * 19)
        matches += sum(t == e for t, e in zip(tokens, expected))
        total += len(tokens)
    assert total == 10_000
    assert matches / total == pytest.approx(0.85, abs=0.02)


def test_noisy_drafter_is_seeded():
    a = NoisyOracleDrafter(PositionalGreedy(), 0.5, 256, np.random.default_rng(1)).draft([], None, 30)
    b = NoisyOracleDrafter(PositionalGreedy(), 0.5, 256, np.random.default_rng(1)).draft([], None, 30)
    assert a == b


def test_single_draft_tree_is_one_chain():
    draft = draft_from(list(range(21)), 0)
    tree = build_sequence_tree([draft])
    chains = enumerate_chains(tree)
    assert tree.depth == 9
    assert len(chains) == 1
    assert tree.chain_tokens(chains[0]) == list(range(21))


def test_identical_positions_are_deduplicated():
    a = list(range(21))
    b = list(a)
    for s in range(3):
        for j in range(3, 7):
            b[7 * s + j] += 100
    tree = build_sequence_tree([draft_from(a, 0), draft_from(b, 1)])
    for level, kind in enumerate(tree.kinds):
        expected = 1 if kind == "position" else 2
        assert len(tree.levels[level]) == expected
    merged = tree.node(tree.levels[0][0])
    assert merged["ranks"] == {0, 1} and merged["best_rank"] == 0


def brute_force_chain_count(tree):
    count = 0
    for assignment in itertools.product(*tree.levels):
        constrained = set()
        for level, node in enumerate(assignment):
            if tree.kinds[level] == "gripper":
                constrained.update(i for i in (level - 1, level, level + 1) if 0 <= i < tree.depth)
        allowed = None
        for level in sorted(constrained):
            ranks = tree.node(assignment[level])["ranks"]
            allowed = set(ranks) if allowed is None else allowed & ranks
        if allowed:
            count += 1
    return count


def test_chain_count_matches_brute_force():
    a = list(range(21))
    b = [t + 100 for t in a]
    tree = build_sequence_tree([draft_from(a, 0), draft_from(b, 1)])
    chains = enumerate_chains(tree, cap=10_000)
    assert len(chains) == brute_force_chain_count(tree)
    assert len({tuple(c) for c in chains}) == len(chains)


def test_chain_count_with_partial_overlap_matches_brute_force():
    rng = np.random.default_rng(12)
    drafts = [draft_from([int(t) for t in rng.integers(0, 2, size=21)], r) for r in range(3)]
    tree = build_sequence_tree(drafts)
    chains = enumerate_chains(tree, cap=100_000)
    assert len(chains) == brute_force_chain_count(tree)


def test_gripper_tokens_share_a_source_rank():
    rng = np.random.default_rng(3)
    drafts = [draft_from([int(t) for t in rng.integers(0, 3, size=21)], r) for r in range(3)]
    tree = build_sequence_tree(drafts)
    for chain in enumerate_chains(tree, cap=100_000):
        grippers = [tree.node(n)["ranks"] for n in chain if tree.node(n)["kind"] == "gripper"]
        assert set.intersection(*grippers)
        for level, node in enumerate(chain):
            tokens = tree.node(node)["tokens"]
            assert any(d.groups[level].tokens == tokens for d in drafts)


def test_dfs_order_and_cap():
    a = list(range(21))
    b = [t + 100 for t in a]
    tree = build_sequence_tree([draft_from(a, 0), draft_from(b, 1)])
    chains = enumerate_chains(tree, cap=64)
    assert tree.chain_tokens(chains[0]) == a
    assert all(tree.node(n)["best_rank"] == 0 for n in chains[0])
    assert len(enumerate_chains(tree, cap=1)) == 1
    assert enumerate_chains(tree, cap=1)[0] == chains[0]


def test_tree_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        build_sequence_tree([])
    with pytest.raises(InvalidInputError):
        build_sequence_tree([draft_from(list(range(21)), 0), draft_from(list(range(14)), 1)])
