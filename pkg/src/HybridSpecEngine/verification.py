"""Draft verification and adaptive verify-skip.

Retrieval trees are checked chain by chain with sequence-wise relaxed
acceptance; drafter output uses the strict accept-iff-equal rule. The skip
state decides when a retrieved draft may be executed without any verifier
call, and is tuned between episodes from task feedback.
"""
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
from loguru import logger

from .drafting import DraftTree, enumerate_chains
from .errors import CalibrationFailedError, InvalidInputError
from .models import RelaxedAcceptanceParams, UpdateDirection, VerifyOutcome, VerifySkipState


class VerifierModel(Protocol):
    def greedy_tokens(self, context: Sequence[int], observation, draft: Sequence[int]) -> list[int]:
        """Greedy token at every draft position plus one past the end
        (``len(draft) + 1`` tokens), all from a single forward pass."""
        ...

    def features(self, observation) -> np.ndarray:
        ...


def token_bias(draft_bin: int, verify_bin: int) -> int:
    return abs(int(draft_bin) - int(verify_bin))


def accept_sequence(
    draft: Sequence[int],
    verify: Sequence[int],
    params: RelaxedAcceptanceParams,
    gripper: bool = False,
) -> bool:
    if len(draft) != len(verify):
        raise InvalidInputError(f"draft has {len(draft)} tokens, verifier returned {len(verify)}")
    biases = [token_bias(d, v) for d, v in zip(draft, verify)]
    if gripper or not params.enabled:
        return all(b == 0 for b in biases)
    return sum(biases) <= params.bias_seq_max and max(biases, default=0) <= params.bias_token_max


@dataclass
class TreeVerification:
    outcome: VerifyOutcome
    chain: list[str]
    greedy: list[int]
    chains_considered: int


def _common_prefix(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _walk(groups, tokens: list[int], greedy: list[int], known: int, params: RelaxedAcceptanceParams) -> tuple[int, bool]:
    """Accepted token count and whether the walk finished using only
    greedy positions ``<= known``."""
    pos = 0
    for group in groups:
        end = pos + len(group.tokens)
        if end - 1 > known:
            return pos, False
        if not accept_sequence(tokens[pos:end], greedy[pos:end], params, gripper=group.kind == "gripper"):
            return pos, True
        pos = end
    return pos, True


def verify_tree(
    tree: DraftTree,
    verifier: VerifierModel,
    context: Sequence[int],
    observation,
    params: RelaxedAcceptanceParams,
    cap: int = 64,
) -> TreeVerification:
    """Verify chains depth-first; the longest accepted prefix wins.

    Greedy tokens from earlier calls are reused for every position whose
    prefix matches, so a chain that is already rejected by cached tokens costs
    no call. Stops at the first fully accepted chain.
    """
    chains = enumerate_chains(tree, cap)
    cache: list[tuple[list[int], list[int]]] = []
    calls = 0
    best: Optional[tuple[int, list[str], list[int]]] = None
    considered = 0

    for chain in chains:
        considered += 1
        tokens = tree.chain_tokens(chain)
        groups = tree.chain_groups(chain)
        greedy, known = [], -1
        for cached_tokens, cached_greedy in cache:
            shared = _common_prefix(tokens, cached_tokens)
            if shared > known:
                greedy, known = cached_greedy, shared
        accepted, decided = _walk(groups, tokens, greedy, known, params) if known >= 0 else (0, False)
        if not decided:
            greedy = list(verifier.greedy_tokens(context, observation, tokens))
            if len(greedy) != len(tokens) + 1:
                raise InvalidInputError(f"verifier returned {len(greedy)} tokens for a {len(tokens)}-token chain")
            calls += 1
            cache.append((tokens, greedy))
            accepted, _ = _walk(groups, tokens, greedy, len(tokens), params)
        if best is None or accepted > best[0]:
            best = (accepted, chain, greedy)
        if accepted == len(tokens):
            break

    accepted, chain, greedy = best
    tokens = tree.chain_tokens(chain)
    outcome = VerifyOutcome(
        accepted_tokens=tokens[:accepted],
        accept_length=accepted,
        verifier_calls=calls,
        fallback_used=accepted == 0,
        bonus_token=int(greedy[accepted]) if accepted < len(greedy) else None,
    )
    return TreeVerification(outcome=outcome, chain=chain, greedy=greedy, chains_considered=considered)


def verify_draft(draft: Sequence[int], verifier: VerifierModel, context: Sequence[int], observation) -> VerifyOutcome:
    """Strict single-sequence verification used for drafter output."""
    greedy = list(verifier.greedy_tokens(context, observation, draft))
    if len(greedy) != len(draft) + 1:
        raise InvalidInputError(f"verifier returned {len(greedy)} tokens for a {len(draft)}-token draft")
    accepted = _common_prefix(draft, greedy)
    return VerifyOutcome(
        accepted_tokens=list(draft[:accepted]),
        accept_length=accepted,
        verifier_calls=1,
        fallback_used=accepted == 0,
        bonus_token=int(greedy[accepted]),
    )


# ---- verify-skip ----

def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    u = np.asarray(a, dtype=np.float64)
    v = np.asarray(b, dtype=np.float64)
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise InvalidInputError("cosine similarity of a zero vector")
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


def offline_calibrate_skip(trajectories: Sequence[Sequence[Sequence[float]]], T: float) -> tuple[float, int]:
    """Smallest above-boundary similarity over all in-episode pairs.

    Pairs (i, i + d) with similarity S > T are scanned; the minimum S and its
    distance d become (min_S, O_dist). Equal minima keep the larger distance.
    """
    min_S: Optional[float] = None
    O_dist = 0
    usable = 0
    for traj in trajectories:
        feats = np.asarray(traj, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            continue
        usable += 1
        norms = np.linalg.norm(feats, axis=1)
        if np.any(norms == 0):
            raise InvalidInputError("feature trajectory contains a zero vector")
        sims = np.clip((feats @ feats.T) / np.outer(norms, norms), -1.0, 1.0)
        for d in range(1, len(feats)):
            diag = np.diagonal(sims, offset=d)
            above = diag[diag > T]
            if above.size == 0:
                continue
            S = float(above.min())
            if min_S is None or S < min_S or (S == min_S and d > O_dist):
                min_S, O_dist = S, d
    if usable == 0:
        raise InvalidInputError("need at least one feature trajectory with two or more points")
    if min_S is None:
        raise CalibrationFailedError(f"no feature pair is more similar than T={T}")
    return min_S, O_dist


def should_skip(history: Sequence[Sequence[float]], state: Optional[VerifySkipState], d: int) -> tuple[bool, Optional[float]]:
    """Skip decision for a candidate ``d`` steps after the reference feature.

    ``history[-1]`` is the current feature. Returns the decision and the
    similarity it was based on (None when the gate never compared).
    """
    if state is None or d < 1 or len(history) <= d:
        return False, None
    if d > state.O_dist:
        return False, None
    S = cosine_similarity(history[-1], history[-1 - d])
    return S >= state.min_S, S


def update_skip_state(state: VerifySkipState, task_success: bool, S_c: float, min_S_h: float) -> VerifySkipState:
    step = state.delta * abs(S_c - min_S_h)
    raise_min = task_success if state.update_direction == UpdateDirection.AS_WRITTEN else not task_success
    min_S = state.min_S + step if raise_min else state.min_S - step
    min_S = min(max(min_S, state.T), 1.0)
    O_dist = state.O_dist + 1 if task_success else max(1, state.O_dist - 1)
    historical = min_S_h if state.historical_min_S is None else min(state.historical_min_S, min_S_h)
    updated = state.model_copy(update={"min_S": min_S, "O_dist": O_dist, "historical_min_S": min(historical, S_c)})
    logger.debug(f"skip state update success={task_success}: min_S {state.min_S:.6f} -> {min_S:.6f}, O_dist {state.O_dist} -> {O_dist}")
    return updated
