"""Hybrid decoding loop.

Every decode round starts at an action-slice boundary and picks one of three
paths: a retrieval round drafts three slices from the demonstration store and
verifies them as a tree (or skips verification), a drafter round completes
one slice through repeated draft/verify iterations, and an autoregressive
round spends one verifier call per token. All work is charged to an abstract
cost model so runs can be compared against plain autoregressive decoding.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from loguru import logger

from .actions import dequantize
from .drafting import DrafterModel, build_sequence_tree, drafter_generate, retrieve_drafts
from .errors import VerifierError
from .kinematics import classify_segment, window_features
from .models import (
    ACTION_DIM,
    EngineConfig,
    EngineMode,
    EpisodeReport,
    NormalizationBounds,
    SDMode,
    StepRecord,
    VerifySkipState,
    WindowFeatures,
)
from .retrieval_store import RetrievalStore
from .toy_env import EnvState, TaskSpec, is_done, is_success, observation_embedding, reset, transition
from .utils import fmt_float, write_csv
from .verification import VerifierModel, should_skip, update_skip_state, verify_draft, verify_tree

CONFIDENT_SCORE = 0.90
SKIP = "skip"
TRACE_HEADER = [
    "step", "decision", "F", "R", "D", "accept_length", "skipped", "verifier_calls", "cost",
    "tokens", "draft_rounds", "slices", "top_score",
]


class Decision(NamedTuple):
    mode: SDMode
    window: Optional[WindowFeatures] = None


def decide_sd(history: Sequence[Sequence[float]], config: EngineConfig, bounds: NormalizationBounds) -> Decision:
    mode = config.mode
    w = config.metric.window
    if mode == EngineMode.PURE_RETRIEVAL:
        return Decision(SDMode.RETRIEVAL_SD)
    if mode == EngineMode.RETRIEVAL_ONLY:
        return Decision(SDMode.AUTOREGRESSIVE if len(history) < w else SDMode.RETRIEVAL_SD)
    if mode == EngineMode.PURE_DRAFTER:
        return Decision(SDMode.DRAFTER_SD)
    if mode == EngineMode.AUTOREGRESSIVE:
        return Decision(SDMode.AUTOREGRESSIVE)
    if len(history) < w:
        return Decision(SDMode.DRAFTER_SD)
    feats = window_features(history[-w:], config.metric, bounds)
    return Decision(classify_segment(feats.F, config.metric.threshold), feats)


@dataclass
class Engine:
    config: EngineConfig
    verifier: VerifierModel
    metric_bounds: NormalizationBounds
    store: Optional[RetrievalStore] = None
    drafter: Optional[DrafterModel] = None
    skip_state: Optional[VerifySkipState] = None


@dataclass
class EpisodeState:
    env: EnvState
    positions: list = field(default_factory=list)
    features: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    records: list = field(default_factory=list)
    anchor_step: Optional[int] = None
    skip_similarities: list = field(default_factory=list)
    top_scores: list = field(default_factory=list)
    slices_by_decision: dict = field(default_factory=dict)


@dataclass
class RoundPlan:
    decision: str
    slices: list
    cost: float = 0.0
    verifier_calls: int = 0
    accepted: int = 0
    draft_rounds: int = 0
    skipped: bool = False
    top_score: Optional[float] = None
    anchor: bool = False
    similarity: Optional[float] = None


@dataclass
class EpisodeResult:
    report: EpisodeReport
    records: list[StepRecord]
    tokens: list[int]
    skip_state: Optional[VerifySkipState]


class Scheduler:
    def __init__(self, engine: Engine):
        self.engine = engine
        self.config = engine.config

    # ---- helpers ----

    def _simulate(self, state: EnvState, tokens: Sequence[int]) -> EnvState:
        action = dequantize(list(tokens), self.config.actions.bounds, self.config.actions.n_bins)
        return transition(state, action, self.config.env, self.config.actions.bounds)

    def _complete_slice(self, state: EnvState, partial: list[int], plan: RoundPlan) -> list[int]:
        """Finish a slice one verifier call per token."""
        while len(partial) < ACTION_DIM:
            partial.append(int(self.engine.verifier.greedy_tokens(partial, state, [])[0]))
            plan.verifier_calls += 1
            plan.cost += self.config.cost.verifier_call
        return partial

    def _autoregressive(self, state: EnvState, plan: RoundPlan) -> RoundPlan:
        plan.slices.append(self._complete_slice(state, [], plan))
        return plan

    def _drafter_round(self, state: EnvState, plan: RoundPlan) -> RoundPlan:
        drafter = self.engine.drafter
        if drafter is None:
            raise RuntimeError("drafter round requested but no drafter is configured")
        partial: list[int] = []
        while len(partial) < ACTION_DIM:
            length = min(self.config.drafter.draft_length, ACTION_DIM - len(partial))
            draft = drafter_generate(drafter, partial, state, length)
            plan.cost += drafter.cost_per_token * length
            outcome = verify_draft(draft, self.engine.verifier, partial, state)
            plan.verifier_calls += outcome.verifier_calls
            plan.cost += self.config.cost.verifier_call * outcome.verifier_calls
            plan.draft_rounds += 1
            plan.accepted += outcome.accept_length
            partial.extend(outcome.accepted_tokens)
            if len(partial) < ACTION_DIM:
                partial.append(outcome.bonus_token)
        plan.slices.append(partial)
        return plan

    def _retrieval_round(self, ep: EpisodeState, plan: RoundPlan) -> Optional[RoundPlan]:
        """None when the shard has nothing to offer."""
        cfg = self.config
        state = ep.env
        plan.cost += cfg.cost.retrieval_query
        drafts = []
        if self.engine.store is not None:
            query = observation_embedding(state, cfg.retrieval.dim)
            drafts = retrieve_drafts(
                self.engine.store, query, state.task.task_id, cfg.retrieval.k_top,
                cfg.actions.bounds, cfg.actions.n_bins, cfg.retrieval.ef_search,
            )
        if not drafts:
            return None
        plan.top_score = drafts[0].score
        top = drafts[0].tokens

        if cfg.mode == EngineMode.RETRIEVAL_ONLY:
            plan.skipped = True
            plan.draft_rounds += 1
            plan.accepted += len(top)
            plan.slices.extend(top[i:i + ACTION_DIM] for i in range(0, len(top), ACTION_DIM))
            return plan

        if cfg.skip.enabled and self.engine.skip_state is not None and ep.anchor_step is not None:
            gap = state.step - ep.anchor_step
            skip, similarity = should_skip(ep.features, self.engine.skip_state, gap)
            plan.similarity = similarity
            if skip:
                plan.skipped = True
                plan.cost += cfg.cost.skip
                plan.draft_rounds += 1
                plan.accepted += len(top)
                plan.slices.extend(top[i:i + ACTION_DIM] for i in range(0, len(top), ACTION_DIM))
                return plan

        tree = build_sequence_tree(drafts)
        result = verify_tree(tree, self.engine.verifier, [], state, cfg.acceptance, cfg.chain_cap)
        outcome = result.outcome
        plan.anchor = True
        plan.verifier_calls += outcome.verifier_calls
        plan.cost += cfg.cost.verifier_call * outcome.verifier_calls
        plan.draft_rounds += 1
        plan.accepted += outcome.accept_length

        accepted = outcome.accepted_tokens
        full = len(accepted) // ACTION_DIM
        for s in range(full):
            chunk = accepted[s * ACTION_DIM:(s + 1) * ACTION_DIM]
            plan.slices.append(chunk)
            state = self._simulate(state, chunk)
            if is_done(state, cfg.env):
                return plan
        remainder = accepted[full * ACTION_DIM:]
        if remainder or not accepted:
            partial = list(remainder) + [outcome.bonus_token]
            plan.slices.append(self._complete_slice(state, partial, plan))
        return plan

    # ---- rounds ----

    def run_step(self, ep: EpisodeState) -> StepRecord:
        cfg = self.config
        decision = decide_sd(ep.positions, cfg, self.engine.metric_bounds)
        mode = decision.mode
        plan = RoundPlan(decision=mode.value, slices=[])
        degraded = False
        try:
            if mode == SDMode.RETRIEVAL_SD:
                result = self._retrieval_round(ep, plan)
                if result is None:
                    if cfg.mode == EngineMode.HYBRID and self.engine.drafter is not None:
                        logger.debug(f"step {ep.env.step}: empty shard, drafter round instead")
                        mode = SDMode.DRAFTER_SD
                        plan.decision = mode.value
                        result = self._drafter_round(ep.env, plan)
                    else:
                        mode = SDMode.AUTOREGRESSIVE
                        plan.decision = mode.value
                        result = self._autoregressive(ep.env, plan)
                plan = result
            elif mode == SDMode.DRAFTER_SD:
                plan = self._drafter_round(ep.env, plan)
            else:
                plan = self._autoregressive(ep.env, plan)
        except VerifierError:
            raise
        except Exception as e:
            logger.warning(f"step {ep.env.step}: {mode.value} round failed ({e!r}), decoding autoregressively")
            degraded = True
            mode = SDMode.AUTOREGRESSIVE
            plan = self._autoregressive(ep.env, RoundPlan(decision=mode.value, slices=[], cost=plan.cost))

        record = self._commit(ep, plan, decision, degraded)
        ep.records.append(record)
        return record

    def _commit(self, ep: EpisodeState, plan: RoundPlan, decision: Decision, degraded: bool) -> StepRecord:
        cfg = self.config
        start_step = ep.env.step
        if plan.anchor:
            ep.anchor_step = start_step
        if plan.similarity is not None:
            ep.skip_similarities.append(plan.similarity)
        if plan.top_score is not None:
            ep.top_scores.append(plan.top_score)

        executed = 0
        for chunk in plan.slices:
            if is_done(ep.env, cfg.env):
                break
            ep.env = self._simulate(ep.env, chunk)
            ep.tokens.extend(chunk)
            ep.positions.append(ep.env.pose)
            ep.features.append(self.engine.verifier.features(ep.env))
            executed += 1
        if executed < len(plan.slices):
            logger.debug(f"step {start_step}: dropped {len(plan.slices) - executed} drafted slices at episode end")

        share = SKIP if plan.skipped and plan.decision == SDMode.RETRIEVAL_SD.value else plan.decision
        ep.slices_by_decision[share] = ep.slices_by_decision.get(share, 0) + executed

        window = decision.window
        return StepRecord(
            step_index=start_step,
            decision=SDMode(plan.decision),
            F=window.F if window else None,
            R=window.R if window else None,
            D=window.D if window else None,
            tokens_emitted=executed * ACTION_DIM,
            slices=executed,
            accept_length=plan.accepted,
            draft_rounds=plan.draft_rounds,
            skipped=plan.skipped,
            verifier_calls=plan.verifier_calls,
            cost=plan.cost,
            top_score=plan.top_score,
            degraded=degraded,
        )

    def run_episode(self, task: TaskSpec, trial: int = 0, seed: int = 0, horizon: Optional[int] = None) -> EpisodeResult:
        cfg = self.config
        if horizon is not None and horizon != cfg.env.horizon:
            self.config = cfg = cfg.model_copy(update={"env": cfg.env.model_copy(update={"horizon": horizon})})
        ep = EpisodeState(env=reset(task))
        ep.positions.append(ep.env.pose)
        ep.features.append(self.engine.verifier.features(ep.env))
        while not is_done(ep.env, cfg.env):
            self.run_step(ep)

        report = summarize_episode(
            ep, task.task_id, trial, seed,
            success=bool(ep.env.step > 0 and is_success(ep.env, cfg.env)),
            verifier_call=cfg.cost.verifier_call,
        )
        if cfg.skip.enabled and self.engine.skip_state is not None:
            state = self.engine.skip_state
            historical = state.historical_min_S if state.historical_min_S is not None else state.min_S
            current = min(ep.skip_similarities) if ep.skip_similarities else historical
            self.engine.skip_state = update_skip_state(state, report.success, current, historical)
        logger.debug(
            f"{task.task_id} trial {trial}: success={report.success} steps={report.steps} "
            f"AL={report.mean_AL:.2f} speedup={report.speedup:.2f}"
        )
        return EpisodeResult(report=report, records=ep.records, tokens=ep.tokens, skip_state=self.engine.skip_state)


def accept_per_call(records: Sequence[StepRecord]) -> float:
    """Tokens accepted per verifier call over verified drafting rounds.

    Skipped and autoregressive rounds are left out.
    """
    verified = [r for r in records if r.draft_rounds and not r.skipped and r.verifier_calls]
    calls = sum(r.verifier_calls for r in verified)
    return sum(r.accept_length for r in verified) / calls if calls else 0.0


def summarize_episode(
    ep: EpisodeState, task_id: str, trial: int, seed: int, success: bool, verifier_call: float = 1.0,
) -> EpisodeReport:
    """Autoregressive cost is one verifier call per emitted token."""
    records: list[StepRecord] = ep.records
    cost = float(sum(r.cost for r in records))
    tokens = sum(r.tokens_emitted for r in records)
    ar_cost = float(tokens) * verifier_call
    rounds = sum(r.draft_rounds for r in records)
    accepted = sum(r.accept_length for r in records)
    if tokens == 0:
        speedup = 1.0
    elif cost == 0:
        speedup = ar_cost
    else:
        speedup = ar_cost / cost
    total_slices = sum(ep.slices_by_decision.values())
    mix = {k: v / total_slices for k, v in sorted(ep.slices_by_decision.items())} if total_slices else {}
    scores = np.asarray(ep.top_scores, dtype=np.float64)
    return EpisodeReport(
        task_id=task_id,
        trial=trial,
        seed=seed,
        success=success,
        steps=ep.env.step,
        mean_AL=accepted / rounds if rounds else 0.0,
        mean_AL_per_call=accept_per_call(records),
        cost_units=cost,
        ar_cost_units=ar_cost,
        speedup=speedup,
        decision_mix=mix,
        retrieval_rounds=len(scores),
        mean_top_score=float(scores.mean()) if len(scores) else None,
        confident_fraction=float((scores > CONFIDENT_SCORE).mean()) if len(scores) else None,
    )


def write_trace(path: Union[str, Path], records: Sequence[StepRecord]) -> None:
    rows = [
        [
            r.step_index, r.decision.value, fmt_float(r.F), fmt_float(r.R), fmt_float(r.D),
            r.accept_length, int(r.skipped), r.verifier_calls, fmt_float(r.cost),
            r.tokens_emitted, r.draft_rounds, r.slices, fmt_float(r.top_score),
        ]
        for r in records
    ]
    write_csv(path, TRACE_HEADER, rows)
