"""Demonstration recording, database building and batch evaluation."""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import multiprocess
import numpy as np
from loguru import logger
from pydantic import ValidationError
from tqdm import tqdm

from .actions import dequantize
from .config import resolve_metric_bounds
from .drafting import NoisyOracleDrafter
from .errors import ConfigurationError, ParseError, SchemaError
from .kinematics import bounds_from_samples, positions_from_deltas, window_samples
from .models import (
    LOOKAHEAD,
    CalibrationResult,
    EngineConfig,
    EngineMode,
    EpisodeReport,
    EvalReport,
    NormalizationBounds,
    Payload,
    SDMode,
    StepRecord,
    TaskSummary,
    VerifySkipState,
)
from .oracle import OracleVLA, rollout
from .retrieval_store import RetrievalStore
from .scheduler import CONFIDENT_SCORE, SKIP, Engine, Scheduler, accept_per_call, write_trace
from .toy_env import TaskSpec, make_task_suite, observation_embedding, perturb_task, reset
from .utils import derive_rng
from .verification import offline_calibrate_skip

DEMO_SALT = 101
EVAL_SALT = 202
RETRIEVAL_MODES = (EngineMode.HYBRID, EngineMode.PURE_RETRIEVAL, EngineMode.RETRIEVAL_ONLY)


@dataclass
class DemoRecord:
    embedding: np.ndarray
    payload: Payload
    feature: np.ndarray


@dataclass
class Demonstration:
    task_id: str
    episode_idx: int
    records: list[DemoRecord] = field(default_factory=list)


def build_oracle(config: EngineConfig) -> OracleVLA:
    return OracleVLA(config.env, config.actions, n_tasks=config.env.n_tasks, feature_dim=config.retrieval.dim)


def select_tasks(config: EngineConfig) -> list[TaskSpec]:
    tasks = make_task_suite(config.env)
    if config.eval.tasks is not None:
        wanted = set(config.eval.tasks)
        unknown = wanted - {t.task_id for t in tasks}
        if unknown:
            raise ConfigurationError(f"unknown task ids in eval.tasks: {sorted(unknown)}")
        tasks = [t for t in tasks if t.task_id in wanted]
    return tasks


def task_instance(task: TaskSpec, radius: float, seed: int, salt: int, trial: int) -> TaskSpec:
    return perturb_task(task, radius, derive_rng(seed, salt, task.index, trial))


def record_demonstrations(
    config: EngineConfig,
    tasks: Sequence[TaskSpec],
    n_episodes: int,
    seed: int,
    perturb_radius: Optional[float] = None,
) -> list[Demonstration]:
    """Roll out the oracle and turn every step into a retrieval record.

    A record at step i stores the action executed at i and the actions of
    steps i, i+1, i+2; the tail of an episode repeats its last action.
    """
    if n_episodes < 1:
        raise ConfigurationError("need at least one demonstration episode")
    radius = config.env.demo_perturb_radius if perturb_radius is None else perturb_radius
    oracle = build_oracle(config)
    bounds, n_bins = config.actions.bounds, config.actions.n_bins
    demos = []
    for task in tasks:
        for ep_idx in range(n_episodes):
            instance = task_instance(task, radius, seed, DEMO_SALT, ep_idx)
            steps = rollout(oracle, reset(instance), config.env.horizon)
            actions = [dequantize(tokens, bounds, n_bins) for _, tokens in steps]
            demo = Demonstration(task_id=task.task_id, episode_idx=ep_idx)
            for i, (state, _) in enumerate(steps):
                lookahead = [actions[min(i + j, len(actions) - 1)] for j in range(LOOKAHEAD)]
                payload = Payload(
                    dataset_name=config.metric.suite,
                    episode_idx=ep_idx,
                    step_idx=i,
                    current_action=actions[i],
                    next_actions=lookahead,
                    language_instruction=task.instruction,
                )
                demo.records.append(DemoRecord(
                    embedding=observation_embedding(state, config.retrieval.dim),
                    payload=payload,
                    feature=oracle.features(state),
                ))
            demos.append(demo)
    logger.info(f"recorded {len(demos)} demonstrations ({sum(len(d.records) for d in demos)} steps)")
    return demos


def build_database(demos: Sequence[Demonstration], dim: int) -> RetrievalStore:
    if not demos:
        raise ConfigurationError("cannot build a database from zero demonstrations")
    store = RetrievalStore(dim=dim)
    for demo in demos:
        shard = store.shard(demo.task_id)
        for rec in demo.records:
            shard.insert(rec.embedding, rec.payload, rec.feature)
    logger.info(f"built {len(store.collections)} shards with {len(store)} records")
    return store


def calibrate_skip(store: RetrievalStore, T: float, delta: float) -> CalibrationResult:
    trajectories = []
    for name in store.names():
        collection = store.collections[name]
        if len(collection) and not collection.has_features:
            raise SchemaError(f"shard {name!r} has no features stored")
        trajectories.extend(collection.episode_features())
    if not trajectories:
        raise SchemaError("database has no features stored")
    min_S, O_dist = offline_calibrate_skip(trajectories, T)
    logger.info(f"calibrated verify-skip: min_S={min_S:.6f} O_dist={O_dist}")
    return CalibrationResult(T=T, min_S=min_S, O_dist=O_dist, delta=delta)


def write_calibration(result: CalibrationResult, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(result.model_dump(), f, indent=2)
        f.write("\n")


def load_calibration(path: Union[str, Path]) -> CalibrationResult:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: malformed calibration file: {e.msg}", line=e.lineno) from None
    try:
        return CalibrationResult.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"{path}: invalid calibration: {e}") from None


def skip_state_from(calibration: CalibrationResult, config: EngineConfig) -> VerifySkipState:
    try:
        return VerifySkipState(
            T=calibration.T,
            min_S=calibration.min_S,
            O_dist=calibration.O_dist,
            delta=calibration.delta,
            update_direction=config.skip.update_direction,
            historical_min_S=calibration.min_S,
        )
    except ValidationError as e:
        raise ConfigurationError(f"calibration does not give a usable skip state: {e}") from None


@dataclass
class EpisodeOutput:
    report: EpisodeReport
    records: list[StepRecord]
    tokens: list[int]


def _run_task(config: EngineConfig, task: TaskSpec, store: Optional[RetrievalStore],
              skip_state: Optional[VerifySkipState], metric_bounds: NormalizationBounds,
              seed: int, trials: int) -> list[EpisodeOutput]:
    oracle = build_oracle(config)
    engine = Engine(config=config, verifier=oracle, metric_bounds=metric_bounds, store=store, skip_state=skip_state)
    outputs = []
    for trial in range(trials):
        instance = task_instance(task, config.env.eval_perturb_radius, seed, EVAL_SALT, trial)
        engine.drafter = NoisyOracleDrafter(
            oracle,
            config.drafter.accuracy,
            config.actions.n_bins,
            derive_rng(config.drafter.seed, seed, task.index, trial),
            cost_per_token=config.cost.drafter_token,
        )
        result = Scheduler(engine).run_episode(instance, trial=trial, seed=seed)
        outputs.append(EpisodeOutput(report=result.report, records=result.records, tokens=result.tokens))
    return outputs


def _run_task_args(args) -> list[EpisodeOutput]:
    return _run_task(*args)


def decision_mix(records: Sequence[StepRecord]) -> dict[str, float]:
    counts: dict[str, int] = {}
    for r in records:
        key = SKIP if r.skipped and r.decision == SDMode.RETRIEVAL_SD else r.decision.value
        counts[key] = counts.get(key, 0) + r.slices
    total = sum(counts.values())
    return {k: v / total for k, v in sorted(counts.items())} if total else {}


def summarize(task_id: str, outputs: Sequence[EpisodeOutput]) -> TaskSummary:
    records = [r for o in outputs for r in o.records]
    rounds = sum(r.draft_rounds for r in records)
    cost = sum(o.report.cost_units for o in outputs)
    ar_cost = sum(o.report.ar_cost_units for o in outputs)
    scores = np.asarray([r.top_score for r in records if r.top_score is not None], dtype=np.float64)
    return TaskSummary(
        task_id=task_id,
        episodes=len(outputs),
        SR=sum(o.report.success for o in outputs) / len(outputs) if outputs else 0.0,
        mean_AL=sum(r.accept_length for r in records) / rounds if rounds else 0.0,
        mean_AL_per_call=accept_per_call(records),
        speedup=ar_cost / cost if cost > 0 else 1.0,
        mean_steps=float(np.mean([o.report.steps for o in outputs])) if outputs else 0.0,
        decision_mix=decision_mix(records),
        mean_top_score=float(scores.mean()) if len(scores) else None,
        confident_fraction=float((scores > CONFIDENT_SCORE).mean()) if len(scores) else None,
    )


@dataclass
class Evaluation:
    report: EvalReport
    outputs: dict[str, list[EpisodeOutput]]


def evaluate(
    config: EngineConfig,
    store: Optional[RetrievalStore],
    skip_state: Optional[VerifySkipState] = None,
    tasks: Optional[Sequence[TaskSpec]] = None,
    trials: Optional[int] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
    metric_bounds: Optional[NormalizationBounds] = None,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> Evaluation:
    """Run trials x tasks episodes and aggregate them.

    Each task runs its trials in order with its own copy of the skip state,
    so the result does not depend on ``jobs``.
    """
    tasks = select_tasks(config) if tasks is None else list(tasks)
    trials = config.eval.trials if trials is None else trials
    seed = config.seed if seed is None else seed
    jobs = config.eval.jobs if jobs is None else jobs
    if metric_bounds is None:
        metric_bounds = resolve_metric_bounds(config)
    if config.mode in RETRIEVAL_MODES and store is None:
        raise ConfigurationError(f"mode {config.mode.value} needs a retrieval database")
    if config.skip.enabled and skip_state is None and config.mode in RETRIEVAL_MODES:
        logger.warning("verify-skip enabled without a calibration; skipping is off for this run")
    if not config.skip.enabled:
        skip_state = None

    logger.info(f"evaluating {len(tasks)} tasks x {trials} trials in {config.mode.value} mode")
    work = [(config, task, store, skip_state, metric_bounds, seed, trials) for task in tasks]
    if jobs > 1 and len(work) > 1:
        with multiprocess.Pool(min(jobs, len(work))) as pool:
            results = list(tqdm(pool.imap(_run_task_args, work), total=len(work), desc="tasks", disable=not progress))
    else:
        results = [_run_task_args(w) for w in tqdm(work, desc="tasks", disable=not progress)]

    outputs = {task.task_id: res for task, res in zip(tasks, results)}
    summaries = [summarize(task_id, res) for task_id, res in outputs.items()]
    every = [o for res in outputs.values() for o in res]
    report = EvalReport(
        mode=config.mode,
        seed=seed,
        tasks=summaries,
        aggregate=summarize("all", every) if every else None,
        episodes=[o.report for o in every],
    )
    if out_dir is not None:
        write_eval_artifacts(report, outputs, out_dir)
    return Evaluation(report=report, outputs=outputs)


def write_eval_artifacts(report: EvalReport, outputs: dict[str, list[EpisodeOutput]], out_dir: Union[str, Path]) -> None:
    out_dir = Path(out_dir)
    traces = out_dir / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        f.write(report.model_dump_json(indent=2))
        f.write("\n")
    for task_id, res in outputs.items():
        for o in res:
            write_trace(traces / f"{task_id}_trial{o.report.trial}_seed{o.report.seed}.csv", o.records)
    logger.info(f"wrote report and {sum(len(r) for r in outputs.values())} traces to {out_dir}")


ABLATIONS = (
    ("hybrid", {"skip": False, "relaxed": False}),
    ("hybrid+skip", {"skip": True, "relaxed": False}),
    ("hybrid+skip+relaxed", {"skip": True, "relaxed": True}),
)


def ablation_configs(config: EngineConfig) -> list[tuple[str, EngineConfig]]:
    variants = []
    for name, switches in ABLATIONS:
        variants.append((name, config.model_copy(update={
            "mode": EngineMode.HYBRID,
            "skip": config.skip.model_copy(update={"enabled": switches["skip"]}),
            "acceptance": config.acceptance.model_copy(update={"enabled": switches["relaxed"]}),
        })))
    return variants


def ablate(
    config: EngineConfig,
    store: RetrievalStore,
    skip_state: Optional[VerifySkipState],
    **kwargs,
) -> list[tuple[str, TaskSummary]]:
    rows = []
    for name, variant in ablation_configs(config):
        evaluation = evaluate(variant, store, skip_state=skip_state, **kwargs)
        if evaluation.report.aggregate is not None:
            rows.append((name, evaluation.report.aggregate))
    return rows


def episode_positions(store: RetrievalStore) -> list[np.ndarray]:
    """Relative gripper paths rebuilt from each stored episode's actions."""
    paths = []
    for name in store.names():
        episodes: dict[tuple[str, int], list[Payload]] = {}
        for payload in store.collections[name].payloads:
            episodes.setdefault((payload.dataset_name, payload.episode_idx), []).append(payload)
        for key in sorted(episodes):
            steps = sorted(episodes[key], key=lambda p: p.step_idx)
            paths.append(positions_from_deltas([p.current_action for p in steps]))
    return paths


def norm_bounds_from_paths(paths: Sequence[Sequence[Sequence[float]]], window: int, r_cap: float) -> NormalizationBounds:
    radii, displacements = [], []
    for path in paths:
        r, d = window_samples(path, window, r_cap)
        radii.extend(r)
        displacements.extend(d)
    if not radii:
        raise ConfigurationError(f"no trajectory is long enough for a window of {window}")
    return bounds_from_samples(radii, displacements)
