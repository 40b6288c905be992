import json
from dataclasses import replace
from itertools import groupby

import numpy as np
import pytest
from pydantic import ValidationError

from HybridSpecEngine.config import apply_overrides
from HybridSpecEngine.errors import ConfigurationError, SchemaError, VerifierError
from HybridSpecEngine.harness import (
    ablate,
    build_database,
    build_oracle,
    calibrate_skip,
    episode_positions,
    evaluate,
    load_calibration,
    norm_bounds_from_paths,
    record_demonstrations,
    select_tasks,
    skip_state_from,
    task_instance,
    write_calibration,
)
from HybridSpecEngine.kinematics import COLD, analyze_trajectory, sweep_threshold
from HybridSpecEngine.models import EngineConfig, Payload
from HybridSpecEngine.oracle import oracle_features, oracle_phase, rollout
from HybridSpecEngine.retrieval_store import RetrievalStore
from HybridSpecEngine.toy_env import is_success, make_task_suite, reset
from HybridSpecEngine.verification import cosine_similarity

REPLAY = {"env.demo_perturb_radius": 0.0, "env.eval_perturb_radius": 0.0}


@pytest.fixture(scope="module")
def replay_config():
    config = EngineConfig.model_validate({"env": {"n_tasks": 2, "demo_episodes": 2}, "eval": {"trials": 1}})
    return apply_overrides(config, **REPLAY)


@pytest.fixture(scope="module")
def replay_store(replay_config):
    demos = record_demonstrations(replay_config, select_tasks(replay_config), 2, seed=0)
    return build_database(demos, replay_config.retrieval.dim)


def test_oracle_solves_every_task():
    config = EngineConfig()
    oracle = build_oracle(config)
    for task in make_task_suite(config.env):
        steps = rollout(oracle, reset(task), config.env.horizon)
        state = oracle.execute(*steps[-1])
        assert is_success(state, config.env)
        assert len(steps) < config.env.horizon


def test_oracle_features():
    config = EngineConfig()
    tasks = make_task_suite(config.env)
    state = reset(tasks[0])
    a = oracle_features(state, 4, 64)
    assert cosine_similarity(a, oracle_features(state, 4, 64)) == pytest.approx(1.0)
    nudged = replace(state, pose=tuple(p + 1e-6 for p in state.pose))
    assert cosine_similarity(a, oracle_features(nudged, 4, 64)) >= 0.999
    other = reset(replace(tasks[1], goal=tasks[0].goal))
    assert cosine_similarity(a, oracle_features(other, 4, 64)) < 1.0
    assert a.shape == (64,) and np.linalg.norm(a) == pytest.approx(1.0)


def test_demonstration_records_and_padding(replay_config):
    task = select_tasks(replay_config)[0]
    (demo,) = record_demonstrations(replay_config, [task], 1, seed=0)
    steps = rollout(build_oracle(replay_config), reset(task), replay_config.env.horizon)
    assert len(demo.records) == len(steps)
    assert [r.payload.step_idx for r in demo.records] == list(range(len(steps)))
    assert all(r.payload.episode_idx == 0 for r in demo.records)
    last, second_last = demo.records[-1].payload, demo.records[-2].payload
    assert last.next_actions == [last.current_action] * 3
    assert second_last.next_actions[1] == second_last.next_actions[2] == last.current_action
    assert demo.records[0].payload.next_actions[1] == demo.records[1].payload.current_action


def test_database_shards_and_counts(replay_config):
    demos = record_demonstrations(replay_config, select_tasks(replay_config), 2, seed=0)
    store = build_database(demos, replay_config.retrieval.dim)
    assert store.names() == ["task-0", "task-1"]
    for name in store.names():
        assert len(store.shard(name)) == sum(len(d.records) for d in demos if d.task_id == name)
    with pytest.raises(ConfigurationError):
        build_database([], 64)


def test_database_files_are_deterministic(tmp_path):
    config = EngineConfig.model_validate({"env": {"n_tasks": 2}})
    for out in ("a", "b"):
        demos = record_demonstrations(config, select_tasks(config), 2, seed=3)
        build_database(demos, config.retrieval.dim).save(tmp_path / out)
    for name in ("task-0.jsonl", "task-1.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    reloaded = RetrievalStore.load(tmp_path / "a")
    assert len(reloaded) == sum(len(d.records) for d in demos)


def test_calibration_round_trip(replay_store, tmp_path):
    result = calibrate_skip(replay_store, T=0.9, delta=0.1)
    assert 0.9 < result.min_S <= 1.0
    assert result.O_dist >= 1
    path = tmp_path / "calibration.json"
    write_calibration(result, path)
    assert set(json.loads(path.read_text())) == {"T", "min_S", "O_dist", "delta"}
    state = skip_state_from(load_calibration(path), EngineConfig())
    assert state.min_S == result.min_S and state.O_dist == result.O_dist


def test_calibration_needs_features():
    store = RetrievalStore(dim=2)
    store.shard("task-0").insert([1, 0], Payload(
        dataset_name="toy-suite", episode_idx=0, step_idx=0, current_action=[0.0] * 7,
        next_actions=[[0.0] * 7] * 3, language_instruction="x",
    ))
    with pytest.raises(SchemaError, match="no features stored"):
        calibrate_skip(store, 0.9, 0.1)


def test_autoregressive_evaluation(tmp_path):
    config = EngineConfig.model_validate({"mode": "autoregressive", "env": {"n_tasks": 2}, "eval": {"trials": 2}})
    evaluation = evaluate(config, None, out_dir=tmp_path)
    report = evaluation.report
    assert [t.task_id for t in report.tasks] == ["task-0", "task-1"]
    assert report.aggregate.SR == 1.0
    assert report.aggregate.speedup == 1.0
    assert all(t.speedup == 1.0 for t in report.tasks)
    assert json.loads((tmp_path / "report.json").read_text())["mode"] == "autoregressive"
    traces = sorted(p.name for p in (tmp_path / "traces").iterdir())
    assert traces == [f"task-{i}_trial{t}_seed0.csv" for i in range(2) for t in range(2)]


def test_zero_tasks_gives_empty_report():
    config = EngineConfig.model_validate({"mode": "autoregressive"})
    report = evaluate(config, None, tasks=[]).report
    assert report.tasks == [] and report.aggregate is None


def test_retrieval_modes_need_a_database():
    with pytest.raises(ConfigurationError):
        evaluate(EngineConfig(), None)
    with pytest.raises(ConfigurationError):
        select_tasks(EngineConfig.model_validate({"eval": {"tasks": ["task-42"]}}))


def test_replay_closure_with_skipping(replay_config, replay_store):
    config = apply_overrides(replay_config, mode="pure_retrieval")
    state = skip_state_from(calibrate_skip(replay_store, 0.9, 0.1), config)
    report = evaluate(config, replay_store, skip_state=state).report
    assert report.aggregate.SR == 1.0
    assert report.aggregate.speedup > 2.0
    assert report.aggregate.mean_top_score == pytest.approx(1.0)
    assert sum(report.aggregate.decision_mix.values()) == pytest.approx(1.0)


def test_hybrid_replay_with_calibrated_skip(replay_config, replay_store):
    state = skip_state_from(calibrate_skip(replay_store, 0.9, 0.1), replay_config)
    report = evaluate(replay_config, replay_store, skip_state=state, trials=2).report
    assert report.aggregate.SR == 1.0
    assert report.aggregate.mean_AL >= 4.0
    assert report.aggregate.speedup >= 2.0
    assert report.aggregate.mean_AL_per_call > 0
    assert "retrieval_sd" in report.aggregate.decision_mix

def test_evaluation_is_deterministic(replay_config, replay_store):
    config = apply_overrides(replay_config, **{"env.eval_perturb_radius": 0.02})
    first = evaluate(config, replay_store, seed=5).report
    second = evaluate(config, replay_store, seed=5).report
    assert first.model_dump_json() == second.model_dump_json()


def test_ablation_rows(replay_config, replay_store):
    rows = ablate(replay_config, replay_store, None)
    assert [name for name, _ in rows] == ["hybrid", "hybrid+skip", "hybrid+skip+relaxed"]
    assert all(summary.SR == 1.0 for _, summary in rows)


def test_norm_bounds_from_stored_paths(replay_store):
    paths = episode_positions(replay_store)
    assert len(paths) == 4
    bounds = norm_bounds_from_paths(paths, window=15, r_cap=1.0)
    assert 0 <= bounds.d_min <= bounds.d_max95
    assert 0 <= bounds.r_min <= bounds.r_max95 <= 1.0
    with pytest.raises(ConfigurationError):
        norm_bounds_from_paths([np.zeros((3, 3))], window=15, r_cap=1.0)


@pytest.fixture(scope="module")
def suite_store():
    config = EngineConfig()
    demos = record_demonstrations(config, select_tasks(config), 3, seed=0)
    return build_database(demos, config.retrieval.dim)


def test_oracle_phases_are_long():
    config = EngineConfig()
    oracle = build_oracle(config)
    for task in make_task_suite(config.env):
        phases = [oracle_phase(s, config.env) for s, _ in rollout(oracle, reset(task), config.env.horizon)]
        runs = [(phase, len(list(group))) for phase, group in groupby(phases)]
        assert [phase for phase, _ in runs] == ["straight", "curved", "straight", "curved"]
        assert all(length >= 5 * config.metric.window for phase, length in runs if phase == "curved")


def test_fused_metric_separates_oracle_phases():
    config = EngineConfig()
    oracle = build_oracle(config)
    values, phases = [], []
    for task in make_task_suite(config.env):
        for trial in range(2):
            instance = task_instance(task, config.env.eval_perturb_radius, 0, 0, trial)
            steps = rollout(oracle, reset(instance), config.env.horizon)
            rows = analyze_trajectory([s.pose for s, _ in steps], config.metric, config.metric.bounds)
            for row, (state, _) in zip(rows, steps):
                if row["label"] != COLD:
                    values.append(row["F"])
                    phases.append(oracle_phase(state, config.env))
    _, theta = sweep_threshold(values, phases)
    F, labels = np.asarray(values), np.asarray(phases)
    assert (F[labels == "straight"] > theta).mean() >= 0.9
    assert (F[labels == "curved"] <= theta).mean() >= 0.9


def test_oracle_wraps_failures_as_verifier_errors():
    config = EngineConfig()
    oracle = build_oracle(config)
    state = reset(make_task_suite(config.env)[0])
    with pytest.raises(VerifierError):
        oracle.greedy_tokens([], None, [])
    with pytest.raises(VerifierError):
        oracle.greedy_tokens([config.actions.n_bins + 5] * 7, state, [])
    with pytest.raises(VerifierError):
        oracle.features(None)


@pytest.mark.parametrize("mode", ["pure_drafter", "pure_retrieval"])
def test_strict_modes_reproduce_autoregressive_tokens(suite_store, mode):
    strict = {"acceptance.enabled": False, "skip.enabled": False, "env.horizon": 120, "eval.trials": 25}
    ar = evaluate(apply_overrides(EngineConfig(), mode="autoregressive", **strict), None)
    sd = evaluate(apply_overrides(EngineConfig(), mode=mode, **strict), suite_store)
    episodes = 0
    for task_id, outputs in ar.outputs.items():
        for expected, got in zip(outputs, sd.outputs[task_id], strict=True):
            assert got.tokens == expected.tokens
            episodes += 1
    assert episodes == 100


def test_ablation_speedups_are_ordered():
    config = EngineConfig.model_validate({"env": {"n_tasks": 2}, "eval": {"trials": 3}, "skip": {"T": 0.99}})
    demos = record_demonstrations(config, select_tasks(config), 3, seed=0)
    store = build_database(demos, config.retrieval.dim)
    state = skip_state_from(calibrate_skip(store, config.skip.T, config.skip.delta), config)
    rows = ablate(config, store, state)
    summaries = [summary for _, summary in rows]
    assert summaries[0].speedup < summaries[1].speedup < summaries[2].speedup
    for before, after in zip(summaries, summaries[1:]):
        assert before.SR - after.SR <= 0.05


@pytest.mark.parametrize("env", [
    {"spiral_inner_radius": 0.002},
    {"spiral_inner_radius": 0.2},
    {"fine_radius": 0.005, "spiral_inner_radius": 0.004},
])
def test_env_config_rejects_unordered_radii(env):
    with pytest.raises(ValidationError):
        EngineConfig.model_validate({"env": env})
