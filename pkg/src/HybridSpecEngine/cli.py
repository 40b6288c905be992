import csv
import functools
import math
import sys
from pathlib import Path
from typing import Optional

import click
from loguru import logger
from rich.console import Console
from rich.table import Table

from .config import apply_overrides, dump_config, load_config, resolve_metric_bounds, write_norm_bounds
from .errors import (
    CalibrationFailedError,
    ConfigurationError,
    EngineError,
    InvalidInputError,
    ParseError,
    SchemaError,
    VersionError,
)
from .harness import (
    ablate,
    build_database,
    calibrate_skip,
    episode_positions,
    evaluate,
    load_calibration,
    norm_bounds_from_paths,
    record_demonstrations,
    select_tasks,
    skip_state_from,
    write_calibration,
)
from .kinematics import analyze_trajectory, sweep_threshold
from .models import EngineConfig, TaskSummary
from .retrieval_store import RetrievalStore
from .utils import fmt_float, write_csv

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_CALIBRATION = 3

MODE_CHOICES = ["hybrid", "pure_retrieval", "pure_drafter", "ar", "autoregressive", "retrieval_only"]

console = Console()


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CalibrationFailedError):
        return EXIT_CALIBRATION
    if isinstance(exc, (ParseError, VersionError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigurationError, InvalidInputError, SchemaError, EngineError)):
        return EXIT_VALIDATION
    raise exc


def handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (EngineError, OSError) as e:
            code = _exit_code(e)
            click.echo(f"error: {e}", err=True)
            sys.exit(code)
    return wrapper


def _setup_logging(verbose: bool) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO", format="{time:HH:mm:ss} | {level: <7} | {message}")


def _load(config_path: Optional[str], **overrides) -> tuple[EngineConfig, Optional[Path]]:
    config = load_config(config_path)
    config = apply_overrides(config, **overrides)
    base_dir = Path(config_path).parent if config_path else None
    return config, base_dir


def _load_store(db: Optional[str], config: EngineConfig) -> Optional[RetrievalStore]:
    if db is None:
        return None
    store = RetrievalStore.load(db)
    if store.dim != config.retrieval.dim:
        raise ConfigurationError(f"database dim {store.dim} does not match retrieval.dim {config.retrieval.dim}")
    if config.retrieval.hnsw:
        store.build_hnsw(m=config.retrieval.m, ef_construct=config.retrieval.ef_construct, seed=config.seed)
    return store


def _skip_state(calib: Optional[str], config: EngineConfig):
    if calib is None:
        return None
    return skip_state_from(load_calibration(calib), config)


def _summary_table(title: str, rows: list[tuple[str, TaskSummary]]) -> Table:
    table = Table(title=title)
    for column in ("Task", "SR", "Speed", "AL", "AL/call", "Steps", "Retrieval", "Drafter", "Skip", "AR"):
        table.add_column(column, justify="left" if column == "Task" else "right")
    for name, s in rows:
        mix = s.decision_mix
        table.add_row(
            name,
            f"{100 * s.SR:.1f}%",
            f"{s.speedup:.2f}x",
            f"{s.mean_AL:.2f}",
            f"{s.mean_AL_per_call:.2f}",
            f"{s.mean_steps:.1f}",
            f"{100 * mix.get('retrieval_sd', 0.0):.0f}%",
            f"{100 * mix.get('drafter_sd', 0.0):.0f}%",
            f"{100 * mix.get('skip', 0.0):.0f}%",
            f"{100 * mix.get('autoregressive', 0.0):.0f}%",
        )
    return table


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Engine config (YAML or JSON).")
seed_option = click.option("--seed", type=int, default=None, help="Override the run seed.")
verbose_option = click.option("--verbose", is_flag=True, help="Debug logging.")


@click.group()
def main():
    """Hybrid retrieval/drafter speculative decoding on a toy action model."""


@main.command("print-config")
@config_option
@handle_errors
def print_config(config_path):
    """Print the effective configuration as JSON."""
    config, _ = _load(config_path)
    click.echo(dump_config(config), nl=False)


@main.command("record-build")
@config_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="db", show_default=True)
@click.option("--episodes", type=int, default=None, help="Demonstrations per task.")
@click.option("--perturb", type=float, default=None, help="Demonstration instance perturbation radius.")
@seed_option
@verbose_option
@handle_errors
def record_build(config_path, out_dir, episodes, perturb, seed, verbose):
    """Record oracle demonstrations and save one shard per task."""
    _setup_logging(verbose)
    config, _ = _load(config_path, seed=seed, **{"env.demo_episodes": episodes, "env.demo_perturb_radius": perturb})
    demos = record_demonstrations(config, select_tasks(config), config.env.demo_episodes, config.seed)
    store = build_database(demos, config.retrieval.dim)
    store.save(out_dir)

    table = Table(title=f"Shards in {out_dir}")
    for column in ("Shard", "Records", "Embedding bytes", "Payload bytes"):
        table.add_column(column, justify="left" if column == "Shard" else "right")
    for s in store.summaries():
        table.add_row(s.name, str(s.records), str(s.embedding_bytes), str(s.payload_bytes))
    console.print(table)


@main.command("calibrate-skip")
@config_option
@click.option("--db", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="calibration.json", show_default=True)
@verbose_option
@handle_errors
def calibrate(config_path, db, out_path, verbose):
    """Learn the verify-skip similarity gate from stored features."""
    _setup_logging(verbose)
    config, _ = _load(config_path)
    store = RetrievalStore.load(db)
    result = calibrate_skip(store, config.skip.T, config.skip.delta)
    write_calibration(result, out_path)
    click.echo(f"min_S={result.min_S:.6f} O_dist={result.O_dist} -> {out_path}")


@main.command("eval")
@config_option
@click.option("--db", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--calib", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--mode", type=click.Choice(MODE_CHOICES), default=None)
@click.option("--trials", type=int, default=None)
@click.option("--jobs", type=int, default=None)
@seed_option
@verbose_option
@handle_errors
def eval_cmd(config_path, db, calib, out_dir, mode, trials, jobs, seed, verbose):
    """Evaluate the engine over the task suite."""
    _setup_logging(verbose)
    config, base_dir = _load(config_path, seed=seed, mode=mode, **{"eval.jobs": jobs, "eval.trials": trials})
    store = _load_store(db, config)
    evaluation = evaluate(
        config,
        store,
        skip_state=_skip_state(calib, config),
        metric_bounds=resolve_metric_bounds(config, base_dir),
        out_dir=out_dir,
        progress=True,
    )
    report = evaluation.report
    rows = [(s.task_id, s) for s in report.tasks]
    if report.aggregate is not None:
        rows.append(("all", report.aggregate))
    console.print(_summary_table(f"{config.mode.value} (seed {report.seed})", rows))


@main.command("ablate")
@config_option
@click.option("--db", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--calib", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--trials", type=int, default=None)
@click.option("--jobs", type=int, default=None)
@seed_option
@verbose_option
@handle_errors
def ablate_cmd(config_path, db, calib, trials, jobs, seed, verbose):
    """Compare hybrid, hybrid+skip and hybrid+skip+relaxed on the same seeds."""
    _setup_logging(verbose)
    config, base_dir = _load(config_path, seed=seed, **{"eval.jobs": jobs, "eval.trials": trials})
    store = _load_store(db, config)
    rows = ablate(config, store, _skip_state(calib, config), metric_bounds=resolve_metric_bounds(config, base_dir))
    console.print(_summary_table("ablation", rows))


def read_trajectory(path: str) -> tuple[list[list[float]], Optional[list[Optional[str]]]]:
    """x,y,z rows (plus an optional phase column) from a CSV file."""
    positions, phases = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        if not {"x", "y", "z"} <= set(fields):
            raise ParseError(f"{path}: header must contain x, y, z columns", line=1)
        has_phase = "phase" in fields
        for row in reader:
            try:
                point = [float(row["x"]), float(row["y"]), float(row["z"])]
            except (TypeError, ValueError):
                raise ParseError(f"{path}: malformed row", line=reader.line_num) from None
            if not all(math.isfinite(v) for v in point):
                raise ParseError(f"{path}: non-finite coordinate", line=reader.line_num)
            positions.append(point)
            phases.append((row.get("phase") or None) if has_phase else None)
    return positions, (phases if has_phase else None)


@main.command("analyze-traj")
@click.argument("traj_file", type=click.Path(exists=True, dir_okay=False))
@config_option
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Metric trace CSV.")
@click.option("--threshold", type=float, default=None)
@click.option("--sweep", is_flag=True, help="Evaluate thresholds 0.00..1.00.")
@click.option("--sweep-out", type=click.Path(dir_okay=False), default=None)
@verbose_option
@handle_errors
def analyze_traj(traj_file, config_path, out_path, threshold, sweep, sweep_out, verbose):
    """Per-step curvature radius, displacement, fused metric and segment label."""
    _setup_logging(verbose)
    config, base_dir = _load(config_path, **{"metric.threshold": threshold})
    bounds = resolve_metric_bounds(config, base_dir)
    positions, phases = read_trajectory(traj_file)
    rows = analyze_trajectory(positions, config.metric, bounds) if positions else []

    header = ["step", "x", "y", "z", "R", "D", "F", "label"]
    out_rows = [
        [r["step"], *positions[r["step"]], fmt_float(r["R"]), fmt_float(r["D"]), fmt_float(r["F"]), r["label"]]
        for r in rows
    ]
    if out_path:
        write_csv(out_path, header, out_rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(out_rows)

    if sweep:
        warm = [i for i, r in enumerate(rows) if r["F"] is not None]
        values = [rows[i]["F"] for i in warm]
        labels = [phases[i] for i in warm] if phases is not None else None
        grid_rows, best = sweep_threshold(values, labels)
        table = Table(title="threshold sweep")
        for column in ("theta", "retrieval", "balanced acc."):
            table.add_column(column, justify="right")
        for g in grid_rows:
            acc = g["balanced_accuracy"]
            table.add_row(f"{g['theta']:.2f}", f"{g['retrieval_fraction']:.3f}", "-" if acc is None else f"{acc:.3f}")
        Console(stderr=True).print(table)
        if best is not None:
            click.echo(f"best threshold: {best:.2f}", err=True)
        if sweep_out:
            write_csv(
                sweep_out,
                ["theta", "retrieval_fraction", "balanced_accuracy"],
                [[f"{g['theta']:.2f}", fmt_float(g["retrieval_fraction"]), fmt_float(g["balanced_accuracy"])] for g in grid_rows],
            )


@main.command("norm-bounds")
@config_option
@click.option("--db", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--traj", "traj_files", type=click.Path(exists=True, dir_okay=False), multiple=True)
@click.option("--suite", type=str, default=None, help="Suite name to key the bounds by.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="norm_bounds.json", show_default=True)
@verbose_option
@handle_errors
def norm_bounds(config_path, db, traj_files, suite, out_path, verbose):
    """Derive min / 95th-percentile bounds of R and D from recorded paths."""
    _setup_logging(verbose)
    config, _ = _load(config_path)
    if db is None and not traj_files:
        raise ConfigurationError("give --db or at least one --traj file")
    paths = []
    if db is not None:
        paths.extend(episode_positions(RetrievalStore.load(db)))
    for traj in traj_files:
        paths.append(read_trajectory(traj)[0])
    bounds = norm_bounds_from_paths(paths, config.metric.window, config.metric.r_cap)
    name = suite or config.metric.suite
    write_norm_bounds({name: bounds}, out_path)
    click.echo(
        f"{name}: d_min={bounds.d_min:.6f} d_max95={bounds.d_max95:.6f} "
        f"r_min={bounds.r_min:.6f} r_max95={bounds.r_max95:.6f} -> {out_path}"
    )


if __name__ == "__main__":
    main()
