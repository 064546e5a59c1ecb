"""Experiment orchestration and artifact output."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from src.analysis import RunReport, SweepSummary, summarize_sweep
from src.cluster import check_grouping
from src.config import APP_TITLE, ExitCode, StrategyKind
from src.engine import (
    Breakdown,
    ReplayOptions,
    ReplayResult,
    Trace,
    WorkerPool,
    generate_trace,
    mean_breakdown,
    read_trace,
    replay,
    runtime_breakdown,
    write_trace,
)
from src.errors import ConfigError, TraceError
from src.params import export_snapshot
from src.settings import RunConfig, config_from_dict, config_hash, derive
from src.strategies.base import STRATEGY_PRESETS, strategy_preset
from src.workloads import build_workload

logger = logging.getLogger(__name__)

# the methods compared head to head by ``--strategy all``
COMPARE_ALL = ("halos-paper", "async-paper", "diloco-dynupd-paper", "diloco-paper", "sync-paper")


@dataclass
class ExecutedRun:
    config: RunConfig
    trace: Trace
    result: ReplayResult

    @property
    def report(self) -> RunReport:
        return self.result.report


# ---------------------------------------------------------------------------
# Atomic output
# ---------------------------------------------------------------------------

def write_atomic(path: Union[str, Path], data: Union[str, bytes]) -> Path:
    """Write through a temp file in the same directory, then rename over *path*."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def report_document(report: RunReport) -> str:
    """The canonical report body plus a ``meta`` section that carries the timestamp."""
    document = {
        "report": report.to_json(),
        "meta": {"tool": APP_TITLE, "written_at": datetime.now(timezone.utc).isoformat()},
    }
    return json.dumps(document, sort_keys=True, indent=2) + "\n"


def _run_dir(config: RunConfig, label: Optional[str] = None) -> Path:
    return Path(config.output.dir) / (label or config.name)


def write_run_artifacts(run: ExecutedRun, out_dir: Path) -> Dict[str, str]:
    config = run.config
    artifacts: Dict[str, str] = {}
    artifacts["report"] = str(write_atomic(out_dir / "report.json", report_document(run.report)))
    model_file = export_snapshot(run.result.final_model, run.report.config_hash, config.seed)
    artifacts["final_model"] = str(write_atomic(out_dir / "final_model.bin", model_file))
    if config.output.write_trace:
        name = "trace.ndjson.gz" if config.output.gzip_trace else "trace.ndjson"
        target = out_dir / name
        tmp = out_dir / f".{name}.tmp{target.suffix}"
        write_trace(run.trace, tmp)
        os.replace(tmp, target)
        artifacts["trace"] = str(target)
    manifest = {
        "config_hash": run.report.config_hash,
        "seed": config.seed,
        "artifacts": artifacts,
        "config": config.model_dump(mode="json"),
    }
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    logger.info("artifacts written to %s", out_dir)
    return artifacts


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

def replay_options(config: RunConfig, expected_hash: Optional[str] = None) -> ReplayOptions:
    return ReplayOptions(
        parallelism=config.replay.parallelism,
        retain_snapshots=config.replay.retain_snapshots,
        sample_every_s=config.sampling.every_s,
        sample_every_updates=config.sampling.every_updates,
        stop_at_loss=config.replay.stop_at_loss,
        blowup_factor=config.replay.blowup_factor,
        shard_mode=config.shard_mode,
        data_seed=config.seed,
        expected_config_hash=expected_hash,
    )


def execute(config: RunConfig) -> ExecutedRun:
    """Generate the trace for *config* and replay it."""
    workload = build_workload(config.workload)
    digest = config_hash(config)
    if config.strategy.kind is StrategyKind.HALOS:
        check_grouping(config.cluster)
    stop = config.stop.rule(workload.samples_per_step)
    trace = generate_trace(config.cluster, config.strategy, stop, config_hash=digest, seed=config.seed)
    logger.info("%s: %s trace with %d events (config %s)", config.name, config.strategy.kind.value, len(trace), digest)
    result = replay(trace, config.cluster, config.strategy, workload, replay_options(config), digest, config.seed)
    report = result.report
    logger.info(
        "%s: final loss %.6g after %.1f simulated s, %d samples%s",
        config.name, report.final_loss, report.samples[-1].time if report.samples else 0.0,
        report.total_tokens, " (diverged)" if report.diverged else "",
    )
    return ExecutedRun(config=config, trace=trace, result=result)


def run(config: RunConfig) -> ExitCode:
    executed = execute(config)
    write_run_artifacts(executed, _run_dir(config))
    return ExitCode.DIVERGED if executed.report.diverged else ExitCode.OK


def replay_from_trace(config: RunConfig, trace_path: Union[str, Path]) -> ExitCode:
    """Re-execute a stored trace; refuses traces recorded for another config."""
    trace = read_trace(trace_path)
    digest = config_hash(config)
    if trace.header.get("config_hash") != digest:
        raise TraceError(f"{trace_path}: trace config hash {trace.header.get('config_hash')} != {digest}")
    workload = build_workload(config.workload)
    result = replay(trace, config.cluster, config.strategy, workload, replay_options(config, digest), digest, config.seed)
    executed = ExecutedRun(config=config, trace=trace, result=result)
    out_dir = _run_dir(config, f"{config.name}-replay")
    write_atomic(out_dir / "report.json", report_document(result.report))
    write_atomic(out_dir / "final_model.bin", export_snapshot(result.final_model, digest, config.seed))
    logger.info("replayed %s into %s", trace_path, out_dir)
    return ExitCode.DIVERGED if executed.report.diverged else ExitCode.OK


# ---------------------------------------------------------------------------
# Multi-run orchestration
# ---------------------------------------------------------------------------

def _execute_all(configs: Sequence[RunConfig], parallelism: int) -> Dict[str, ExecutedRun]:
    """Independent runs, up to *parallelism* at a time, keyed by config name."""
    with WorkerPool(parallelism) as pool:
        futures = [(cfg.name, pool.submit(lambda cfg=cfg: execute(cfg))) for cfg in configs]
        return {name: future.result() for name, future in futures}


def with_strategy(config: RunConfig, preset: str) -> RunConfig:
    """*config* with its strategy replaced by *preset*, keeping the inner optimizer."""
    tree = config.model_dump(mode="json")
    strategy = strategy_preset(preset)
    strategy["inner"] = tree["strategy"]["inner"]
    tree["strategy"] = strategy
    tree["name"] = f"{config.name}-{preset}"
    return config_from_dict(tree, honour_env=False)


def compare(config: RunConfig, presets: Sequence[str]) -> SweepSummary:
    """One run per strategy preset plus a comparison table."""
    names: List[str] = list(COMPARE_ALL) if list(presets) == ["all"] else list(presets)
    unknown = [n for n in names if n not in STRATEGY_PRESETS]
    if unknown:
        raise ConfigError("strategy", f"unknown presets {unknown}")
    configs = [(name, with_strategy(config, name)) for name in names]
    executed = _execute_all([cfg for _, cfg in configs], config.replay.parallelism)
    results = [(name, executed[cfg.name].report) for name, cfg in configs]
    summary = summarize_sweep("strategy", results, target=config.target_loss)
    out_dir = _run_dir(config, f"{config.name}-compare")
    for name, cfg in configs:
        write_run_artifacts(executed[cfg.name], out_dir / name)
    write_atomic(out_dir / "comparison.csv", summary.to_csv())
    return summary


def parse_values(text: str) -> List[Union[int, float, str]]:
    values: List[Union[int, float, str]] = []
    for item in text.split(","):
        item = item.strip()
        for cast in (int, float):
            try:
                values.append(cast(item))
                break
            except ValueError:
                continue
        else:
            values.append(item)
    return values


def run_sweep(config: RunConfig, axis: str, values: Sequence[object]) -> SweepSummary:
    """Vary one config key; every other setting stays fixed."""
    configs = [(v, derive(config, {axis: v, "name": f"{config.name}-{axis}-{v}"})) for v in values]
    executed = _execute_all([cfg for _, cfg in configs], config.replay.parallelism)
    results = [(value, executed[cfg.name].report) for value, cfg in configs]
    summary = summarize_sweep(axis, results, target=config.target_loss)
    out_dir = _run_dir(config, f"{config.name}-sweep-{axis}")
    for _, cfg in configs:
        write_run_artifacts(executed[cfg.name], out_dir / cfg.name)
    write_atomic(out_dir / "sweep.csv", summary.to_csv())
    if summary.argmin is not None:
        best = summary.rows[summary.argmin]
        logger.info("best %s = %s (final loss %.6g)", axis, best.value, best.final_loss)
    return summary


def breakdown(config: RunConfig, presets: Sequence[str]) -> Dict[str, Breakdown]:
    """Mean worker runtime split per strategy; timing only, no numerics."""
    names = list(COMPARE_ALL) if list(presets) == ["all"] else list(presets)
    result: Dict[str, Breakdown] = {}
    rows = ["strategy,compute_fraction,comm_fraction,stall_fraction,config_hash,seed"]
    for name in names:
        cfg = with_strategy(config, name) if name in STRATEGY_PRESETS else config
        stop = cfg.stop.rule(1)
        digest = config_hash(cfg)
        trace = generate_trace(cfg.cluster, cfg.strategy, stop, config_hash=digest, seed=cfg.seed)
        mean = mean_breakdown(runtime_breakdown(trace))
        result[name] = mean
        rows.append(
            f"{name},{mean.compute_fraction!r},{mean.comm_fraction!r},{mean.stall_fraction!r},{digest},{cfg.seed}"
        )
        logger.info(
            "%s: compute %.1f%%, comm %.1f%%, stall %.1f%%",
            name, 100 * mean.compute_fraction, 100 * mean.comm_fraction, 100 * mean.stall_fraction,
        )
    write_atomic(_run_dir(config, f"{config.name}-breakdown") / "breakdown.csv", "\n".join(rows) + "\n")
    return result
