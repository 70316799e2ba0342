"""Experiment orchestration: pre-train -> fine-tune grids, an append-only run ledger and resume."""

from __future__ import annotations

import json
import logging
import os
import shutil
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Any

from . import __version__
from .config import ExperimentConfig, emit_config, parse_config
from .data import CohortData, derive_seed
from .errors import ConfigError, RunExistsError
from .finetune import run_finetune
from .metrics import MetricReport
from .models.checkpoint import load_checkpoint
from .pretrain import PretrainModels, run_pretrain
from .probe import evaluate_pretrain
from .report import PRETRAIN_ROW, ReportRow, emit_report, profile_from_history
from .volume import generate_cohort, load_cohort, split_dataset

logger = logging.getLogger(__name__)

LEDGER_NAME = "ledger.jsonl"
CONFIG_NAME = "config.yaml"
DEFAULT_OUT = "runs"


def out_root(cfg: ExperimentConfig | None = None, override: str | Path | None = None) -> Path:
    """Explicit override, else ``cfg.out_dir``, else ``$PRETUNE_OUT``, else ``./runs``."""
    if override:
        return Path(override)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get("PRETUNE_OUT") or DEFAULT_OUT)


def _git_stamp() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


class RunLedger:
    """JSON-lines log of run and cell status changes; rows are only ever appended."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, run_id: str, status: str, **fields: Any) -> dict[str, Any]:
        record = {"run_id": run_id, "status": status, "time": time.time(), **fields}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return record

    def records(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def latest(self, run_id: str, cell: str | None = None) -> dict[str, Any] | None:
        found = None
        for r in self.records():
            if r["run_id"] == run_id and r.get("cell") == cell:
                found = r
        return found

    def runs(self) -> dict[str, dict[str, Any]]:
        """Run-level state per run id, in first-seen order: start-record fields updated by later records."""
        out: dict[str, dict[str, Any]] = {}
        for r in self.records():
            if r.get("cell") is None:
                out[r["run_id"]] = {**out.get(r["run_id"], {}), **r}
        return out

    def run_ids(self) -> set[str]:
        return {r["run_id"] for r in self.records()}


def load_data(cfg: ExperimentConfig) -> CohortData:
    if cfg.data.source == "manifest":
        subjects = load_cohort(cfg.data.manifest)
    else:
        subjects = generate_cohort(cfg.data.n_subjects, cfg.data.generator, seed=derive_seed(cfg.seed, "cohort"))
    split = split_dataset([s.id for s in subjects], cfg.data.split, seed=derive_seed(cfg.seed, "split"))
    return CohortData.from_split(subjects, split)


# -- cells -----------------------------------------------------------------------------


def pretrain_cell(cfg: ExperimentConfig, data: CohortData, strategy: str, fs: int, out_dir: Path):
    """Run (or resume) one pre-training cell and evaluate it; returns ``(checkpoint, ReportRow)``."""
    models = PretrainModels(
        replace(cfg.models.encoder, feature_size=fs), cfg.models.diffusion, cfg.models.discriminator
    )
    pcfg = replace(cfg.pretrain, strategy=strategy, seed=derive_seed(cfg.seed, "pretrain", strategy, fs))
    ckpt, history = run_pretrain(pcfg, data, out_dir, models)
    model, _, _ = load_checkpoint(ckpt)
    metrics = evaluate_pretrain(
        model,
        data,
        pcfg.effective_patch_size,
        pcfg.diffusion.schedule_obj(),
        pcfg.ssim_window,
        probe=cfg.grid.linear_probe,
        seed=pcfg.seed,
    )
    _write_metrics(out_dir, metrics)
    return ckpt, ReportRow(strategy, PRETRAIN_ROW, fs, metrics, profile_from_history(history))


def finetune_cell(
    cfg: ExperimentConfig, data: CohortData, checkpoint: Path | None, kind: str, fs: int, out_dir: Path
) -> tuple[MetricReport, Any]:
    ft = replace(cfg.finetune, seed=derive_seed(cfg.seed, "finetune", fs))
    base_cfg = replace(cfg.models.encoder, feature_size=fs) if checkpoint is None else None
    _, metrics, history = run_finetune(checkpoint, cfg.tuning.strategy(kind), ft, data, out_dir, base_cfg=base_cfg)
    return metrics, profile_from_history(history)


def _finetune_job(args):
    cfg, data, checkpoint, kind, fs, out_dir = args
    return finetune_cell(cfg, data, checkpoint, kind, fs, out_dir)


def _write_metrics(out_dir: Path, metrics: MetricReport) -> None:
    from .pretrain import _jsonable

    (Path(out_dir) / "metrics.json").write_text(json.dumps(_jsonable(metrics.to_dict()), indent=2, sort_keys=True))


# -- grid ------------------------------------------------------------------------------


@dataclass
class GridResult:
    run_id: str
    run_dir: Path
    rows: list[ReportRow] = field(default_factory=list)
    report: dict[str, Path] = field(default_factory=dict)
    failed: list[str] = field(default_factory=list)
    skipped: bool = False


def _execute_grid(cfg: ExperimentConfig, run_id: str, run_dir: Path, ledger: RunLedger, workers: int = 1) -> GridResult:
    result = GridResult(run_id, run_dir)
    digest = cfg.digest()
    data = load_data(cfg)

    def log(cell: str, status: str, **extra: Any) -> None:
        ledger.append(run_id, status, cell=cell, config_digest=digest, **extra)

    for fs in cfg.models.feature_sizes:
        base = run_dir / f"fs{fs}"
        ckpts: dict[str, Path] = {}
        for s in cfg.grid.pretrain:
            cell = f"fs{fs}/pretrain/{s}"
            log(cell, "started")
            try:
                ckpt, row = pretrain_cell(cfg, data, s, fs, base / "pretrain" / s)
            except Exception as exc:  # a failed cell is recorded and the grid moves on
                logger.exception("cell %s failed", cell)
                log(cell, "failed", error=f"{type(exc).__name__}: {exc}")
                result.failed.append(cell)
                continue
            ckpts[s] = ckpt
            result.rows.append(row)
            log(cell, "completed", artifacts={"checkpoint": str(ckpt)})

        jobs: list[tuple[str, str | None, str, Path | None]] = []
        if "scratch" in cfg.grid.tune:
            jobs.append((f"fs{fs}/finetune/scratch", None, "scratch", None))
        for s in cfg.grid.pretrain:
            for kind in cfg.grid.tune:
                if kind == "scratch":
                    continue
                cell = f"fs{fs}/finetune/{s}/{kind}"
                if s not in ckpts:
                    log(cell, "skipped", error=f"pre-training {s!r} unavailable")
                    result.failed.append(cell)
                    continue
                jobs.append((cell, s, kind, ckpts[s]))

        outputs = _run_jobs(cfg, data, jobs, fs, base, workers, log, result)
        scratch = outputs.get(f"fs{fs}/finetune/scratch")
        for cell, s, kind, _ in jobs:
            if cell not in outputs:
                continue
            metrics, profile = outputs[cell]
            if kind != "scratch":
                result.rows.append(ReportRow(s, kind, fs, metrics, profile))
        if scratch is not None:
            # scratch does not depend on pre-training: one run, listed under every pre-training label
            for s in cfg.grid.pretrain:
                result.rows.append(ReportRow(s, "scratch", fs, *scratch))

    result.report = emit_report(result.rows, run_dir / "report")
    ledger.append(
        run_id,
        "completed" if not result.failed else "completed_with_failures",
        cell="report",
        config_digest=digest,
        artifacts={k: str(v) for k, v in result.report.items()},
    )
    return result


def _run_jobs(cfg, data, jobs, fs, base: Path, workers: int, log, result: GridResult) -> dict[str, Any]:
    outputs: dict[str, Any] = {}

    def out_dir(cell: str) -> Path:
        return base / Path(cell).relative_to(f"fs{fs}")

    if workers > 1 and len(jobs) > 1:
        logger.warning("running %d cells in parallel: resource profiles are unreliable", workers)
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            futures = {}
            for cell, _, kind, ckpt in jobs:
                log(cell, "started")
                futures[cell] = pool.submit(_finetune_job, (cfg, data, ckpt, kind, fs, out_dir(cell)))
            for cell, fut in futures.items():
                try:
                    outputs[cell] = fut.result()
                    log(cell, "completed", artifacts={"dir": str(out_dir(cell))})
                except Exception as exc:
                    log(cell, "failed", error=f"{type(exc).__name__}: {exc}")
                    result.failed.append(cell)
        return outputs

    for cell, _, kind, ckpt in jobs:
        log(cell, "started")
        try:
            outputs[cell] = finetune_cell(cfg, data, ckpt, kind, fs, out_dir(cell))
        except Exception as exc:
            logger.exception("cell %s failed", cell)
            log(cell, "failed", error=f"{type(exc).__name__}: {exc}")
            result.failed.append(cell)
            continue
        log(cell, "completed", artifacts={"dir": str(out_dir(cell))})
    return outputs


def _new_run(kind: str, cfg: ExperimentConfig, root: Path, force: bool, ledger: RunLedger, tag: str = "") -> tuple[str, Path]:
    digest = cfg.digest()
    base_id = f"{kind}{tag}-{digest[:12]}"
    existing = ledger.run_ids()
    if base_id in existing and not force:
        raise RunExistsError(
            f"run {base_id} with this config digest already exists under {root}; use resume or --force"
        )
    run_id, n = base_id, 1
    while run_id in existing:
        n += 1
        run_id = f"{base_id}-r{n}"
    run_dir = root / run_id
    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    emit_config(cfg, run_dir / CONFIG_NAME)
    ledger.append(
        run_id,
        "started",
        kind=kind,
        config_digest=digest,
        version=__version__,
        git=_git_stamp(),
        artifacts={"dir": str(run_dir)},
    )
    return run_id, run_dir


def run_grid(cfg: ExperimentConfig, root: str | Path | None = None, force: bool = False, workers: int = 1) -> GridResult:
    """Pre-train every grid strategy, fine-tune every (checkpoint, tuning) pair plus scratch, emit one report.

    A configuration whose digest already has a run in the ledger is refused
    unless ``force`` is set, in which case a fresh run id is allocated.
    """
    cfg.validate()
    root = out_root(cfg, root)
    ledger = RunLedger(root / LEDGER_NAME)
    run_id, run_dir = _new_run("grid", cfg, root, force, ledger)
    return _finish(ledger, run_id, lambda: _execute_grid(cfg, run_id, run_dir, ledger, workers))


def _finish(ledger: RunLedger, run_id: str, body):
    try:
        result = body()
    except BaseException as exc:
        ledger.append(run_id, "interrupted", error=f"{type(exc).__name__}: {exc}")
        raise
    status = "completed" if not getattr(result, "failed", None) else "completed_with_failures"
    ledger.append(run_id, status)
    return result


# -- single runs -----------------------------------------------------------------------


def run_single_pretrain(
    cfg: ExperimentConfig, strategy: str, feature_size: int | None = None, root=None, force: bool = False
) -> GridResult:
    cfg.validate()
    fs = feature_size or cfg.models.feature_sizes[0]
    root = out_root(cfg, root)
    ledger = RunLedger(root / LEDGER_NAME)
    run_id, run_dir = _new_run("pretrain", cfg, root, force, ledger, tag=f"-{strategy}-fs{fs}")
    _write_params(run_dir, {"kind": "pretrain", "strategy": strategy, "feature_size": fs})
    return _finish(ledger, run_id, lambda: _single_pretrain(cfg, run_id, run_dir, strategy, fs))


def _single_pretrain(cfg, run_id, run_dir, strategy, fs) -> GridResult:
    _, row = pretrain_cell(cfg, load_data(cfg), strategy, fs, run_dir)
    return GridResult(run_id, run_dir, [row], emit_report([row], run_dir / "report"))


def run_single_finetune(
    cfg: ExperimentConfig,
    kind: str,
    checkpoint: str | Path | None,
    feature_size: int | None = None,
    root=None,
    force: bool = False,
) -> GridResult:
    cfg.validate()
    fs = feature_size or cfg.models.feature_sizes[0]
    root = out_root(cfg, root)
    ledger = RunLedger(root / LEDGER_NAME)
    run_id, run_dir = _new_run("finetune", cfg, root, force, ledger, tag=f"-{kind}-fs{fs}")
    params = {"kind": "finetune", "tune": kind, "feature_size": fs, "checkpoint": str(checkpoint) if checkpoint else None}
    _write_params(run_dir, params)
    return _finish(ledger, run_id, lambda: _single_finetune(cfg, run_id, run_dir, params))


def _single_finetune(cfg, run_id, run_dir, params) -> GridResult:
    ckpt = Path(params["checkpoint"]) if params["checkpoint"] else None
    label = "scratch" if ckpt is None else json.loads((ckpt / "manifest.json").read_text()).get("strategy", "unknown")
    metrics, profile = finetune_cell(cfg, load_data(cfg), ckpt, params["tune"], params["feature_size"], run_dir)
    row = ReportRow(label, params["tune"], params["feature_size"], metrics, profile)
    return GridResult(run_id, run_dir, [row], emit_report([row], run_dir / "report"))


def _write_params(run_dir: Path, params: dict[str, Any]) -> None:
    (run_dir / "params.json").write_text(json.dumps(params, indent=2, sort_keys=True))


# -- resume ----------------------------------------------------------------------------


def resume(run_id: str, root: str | Path | None = None, workers: int = 1) -> GridResult | None:
    """Continue an interrupted run from its checkpoints; a completed run is a no-op.

    The stored ``config.yaml`` must still hash to the digest recorded when the
    run started, otherwise the resume is refused.
    """
    root = out_root(None, root)
    ledger = RunLedger(root / LEDGER_NAME)
    runs = ledger.runs()
    if run_id not in runs:
        raise ConfigError(f"unknown run id {run_id!r} in {ledger.path}")
    first = next(r for r in ledger.records() if r["run_id"] == run_id and r.get("cell") is None)
    last = runs[run_id]
    if last["status"] in ("completed", "completed_with_failures"):
        logger.info("run %s already %s; nothing to resume", run_id, last["status"])
        print(f"run {run_id} already {last['status']}; nothing to resume")
        return None
    run_dir = Path(first["artifacts"]["dir"])
    cfg = parse_config(run_dir / CONFIG_NAME)
    if cfg.digest() != first["config_digest"]:
        raise ConfigError(f"config of run {run_id} changed since it started (digest mismatch); refusing to resume")
    ledger.append(run_id, "resumed", config_digest=first["config_digest"])
    kind = first.get("kind", "grid")
    if kind == "grid":
        return _finish(ledger, run_id, lambda: _execute_grid(cfg, run_id, run_dir, ledger, workers))
    params = json.loads((run_dir / "params.json").read_text())
    if kind == "pretrain":
        return _finish(ledger, run_id, lambda: _single_pretrain(cfg, run_id, run_dir, params["strategy"], params["feature_size"]))
    return _finish(ledger, run_id, lambda: _single_finetune(cfg, run_id, run_dir, params))
