"""Merge run directories into plot-ready CSV tables.

All column orders below are frozen; downstream scripts may index by name or
position.

methods.csv (method x attack)
    run, regime, augmenters, assembly, seed, then ``<attack>:TR@1`` and
    ``<attack>:IR@1`` for every attack in ATTACKS, then config_hash.
ablation.csv (ablation x metric)
    run, regime, order, image_objective, text_attack, train_pgd_steps,
    clean:TR@1, clean:IR@1, sga-analog:TR@1, sga-analog:IR@1, sec_per_iter,
    config_hash. sec_per_iter is the RunLog mean wall-clock per step.
quality.csv (augmenter x quality)
    run, augmenter, assembly, seed, alignment, diversity, diversity_estimator,
    frechet_gap, robust_R@1, config_hash. robust_R@1 is the mean of TR@1 and
    IR@1 under sga-analog.
sweep.csv (one row per swept run)
    axis, value, seed, regime, ``<attack>:<metric>`` for every attack and
    every recall key, alignment, diversity, frechet_gap, diversity_estimator,
    config_hash, reference_hash.

Numbers are written with six decimals; missing values are empty cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, stage_seed
from .metrics import ATTACKS, RECALL_KEYS, MetricsReport, _fmt, write_csv
from .pipeline import StageCache, mean_seconds_per_step, run_experiment

log = logging.getLogger(__name__)

METHOD_COLUMNS = (
    "run",
    "regime",
    "augmenters",
    "assembly",
    "seed",
    *(f"{a}:{k}" for a in ATTACKS for k in ("TR@1", "IR@1")),
    "config_hash",
)
ABLATION_COLUMNS = (
    "run",
    "regime",
    "order",
    "image_objective",
    "text_attack",
    "train_pgd_steps",
    "clean:TR@1",
    "clean:IR@1",
    "sga-analog:TR@1",
    "sga-analog:IR@1",
    "sec_per_iter",
    "config_hash",
)
QUALITY_COLUMNS = (
    "run",
    "augmenter",
    "assembly",
    "seed",
    "alignment",
    "diversity",
    "diversity_estimator",
    "frechet_gap",
    "robust_R@1",
    "config_hash",
)
SWEEP_COLUMNS = (
    "axis",
    "value",
    "seed",
    "regime",
    *(f"{a}:{k}" for a in ATTACKS for k in RECALL_KEYS),
    "alignment",
    "diversity",
    "frechet_gap",
    "diversity_estimator",
    "config_hash",
    "reference_hash",
)
TABLES = {"methods.csv": METHOD_COLUMNS, "ablation.csv": ABLATION_COLUMNS, "quality.csv": QUALITY_COLUMNS}


class ReportError(ValueError):
    pass


def _recall(report: MetricsReport, attack: str, key: str) -> str:
    table = report.recalls.get(attack)
    return _fmt(table.get(key)) if table else ""


def robust_r1(report: MetricsReport, attack: str = "sga-analog") -> float | None:
    table = report.recalls.get(attack)
    if not table:
        return None
    return 0.5 * (table["TR@1"] + table["IR@1"])


def method_row(report: MetricsReport) -> dict:
    m = report.meta
    row = {
        "run": m.get("name", ""),
        "regime": m.get("regime", ""),
        "augmenters": m.get("augmenters", ""),
        "assembly": m.get("assembly", ""),
        "seed": report.seed,
        "config_hash": report.config_hash,
    }
    for a in ATTACKS:
        for k in ("TR@1", "IR@1"):
            row[f"{a}:{k}"] = _recall(report, a, k)
    return row


def ablation_row(report: MetricsReport, sec_per_iter: float | None) -> dict:
    m = report.meta
    row = {c: m.get(c, "") for c in ("regime", "order", "image_objective", "text_attack", "train_pgd_steps")}
    row["run"] = m.get("name", "")
    for a in ("clean", "sga-analog"):
        for k in ("TR@1", "IR@1"):
            row[f"{a}:{k}"] = _recall(report, a, k)
    row["sec_per_iter"] = _fmt(sec_per_iter)
    row["config_hash"] = report.config_hash
    return row


def quality_row(report: MetricsReport) -> dict:
    m = report.meta
    return {
        "run": m.get("name", ""),
        "augmenter": m.get("augmenters", ""),
        "assembly": m.get("assembly", ""),
        "seed": report.seed,
        "alignment": _fmt(report.alignment),
        "diversity": _fmt(report.diversity),
        "diversity_estimator": report.diversity_estimator,
        "frechet_gap": _fmt(report.frechet_gap),
        "robust_R@1": _fmt(robust_r1(report)),
        "config_hash": report.config_hash,
    }


def sweep_row(axis: str, value, report: MetricsReport) -> dict:
    row = {
        "axis": axis,
        "value": value,
        "seed": report.seed,
        "regime": report.meta.get("regime", ""),
        "alignment": _fmt(report.alignment),
        "diversity": _fmt(report.diversity),
        "frechet_gap": _fmt(report.frechet_gap),
        "diversity_estimator": report.diversity_estimator,
        "config_hash": report.config_hash,
        "reference_hash": report.reference_hash,
    }
    for a in ATTACKS:
        for k in RECALL_KEYS:
            row[f"{a}:{k}"] = _recall(report, a, k)
    return row


@dataclass
class ReportResult:
    written: list[Path] = field(default_factory=list)
    missing: list[Path] = field(default_factory=list)
    n_runs: int = 0


def merge_reports(run_dirs, out_dir, force: bool = False) -> ReportResult:
    """Write methods/ablation/quality tables for every run directory that
    holds a metrics.jsonl; directories without one are listed and skipped."""
    result = ReportResult()
    loaded = []
    for d in run_dirs:
        d = Path(d)
        path = d / "metrics.jsonl"
        if not path.exists():
            log.warning("no metrics report in %s; skipped", d)
            result.missing.append(d)
            continue
        loaded.append((d, MetricsReport.load(path)))
    worlds = {r.meta.get("world_digest") for _, r in loaded}
    if len(worlds) > 1 and not force:
        raise ReportError(f"reports come from {len(worlds)} different world configs (use --force to merge)")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = {name: [] for name in TABLES}
    for d, rep in loaded:
        rows["methods.csv"].append(method_row(rep))
        rows["ablation.csv"].append(ablation_row(rep, mean_seconds_per_step(d)))
        if rep.meta.get("augmenters", "none") != "none":
            rows["quality.csv"].append(quality_row(rep))
    for name, columns in TABLES.items():
        write_csv(out / name, columns, rows[name])
        result.written.append(out / name)
    result.n_runs = len(loaded)
    return result


NON_SWEEPABLE = ("name", "output.dir")


def sweep_configs(config, axis: str, values) -> list:
    """One config per value; each gets a seed derived from (base seed, axis, value)."""
    if not values:
        raise ConfigError("sweep: empty value list")
    if axis in NON_SWEEPABLE:
        raise ConfigError(f"{axis}: not sweepable")
    out = []
    for v in values:
        cfg = config.with_value(axis, v)
        if axis != "seed":
            cfg = cfg.with_value("seed", stage_seed(config.seed, f"sweep/{axis}={v}"))
        cfg = cfg.with_value("name", f"{config.name}.{axis}={v}")
        out.append(cfg)
    return out


def run_sweep(config, axis: str, values, out_dir, force: bool = False, cache=None) -> Path:
    """Run the base config once per value; write per-run dirs and sweep.csv."""
    cache = cache if cache is not None else StageCache()
    out = Path(out_dir)
    configs = sweep_configs(config, axis, values)
    rows = []
    for v, cfg in zip(values, configs):
        res = run_experiment(cfg, out / f"{axis}={v}", force=force, cache=cache)
        rows.append(sweep_row(axis, v, res.report))
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return out / "sweep.csv"
