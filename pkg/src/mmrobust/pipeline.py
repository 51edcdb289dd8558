"""Experiment pipeline: gen -> reference -> augment -> train -> eval -> report.

A run directory holds::

    config.yaml            resolved configuration
    data/train.jsonl       base training set (+ data/vocab.json)
    data/test.jsonl        test set
    data/train_augmented.jsonl   only when augmenters are configured
    reference.ckpt         frozen clean encoder (when needed)
    model.ckpt             trained parameters
    runlog.jsonl           per-step training records
    timing.json            wall-clock per step (not covered by determinism)
    metrics.jsonl          MetricsReport records
    metrics.csv            one row per attack, columns REPORT_COLUMNS
    manifest.json          status, config hash and artifact digests

``manifest.json`` is written last; a run whose manifest is missing or whose
status is not ``complete`` is partial.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import augmented_element_count, build_augmented_dataset
from .config import ExperimentConfig
from .metrics import MetricsReport, augmentation_quality, recall_table, robust_eval
from .model import ModelParams, load_checkpoint, save_checkpoint
from .train import ConfigError, RunLog, TrainConfig, train
from .world import PairedDataset, generate_splits, save_dataset

log = logging.getLogger(__name__)

OUT_ENV = "MMROBUST_OUT"
STAGES = ("gen", "reference", "augment", "train", "eval", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage} failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


class RunDirError(RuntimeError):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out_dir(config: ExperimentConfig, out: str | os.PathLike | None = None) -> Path:
    if out is not None:
        return Path(out)
    if config.output.dir is not None:
        return Path(config.output.dir)
    return default_out_root() / f"{config.name}-{config.digest()}"


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StageCache:
    """In-memory memo of expensive stage outputs, shared across runs.

    ``stages`` restricts memoisation to the named stages (None: all).
    """

    store: dict = field(default_factory=dict)
    stages: tuple[str, ...] | None = None

    def get(self, stage: str, key, fn):
        if self.stages is not None and stage not in self.stages:
            return fn()
        if key not in self.store:
            self.store[key] = fn()
        return self.store[key]


@dataclass
class RunResult:
    config: ExperimentConfig
    report: MetricsReport
    params: ModelParams
    runlog: RunLog
    base_data: PairedDataset
    train_data: PairedDataset
    test_data: PairedDataset
    reference: ModelParams | None
    out_dir: Path | None = None


def needs_reference(config: ExperimentConfig) -> bool:
    return config.train.regime == "fare" or bool(config.augment.specs)


def _effective_specs(config: ExperimentConfig):
    return [
        dataclasses.replace(s, seed=s.seed ^ config.stage_seed(f"augment/{i}"))
        for i, s in enumerate(config.augment.specs)
    ]


def _run_meta(config: ExperimentConfig, n_aug: int) -> dict:
    tr = config.train
    return {
        "name": config.name,
        "regime": tr.regime,
        "order": tr.order,
        "image_objective": tr.budget.image_objective,
        "text_attack": tr.budget.text_attack,
        "train_pgd_steps": tr.budget.steps,
        "augmenters": "+".join(s.technique for s in config.augment.specs) or "none",
        "assembly": config.augment.assembly if config.augment.specs else "first-only-1:1",
        "n_augmented": n_aug,
        "world_digest": config.world.digest(),
        "eval_eps": config.eval.budget.eps,
    }


def _compute(config: ExperimentConfig, cache: StageCache, stage_hook) -> RunResult:
    seed_gen = config.stage_seed("gen")
    d = config.data

    stage_hook("gen")
    train_base, test = cache.get(
        "gen",
        _key("gen", dataclasses.asdict(config.world), dataclasses.asdict(d), seed_gen),
        lambda: generate_splits(
            config.world, d.n_train, d.n_test, d.images_per_group, d.captions_per_group, seed=seed_gen
        ),
    )

    stage_hook("reference")
    reference = None
    if needs_reference(config):
        ref = config.reference
        if ref.checkpoint is not None:
            reference, _ = load_checkpoint(ref.checkpoint)
        else:
            rcfg = dataclasses.replace(
                config.train,
                regime="clean",
                budget=TrainConfig().budget,
                order=TrainConfig().order,
                steps=ref.steps or config.train.steps,
                seed=config.stage_seed("reference"),
                policy=None,
            )
            reference = cache.get(
                "reference",
                _key("reference", rcfg.to_dict(), dataclasses.asdict(config.world), dataclasses.asdict(d), seed_gen),
                lambda: train(rcfg, train_base)[0],
            )

    stage_hook("augment")
    train_data = train_base
    quality = {}
    if config.augment.specs:
        specs = _effective_specs(config)
        train_data = build_augmented_dataset(
            train_base, specs, config.augment.assembly, seed=config.stage_seed("augment")
        )
        quality = augmentation_quality(reference, train_data, config.eval.diversity_estimator)

    stage_hook("train")
    tcfg = config.train_config()
    h = config.digest()
    snap = None
    if config.eval.snapshot_every:
        def snap(p, step):
            table = recall_table(p, test, gallery_size=config.eval.gallery_size)
            return {f"clean_{k}": v for k, v in table.items() if k.endswith("@1")}

    params, runlog = cache.get(
        "train",
        _key("train", h),
        lambda: train(
            tcfg,
            train_data,
            reference=reference,
            config_hash=h,
            snapshot_fn=snap,
            snapshot_every=config.eval.snapshot_every,
        ),
    )

    stage_hook("eval")
    recalls = evaluate(config, params, test)
    report = MetricsReport(
        recalls=recalls,
        alignment=quality.get("alignment"),
        diversity=quality.get("diversity"),
        frechet_gap=quality.get("frechet_gap"),
        diversity_estimator=config.eval.diversity_estimator,
        config_hash=h,
        reference_hash=reference.digest() if reference is not None else "",
        seed=config.seed,
        meta=_run_meta(config, augmented_element_count(train_data) if config.augment.specs else 0),
    )
    return RunResult(config, report, params, runlog, train_base, train_data, test, reference)


def evaluate(config: ExperimentConfig, params: ModelParams, test: PairedDataset) -> dict[str, dict[str, float]]:
    """Recall tables for every configured attack, each with its own stage seed."""
    ev = config.eval
    recalls = {}
    for attack in ev.attacks:
        extra = {"sga_views": ev.sga_views, "sga_scales": tuple(ev.sga_scales)} if attack == "sga-analog" else {}
        recalls[attack] = robust_eval(
            params,
            test,
            attack,
            ev.budget,
            seed=config.stage_seed(f"eval/{attack}"),
            gallery_size=ev.gallery_size,
            **extra,
        )
    return recalls


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, config: ExperimentConfig, status: str, files: list[str], error: str = "") -> None:
    manifest = {
        "status": status,
        "config_hash": config.digest(),
        "artifacts": {f: _digest_file(out / f) for f in sorted(files) if (out / f).exists()},
    }
    if error:
        manifest["error"] = error
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(out) -> dict | None:
    p = Path(out) / "manifest.json"
    if not p.exists():
        return None
    return json.loads(p.read_text())


def _check_out_dir(out: Path, config: ExperimentConfig, force: bool) -> None:
    manifest = read_manifest(out)
    if manifest is None:
        if out.exists() and any(out.iterdir()) and not force:
            if not (out / "config.yaml").exists():
                raise RunDirError(f"{out}: not empty and not a run directory (use --force)")
        return
    if manifest.get("config_hash") != config.digest() and not force:
        raise RunDirError(
            f"{out}: holds a run with config hash {manifest.get('config_hash')}, "
            f"not {config.digest()} (use --force to overwrite)"
        )


def run_experiment(
    config: ExperimentConfig,
    out_dir=None,
    force: bool = False,
    cache: StageCache | None = None,
    write: bool = True,
) -> RunResult:
    """Execute the pipeline; with ``write`` the artifacts go under ``out_dir``.

    Stage failures raise ``StageError`` after marking the run directory as
    failed. Re-running an identical config reproduces every artifact except
    ``timing.json`` byte for byte.
    """
    config.validate()
    cache = cache if cache is not None else StageCache()
    if not write:
        current = ["setup"]

        def hook(stage):
            current[0] = stage

        try:
            return _compute(config, cache, hook)
        except ConfigError:
            raise
        except Exception as exc:
            raise StageError(current[0], exc) from exc

    out = resolve_out_dir(config, out_dir)
    _check_out_dir(out, config, force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(exist_ok=True)
    old = out / "manifest.json"
    if old.exists():
        old.unlink()
    files = ["config.yaml"]
    (out / "config.yaml").write_text(f"# config_hash: {config.digest()}\n" + config.to_yaml())
    current = ["setup"]

    def hook(stage):
        current[0] = stage

    try:
        result = _compute(config, cache, hook)
        current[0] = "report"
        save_dataset(result.base_data, out / "data/train.jsonl", out / "data/vocab.json")
        save_dataset(result.test_data, out / "data/test.jsonl", False)
        files += ["data/train.jsonl", "data/vocab.json", "data/test.jsonl"]
        if config.augment.specs:
            save_dataset(result.train_data, out / "data/train_augmented.jsonl", False)
            files.append("data/train_augmented.jsonl")
        if result.reference is not None:
            save_checkpoint(result.reference, out / "reference.ckpt", config.digest())
            files.append("reference.ckpt")
        save_checkpoint(result.params, out / "model.ckpt", config.digest())
        result.runlog.save(out / "runlog.jsonl", out / "timing.json")
        result.report.save(out / "metrics.jsonl", out / "metrics.csv")
        files += ["model.ckpt", "runlog.jsonl", "timing.json", "metrics.jsonl", "metrics.csv"]
    except Exception as exc:
        err = StageError(current[0], exc)
        _write_manifest(out, config, f"failed:{current[0]}", files, str(err))
        if isinstance(exc, ConfigError):
            raise
        raise err from exc
    _write_manifest(out, config, "complete", files)
    result.out_dir = out
    return result


def generate_data(config: ExperimentConfig, out_dir=None, force: bool = False) -> Path:
    """Only the gen and augment stages (augmentation needs no reference)."""
    config.validate()
    out = resolve_out_dir(config, out_dir)
    _check_out_dir(out, config, force)
    (out / "data").mkdir(parents=True, exist_ok=True)
    d = config.data
    train_base, test = generate_splits(
        config.world, d.n_train, d.n_test, d.images_per_group, d.captions_per_group, seed=config.stage_seed("gen")
    )
    save_dataset(train_base, out / "data/train.jsonl", out / "data/vocab.json")
    save_dataset(test, out / "data/test.jsonl", False)
    if config.augment.specs:
        aug = build_augmented_dataset(
            train_base, _effective_specs(config), config.augment.assembly, seed=config.stage_seed("augment")
        )
        save_dataset(aug, out / "data/train_augmented.jsonl", False)
    return out


def mean_seconds_per_step(run_dir) -> float | None:
    p = Path(run_dir) / "timing.json"
    if not p.exists():
        return None
    return float(json.loads(p.read_text())["mean_seconds_per_step"])


__all__ = [
    "OUT_ENV",
    "STAGES",
    "RunDirError",
    "RunResult",
    "StageCache",
    "StageError",
    "default_out_root",
    "evaluate",
    "generate_data",
    "needs_reference",
    "resolve_out_dir",
    "run_experiment",
    "mean_seconds_per_step",
]
