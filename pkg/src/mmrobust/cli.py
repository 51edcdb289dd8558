"""Command-line driver.

    mmrobust run        --config C [--out DIR] [--seed N] [--force]
    mmrobust sweep      --config C --axis PATH --values V1,V2,... [--out DIR] [--seed N] [--force]
    mmrobust report     RUN_DIR [RUN_DIR ...] [--out DIR] [--force]
    mmrobust gen-data   --config C [--out DIR] [--seed N] [--force]
    mmrobust attack-eval --config C [--out DIR] [--checkpoint CKPT] [--seed N]

The output directory defaults to ``$MMROBUST_OUT/<name>-<config hash>``
(``runs/`` when the variable is unset). Exit status: 0 on success, 2 for an
invalid config or command line, 1 for a failed stage; ``report`` exits with
the number of run directories it had to skip.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_config
from .metrics import MetricsReport
from .model import CheckpointError, load_checkpoint
from .pipeline import RunDirError, StageError, evaluate, generate_data, resolve_out_dir, run_experiment
from .report import ReportError, merge_reports, run_sweep
from .world import generate_splits, load_dataset

log = logging.getLogger("mmrobust")


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_value("seed", args.seed)
    return cfg


def _parse_values(text: str) -> list:
    return [yaml.safe_load(v) for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    res = run_experiment(_load(args), args.out, force=args.force)
    print(f"{res.out_dir}  config_hash={res.report.config_hash}")
    for row in res.report.rows():
        print(f"  {row['attack']:<11s} TR@1={row['TR@1']:.4f} IR@1={row['IR@1']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = _parse_values(args.values)
    out = resolve_out_dir(cfg, args.out)
    path = run_sweep(cfg, args.axis, values, out, force=args.force)
    print(path)
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(args.runs[0]).parent
    res = merge_reports(args.runs, out, force=args.force)
    for p in res.written:
        print(p)
    for d in res.missing:
        print(f"skipped (no metrics.jsonl): {d}", file=sys.stderr)
    return min(len(res.missing), 100)


def cmd_gen_data(args) -> int:
    print(generate_data(_load(args), args.out, force=args.force))
    return 0


def cmd_attack_eval(args) -> int:
    cfg = _load(args)
    out = resolve_out_dir(cfg, args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    params, chash = load_checkpoint(ckpt)
    test_path = out / "data" / "test.jsonl"
    if test_path.exists():
        test = load_dataset(test_path)
    else:
        d = cfg.data
        _, test = generate_splits(
            cfg.world, d.n_train, d.n_test, d.images_per_group, d.captions_per_group, seed=cfg.stage_seed("gen")
        )
    recalls = evaluate(cfg, params, test)
    report = MetricsReport(
        recalls=recalls,
        config_hash=cfg.digest(),
        seed=cfg.seed,
        meta={"name": cfg.name, "checkpoint_hash": chash, "model_digest": params.digest()},
    )
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "attack_eval.jsonl", out / "attack_eval.csv")
    for row in report.rows():
        print(f"  {row['attack']:<11s} TR@1={row['TR@1']:.4f} IR@1={row['IR@1']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmrobust", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, force=True):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", default=None, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite a directory holding another config")

    common(sub.add_parser("run", help="run the full pipeline"))
    sp = sub.add_parser("sweep", help="run the config once per value of one field")
    common(sp)
    sp.add_argument("--axis", required=True, help="dotted config field, e.g. augment.specs.0.count")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp = sub.add_parser("report", help="merge run directories into CSV tables")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--out", default=None, help="table directory (default: parent of the first run)")
    sp.add_argument("--force", action="store_true", help="merge reports from different world configs")
    common(sub.add_parser("gen-data", help="generate (and augment) datasets only"))
    sp = sub.add_parser("attack-eval", help="evaluate a checkpoint under the configured attacks")
    common(sp, force=False)
    sp.add_argument("--checkpoint", default=None, help="checkpoint (default: <out>/model.ckpt)")
    return p


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "gen-data": cmd_gen_data,
    "attack-eval": cmd_attack_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, RunDirError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
