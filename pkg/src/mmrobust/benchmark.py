"""The acceptance benchmark: one fixed scale and a named config per compared variant.

Every variant shares the world, data split, optimiser and budgets of
``BASE``; a variant only overrides the training regime, the augmenters or
the assembly. Results are averaged over ``SEEDS``.

    results = run_benchmark(["clean", "mat", "mat+i2t"])
    results.mean("mat+i2t", "sga-analog")
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, from_dict
from .metrics import ATTACKS, MetricsReport
from .pipeline import StageCache, run_experiment
from .report import merge_reports

SEEDS = (0, 1, 2)
N_TRAIN = 768
GALLERY = 64
N_GALLERIES = 8

_TRAIN_BUDGET = {"eps": "8/255", "step_size": "4/255", "steps": 2}

BASE = {
    "name": "bench",
    "seed": 0,
    "world": {"mention_prob": 0.8},
    "data": {"n_train": N_TRAIN, "n_test": GALLERY * N_GALLERIES},
    "train": {
        "regime": "mat",
        "steps": 1000,
        "batch_size": 128,
        "optimizer": "adamw",
        "lr": 3.0e-3,
        "weight_decay": 1.0,
        "budget": _TRAIN_BUDGET,
    },
    "eval": {
        "attacks": ["clean", "sga-analog"],
        "budget": {"eps": "8/255", "step_size": "4/255", "steps": 10},
        "gallery_size": GALLERY,
    },
}


def _aug(*specs, assembly="one-to-many"):
    return {"augment": {"assembly": assembly, "specs": [dict(s) for s in specs]}}


_PAIR = ({"technique": "ti2i-oracle", "count": 2}, {"technique": "i2t-oracle", "count": 2})

# name -> overrides merged into BASE
VARIANTS: dict[str, dict] = {
    "clean": {"train": {"regime": "clean"}, "eval": {"attacks": list(ATTACKS)}},
    # the image-only baseline trains against the evaluation-strength image attack
    "tecoa": {"train": {"regime": "tecoa-itr", "budget": {**_TRAIN_BUDGET, "steps": 10}}},
    "mat": {},
    "mat+i2t": _aug({"technique": "i2t-oracle"}),
    "mat+misaligned": _aug({"technique": "misaligned-control"}),
    "mat+t2i-shift": _aug({"technique": "t2i-oracle", "shift": 0.15}),
    "mat+eda-trivial": _aug({"technique": "eda", "alpha": 0.02}),
    "mat+eda": _aug({"technique": "eda"}),
    "mat+randaug": _aug({"technique": "randaug-analog"}),
    "mat+divcaps": _aug({"technique": "i2t-divcaps-oracle"}),
    "mat+t2i": _aug({"technique": "t2i-oracle"}),
    "mat+ti2i": _aug({"technique": "ti2i-oracle"}),
    "assembly:one-to-many": _aug(*_PAIR),
    "assembly:naive-flat": _aug(*_PAIR, assembly="naive-flat-1:1"),
    "assembly:oracle-extra": _aug(*_PAIR, assembly="oracle-extra-originals"),
    "mat:I->T": {"train": {"order": "I->T"}},
    "mat:uni-image": {"train": {"budget": {**_TRAIN_BUDGET, "image_objective": "uni", "random_start": True}}},
}

# the augmenter suite compared on alignment, diversity, gap and robustness
AUGMENTER_SUITE = (
    "mat+i2t",
    "mat+divcaps",
    "mat+eda",
    "mat+randaug",
    "mat+t2i",
    "mat+ti2i",
    "mat+misaligned",
    "mat+t2i-shift",
    "mat+eda-trivial",
)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def variant_config(name: str, seed: int = 0) -> ExperimentConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown benchmark variant {name!r}")
    tree = _merge(BASE, VARIANTS[name])
    tree["name"] = "bench-" + name.replace("+", "-").replace(":", "-").replace(">", "")
    tree["seed"] = int(seed)
    return from_dict(tree)


@dataclass
class BenchmarkResults:
    reports: dict[str, list[MetricsReport]] = field(default_factory=dict)
    seconds: float = 0.0

    def values(self, name: str, attack: str = "sga-analog", key: str = "TR@1") -> list[float]:
        return [r.recalls[attack][key] for r in self.reports[name]]

    def mean(self, name: str, attack: str = "sga-analog", key: str = "TR@1") -> float:
        return float(np.mean(self.values(name, attack, key)))

    def quality(self, name: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports[name]]))


def run_benchmark(
    names,
    seeds=SEEDS,
    out_root=None,
    cache: StageCache | None = None,
    progress=None,
) -> BenchmarkResults:
    """Run each variant at each seed; with ``out_root`` every run is written
    to ``out_root/<variant>-s<seed>`` and the merged tables to ``out_root``."""
    # trained models are never shared between variants; data and references are
    cache = cache if cache is not None else StageCache(stages=("gen", "reference"))
    res = BenchmarkResults()
    t0 = time.perf_counter()
    dirs = []
    for name in names:
        res.reports[name] = []
        for seed in seeds:
            cfg = variant_config(name, seed)
            out = None
            if out_root is not None:
                out = Path(out_root) / f"{cfg.name}-s{seed}"
                dirs.append(out)
            run = run_experiment(cfg, out, force=True, cache=cache, write=out is not None)
            res.reports[name].append(run.report)
            if progress is not None:
                progress(name, seed, run.report)
    res.seconds = time.perf_counter() - t0
    if out_root is not None:
        merge_reports(dirs, Path(out_root), force=True)
    return res


SUMMARY_COLUMNS = ("variant", "attack", "n_seeds", "TR@1", "IR@1", "TR@1_sd", "alignment", "diversity", "frechet_gap")


def summary_rows(results: BenchmarkResults) -> list[dict]:
    """Seed means per variant and evaluated attack."""
    rows = []
    for name, reports in results.reports.items():
        for attack in reports[0].recalls:
            tr = results.values(name, attack, "TR@1")
            row = {
                "variant": name,
                "attack": attack,
                "n_seeds": len(tr),
                "TR@1": float(np.mean(tr)),
                "IR@1": results.mean(name, attack, "IR@1"),
                "TR@1_sd": float(np.std(tr)),
            }
            for m in ("alignment", "diversity", "frechet_gap"):
                row[m] = results.quality(name, m) if reports[0].alignment is not None else None
            rows.append(row)
    return rows


def main(argv=None) -> int:
    import argparse

    from .metrics import write_csv

    ap = argparse.ArgumentParser(prog="python3 -m mmrobust.benchmark", description="run the acceptance benchmark")
    ap.add_argument("--out", required=True, help="directory for per-run artifacts and summary.csv")
    ap.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variant names")
    ap.add_argument("--seeds", default=",".join(map(str, SEEDS)))
    args = ap.parse_args(argv)

    def progress(name, seed, report):
        r = report.recalls["sga-analog"]
        print(f"{name:<22s} seed={seed} sga TR@1={r['TR@1']:.4f} clean TR@1={report.recalls['clean']['TR@1']:.4f}", flush=True)

    names = [v for v in args.variants.split(",") if v]
    seeds = [int(s) for s in args.seeds.split(",")]
    res = run_benchmark(names, seeds, out_root=args.out, progress=progress)
    write_csv(Path(args.out) / "summary.csv", SUMMARY_COLUMNS, summary_rows(res))
    print(f"{res.seconds:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
