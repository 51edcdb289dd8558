"""Acceptance criteria 1-11, one verdict line each.

Criteria 5-10 share one benchmark run (every variant, three seeds). Set
MMROBUST_BENCH_OUT to keep its artifacts; otherwise they go to a temp dir.
"""

import csv
import math
import os
import time
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from mmrobust import autograd as ag
from mmrobust.attacks import PerturbationBudget, compose_multimodal, pgd, text_attack_greedy
from mmrobust.autograd import Tensor
from mmrobust.benchmark import AUGMENTER_SUITE, SEEDS, VARIANTS, run_benchmark
from mmrobust.cli import main
from mmrobust.metrics import ATTACKS, attack_dataset, diversity_kl, frechet_distance, frechet_gap, psd_sqrt
from mmrobust.model import ModelParams, embed_images, embed_texts, info_nce_from_embeddings, info_nce_loss, init_params
from mmrobust.world import generate_dataset

SMOKE = Path(__file__).parents[1] / "configs" / "smoke.yaml"


def verdict(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    assert ok, line


# 1. gradient suite

OP_CASES = {
    "add": lambda x, c: ag.add(x, c),
    "subtract": lambda x, c: ag.subtract(c, x),
    "scale": lambda x, c: ag.scale(x, -1.7),
    "multiply": lambda x, c: ag.multiply(x, c),
    "matmul": lambda x, c: ag.matmul(x, ag.transpose(c)),
    "tanh": lambda x, c: ag.tanh(x),
    "exp": lambda x, c: ag.exp(ag.scale(x, 0.5)),
    "gather": lambda x, c: ag.gather(x, [2, 0, 2, 1]),
    "sum": lambda x, c: ag.tsum(x, axis=1),
    "mean": lambda x, c: ag.mean(x, axis=0),
    "l2_normalize": lambda x, c: ag.l2_normalize(x),
    "log_sum_exp": lambda x, c: ag.log_sum_exp(x, axis=1),
}
COORDS_PER_TENSOR = 32


def _op_error(op, i):
    rng = np.random.default_rng([21, i])
    x0 = rng.normal(size=(3, 4))
    c = Tensor(rng.normal(size=(3, 4)))
    w = {}

    def f(x):
        y = op(x, c)
        if "w" not in w:
            w["w"] = Tensor(np.random.default_rng([22, i]).normal(size=y.shape))
        return ag.tsum(ag.multiply(y, w["w"]))

    return ag.finite_diff_check(f, x0)


def _loss_errors(i, world):
    """Per-parameter worst error of the full loss at a random init, on a
    random sample of coordinates of every parameter tensor."""
    params = init_params(seed=1000 + i)
    images, captions = generate_dataset(world, 4, seed=2000 + i).first_pairs()
    rng = np.random.default_rng([23, i])
    out = {}
    for name in params.names:
        def f(x, name=name):
            q = ModelParams(**{n: (x if n == name else Tensor(t.data)) for n, t in params.items()})
            return info_nce_loss(q, images, captions)

        point = getattr(params, name).data
        coords = rng.choice(point.size, min(point.size, COORDS_PER_TENSOR), replace=False)
        out[name] = ag.finite_diff_check(f, point, coords=coords)
    return out


def test_criterion_01_gradient_suite(acceptance_log, world):
    t0 = time.perf_counter()
    op_worst = {name: max(_op_error(op, i) for i in range(25)) for name, op in OP_CASES.items()}
    loss_worst = defaultdict(float)
    for i in range(25):
        for name, e in _loss_errors(i, world).items():
            loss_worst[name] = max(loss_worst[name], e)
    elapsed = time.perf_counter() - t0
    bad_ops = {k: v for k, v in op_worst.items() if v > 1e-4}
    worst_param = max(loss_worst, key=loss_worst.get)
    ok = not bad_ops and loss_worst[worst_param] <= 1e-4 and elapsed < 60
    verdict(
        acceptance_log,
        1,
        ok,
        f"ops worst {max(op_worst.values()):.1e} ({len(op_worst)} ops x 25); "
        f"full loss worst {loss_worst[worst_param]:.1e} on {worst_param} (25 inits); {elapsed:.0f}s",
    )


# 2. InfoNCE exactness


def _direct_info_nce(img, txt, tau):
    n = len(img)
    s = [[float(np.dot(img[i], txt[j])) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = sum(math.exp(s[i][j]) for j in range(n))
        col = sum(math.exp(s[j][i]) for j in range(n))
        total += -math.log(math.exp(s[i][i]) / row) - math.log(math.exp(s[i][i]) / col)
    return total / (2 * n)


def test_criterion_02_info_nce_exactness(acceptance_log):
    rng = np.random.default_rng(5)
    params = init_params(seed=3)
    single = info_nce_loss(params, rng.uniform(size=(1, 32)), [(1, 2, 3)]).item()

    uniform_err = 0.0
    for n in (2, 7, 64, 128):
        u = rng.normal(size=16)
        u /= np.linalg.norm(u)
        emb = Tensor(np.tile(u, (n, 1)))
        loss = info_nce_from_embeddings(emb, emb, Tensor(np.log(0.07))).item()
        uniform_err = max(uniform_err, abs(loss - math.log(n)))

    oracle_err = 0.0
    for i in range(20):
        r = np.random.default_rng([6, i])
        n = int(r.integers(2, 12))
        img = r.normal(size=(n, 16))
        txt = r.normal(size=(n, 16))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)
        tau = float(r.uniform(0.05, 1.0))
        got = info_nce_from_embeddings(Tensor(img), Tensor(txt), Tensor(np.log(tau))).item()
        oracle_err = max(oracle_err, abs(got - _direct_info_nce(img, txt, tau)))

    ok = single == 0.0 and uniform_err <= 1e-9 and oracle_err <= 1e-10
    verdict(
        acceptance_log,
        2,
        ok,
        f"n=1 loss {single:.1e}; uniform |L - ln n| {uniform_err:.1e}; vs direct sum {oracle_err:.1e}",
    )


# 3. attack constraints


def _substitutions(a, b):
    if len(a) != len(b):
        return math.inf
    return sum(x != y for x, y in zip(a, b))


def _brute_force_single_edit(params, caption, target):
    best_cap, best = tuple(caption), float(embed_texts(params, [caption])[0] @ target)
    cands = []
    for p in range(len(caption)):
        for t in range(params.E.shape[0]):
            if t != caption[p]:
                cands.append(tuple(caption[:p]) + (t,) + tuple(caption[p + 1 :]))
    scores = embed_texts(params, cands) @ target
    i = int(np.argmin(scores))
    return (cands[i], float(scores[i])) if scores[i] < best else (best_cap, best)


def test_criterion_03_attack_constraints(acceptance_log, trained, splits):
    test = splits[1]
    models = {"trained": trained, "init": init_params(seed=9)}
    n_img = n_img_ok = n_txt = n_txt_ok = 0
    for mname, params in models.items():
        for eps in (2 / 255, 8 / 255, 16 / 255):
            for m in (1, 2, 3):
                budget = PerturbationBudget(eps=eps, step_size=eps / 2, steps=5, max_edits=m)
                for attack in ATTACKS[1:]:
                    adv = attack_dataset(params, test, attack, budget, seed=m)
                    for g, a in zip(test.groups, adv.groups):
                        d = a.images[0] - g.images[0]
                        n_img += 1
                        n_img_ok += bool(
                            np.max(np.abs(d)) <= eps + 1e-12 and a.images[0].min() >= 0 and a.images[0].max() <= 1
                        )
                        for c0, c1 in zip(g.captions, a.captions):
                            n_txt += 1
                            n_txt_ok += _substitutions(c0, c1) <= m
                images, captions = test.first_pairs()
                for order in ("T->I", "I->T", "T->I->T", "I->T->I"):
                    for objective in ("cross", "uni"):
                        b = replace(budget, image_objective=objective, random_start=objective == "uni")
                        img, caps = compose_multimodal(params, images, captions, b, order, np.random.default_rng(m))
                        d = np.max(np.abs(img - images), axis=1)
                        n_img += len(img)
                        n_img_ok += int(np.sum((d <= eps + 1e-12) & (img.min(1) >= 0) & (img.max(1) <= 1)))
                        n_txt += len(caps)
                        n_txt_ok += sum(_substitutions(a, b) <= m for a, b in zip(captions, caps))

    images, captions = test.first_pairs()
    extra_i, extra_c = splits[0].first_pairs()
    images = np.vstack([images, extra_i[:2]])
    captions = list(captions) + list(extra_c[:2])
    targets = embed_images(trained, images)
    res = text_attack_greedy(trained, captions, targets, PerturbationBudget(max_edits=1, n_candidates=63))
    brute_ok = sum(
        adv == bf[0] and abs(obj - bf[1]) <= 1e-12
        for c, t, adv, obj in zip(captions, targets, res.adversarial, res.final_objective)
        for bf in [_brute_force_single_edit(trained, c, t)]
    )

    rng = np.random.default_rng(4)
    w = rng.normal(size=(6, 12))
    x0 = rng.uniform(0, 1, size=(6, 12))
    x0[0, :3] = [0.0, 1.0, 0.003]
    closed_ok = True
    for eps in (0.02, 0.1):
        out = pgd(lambda x: ag.tsum(ag.multiply(x, Tensor(w)), axis=1), x0, eps, 1, eps).adversarial
        closed_ok &= bool(np.array_equal(out, np.clip(x0 - eps * np.sign(w), 0.0, 1.0)))

    ok = n_img_ok == n_img and n_txt_ok == n_txt and brute_ok == len(captions) == 50 and closed_ok
    verdict(
        acceptance_log,
        3,
        ok,
        f"images in ball {n_img_ok}/{n_img}; texts within m {n_txt_ok}/{n_txt}; "
        f"brute force {brute_ok}/{len(captions)}; PGD-1 closed form {'exact' if closed_ok else 'mismatch'}",
    )


# 4. metric kernels


def _kl_full_cov(m1, s1, m2, s2):
    inv = np.linalg.inv(s2)
    d = m2 - m1
    return 0.5 * (np.trace(inv @ s1) + d @ inv @ d - len(m1) + np.linalg.slogdet(s2)[1] - np.linalg.slogdet(s1)[1])


def test_criterion_04_metric_kernels(acceptance_log, trained, splits):
    pairs = splits[0].first_pairs()
    self_gap = frechet_gap(trained, pairs, pairs)

    rng = np.random.default_rng(8)
    shift_err = 0.0
    for i in range(10):
        a = rng.normal(size=(16, 16))
        cov = a @ a.T / 16
        mu1, mu2 = rng.normal(size=16), rng.normal(size=16)
        shift_err = max(shift_err, abs(frechet_distance(mu1, cov, mu2, cov) - np.sum((mu1 - mu2) ** 2)))

    kl_err = 0.0
    for i in range(10):
        mu1, mu2 = rng.normal(size=8), rng.normal(size=8)
        sd1, sd2 = rng.uniform(0.2, 2, size=8), rng.uniform(0.2, 2, size=8)
        # two samples at mu -/+ sd fit exactly (mu, sd^2)
        o = np.vstack([mu1 - sd1, mu1 + sd1])
        g = np.vstack([mu2 - sd2, mu2 + sd2])
        reg = 1e-6
        oracle = _kl_full_cov(mu1, np.diag(sd1**2 + reg), mu2, np.diag(sd2**2 + reg))
        kl_err = max(kl_err, abs(diversity_kl(o, g, "gaussian-fit") - oracle))

    sqrt_err = 0.0
    for i in range(10):
        b = rng.normal(size=(32, 32 if i % 2 else 20))
        A = b @ b.T
        S = psd_sqrt(A)
        sqrt_err = max(sqrt_err, float(np.max(np.abs(S @ S - A))))

    ok = self_gap <= 1e-8 and shift_err <= 1e-6 and kl_err <= 1e-8 and sqrt_err < 1e-8
    verdict(
        acceptance_log,
        4,
        ok,
        f"gap(D,D) {self_gap:.1e}; mean shift err {shift_err:.1e}; KL err {kl_err:.1e}; sqrt err {sqrt_err:.1e}",
    )


# 5-10. benchmark orderings


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = os.environ.get("MMROBUST_BENCH_OUT") or tmp_path_factory.mktemp("bench")
    res = run_benchmark(list(VARIANTS), SEEDS, out_root=out)
    return res, Path(out)


def _chain(values, margin):
    gaps = [b - a for a, b in zip(values, values[1:])]
    return all(g >= margin for g in gaps), gaps


def _fmt_chain(names, values):
    return " < ".join(f"{n} {v:.3f}" for n, v in zip(names, values))


def test_criterion_05_attack_strength_ordering(acceptance_log, bench):
    res, _ = bench
    names = ("sga-analog", "coattack", "pgd-only", "clean")
    values = [res.mean("clean", a) for a in names]
    ok, gaps = _chain(values, 0.02)
    verdict(acceptance_log, 5, ok, f"{_fmt_chain(names, values)}; min gap {min(gaps):+.3f} (need >= 0.02)")


def test_criterion_06_defense_ordering(acceptance_log, bench):
    res, _ = bench
    names = ("clean", "tecoa", "mat", "mat+i2t")
    values = [res.mean(n) for n in names]
    ok, gaps = _chain(values, 0.03)
    verdict(acceptance_log, 6, ok, f"sga TR@1 {_fmt_chain(names, values)}; min gap {min(gaps):+.3f} (need >= 0.03)")


def test_criterion_07_negative_controls(acceptance_log, bench):
    res, _ = bench
    base = res.mean("mat")
    gains = {n: res.mean(n) - base for n in ("mat+misaligned", "mat+t2i-shift", "mat+eda-trivial")}
    ok = gains["mat+misaligned"] <= 0.01 and gains["mat+t2i-shift"] <= 0.01 and gains["mat+eda-trivial"] < 0.01
    detail = ", ".join(f"{n} {g:+.3f}" for n, g in gains.items())
    verdict(acceptance_log, 7, ok, f"gain over mat {base:.3f}: {detail} (need <= +0.01)")


def test_criterion_08_augmenter_quality_pattern(acceptance_log, bench):
    _, out = bench
    with open(out / "methods.csv", newline="") as f:
        robust = {(r["run"], r["seed"]): float(r["sga-analog:TR@1"]) for r in csv.DictReader(f)}
    rows = defaultdict(lambda: defaultdict(list))
    with open(out / "quality.csv", newline="") as f:
        for r in csv.DictReader(f):
            if r["assembly"] == "one-to-many" and "+" not in r["augmenter"]:
                for k in ("alignment", "diversity", "frechet_gap"):
                    rows[r["run"]][k].append(float(r[k]))
                rows[r["run"]]["robust TR@1"].append(robust[(r["run"], r["seed"])])
    suite = {f"bench-{v.replace('+', '-')}" for v in AUGMENTER_SUITE}
    table = {run: {k: np.mean(v) for k, v in d.items()} for run, d in rows.items() if run in suite}
    i2t = table["bench-mat-i2t"]

    def col(k):
        return np.array([t[k] for t in table.values()])

    checks = {
        "alignment top quartile": i2t["alignment"] >= np.quantile(col("alignment"), 0.75),
        "diversity above median": i2t["diversity"] > np.median(col("diversity")),
        "gap below median": i2t["frechet_gap"] < np.median(col("frechet_gap")),
        "best robust TR@1": i2t["robust TR@1"] == col("robust TR@1").max(),
    }
    best = max(table, key=lambda r: table[r]["robust TR@1"])
    detail = "; ".join(f"{k} {'yes' if v else 'no'}" for k, v in checks.items())
    verdict(
        acceptance_log,
        8,
        all(checks.values()) and len(table) == len(AUGMENTER_SUITE),
        f"{len(table)} augmenters from quality.csv + methods.csv: {detail} "
        f"(i2t {i2t['robust TR@1']:.3f}, best {best} {table[best]['robust TR@1']:.3f})",
    )


def test_criterion_09_assembly_ablation(acceptance_log, bench):
    res, _ = bench
    one = res.mean("assembly:one-to-many")
    flat = res.mean("assembly:naive-flat")
    extra = res.mean("assembly:oracle-extra")
    counts = {
        n: {r.meta["n_augmented"] for r in res.reports[n]}
        for n in ("assembly:one-to-many", "assembly:naive-flat", "assembly:oracle-extra")
    }
    same_counts = len({frozenset(c) for c in counts.values()}) == 1
    ok = same_counts and one - flat >= 0.02 and extra >= max(one, flat)
    verdict(
        acceptance_log,
        9,
        ok,
        f"one-to-many {one:.3f}, naive-flat {flat:.3f} (gap {one - flat:+.3f}, need >= 0.02), "
        f"oracle-extra {extra:.3f}; equal element counts {same_counts}",
    )


def test_criterion_10_order_objective_ablation(acceptance_log, bench):
    res, _ = bench
    ti, it, uni = res.mean("mat"), res.mean("mat:I->T"), res.mean("mat:uni-image")
    ok = abs(ti - it) < 0.05 and ti - uni >= 0.02
    verdict(
        acceptance_log,
        10,
        ok,
        f"T->I {ti:.3f} vs I->T {it:.3f} (|diff| {abs(ti - it):.3f}, need < 0.05); "
        f"cross {ti:.3f} vs uni {uni:.3f} (gap {ti - uni:+.3f}, need >= 0.02)",
    )


# 11. determinism

METRIC_ARTIFACTS = {
    "run": ("metrics.jsonl", "metrics.csv", "model.ckpt", "runlog.jsonl", "data/train.jsonl", "data/test.jsonl"),
    "attack-eval": ("attack_eval.jsonl", "attack_eval.csv"),
    "gen-data": ("data/train.jsonl", "data/test.jsonl", "data/vocab.json", "data/train_augmented.jsonl"),
    "sweep": ("sweep.csv",),
    "report": ("methods.csv", "ablation.csv", "quality.csv"),
}


# wall-clock per step is a measurement, not a metric
TIMING_COLUMNS = {"ablation.csv": "sec_per_iter"}


def _metric_bytes(path):
    if path.name not in TIMING_COLUMNS:
        return path.read_bytes()
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    drop = rows[0].index(TIMING_COLUMNS[path.name])
    return "\n".join(",".join(c for i, c in enumerate(r) if i != drop) for r in rows).encode()


def _commands(tmp, tag, cfg, aug_cfg):
    run = tmp / f"run-{tag}"
    return {
        "run": ["run", "--config", str(cfg), "--out", str(run)],
        "attack-eval": ["attack-eval", "--config", str(cfg), "--out", str(run)],
        "gen-data": ["gen-data", "--config", str(aug_cfg), "--out", str(tmp / f"gen-{tag}")],
        "sweep": [
            "sweep", "--config", str(cfg), "--axis", "train.steps", "--values", "20,40",
            "--out", str(tmp / f"sweep-{tag}"),
        ],
        "report": ["report", str(run), "--out", str(tmp / f"report-{tag}")],
    }


def test_criterion_11_determinism(acceptance_log, tmp_path):
    base = yaml.safe_load(SMOKE.read_text())
    base["train"]["steps"] = 60
    cfg = tmp_path / "det.yaml"
    cfg.write_text(yaml.safe_dump(base))
    aug = dict(base, augment={"specs": [{"technique": "i2t-oracle"}]})
    aug_cfg = tmp_path / "det-aug.yaml"
    aug_cfg.write_text(yaml.safe_dump(aug))

    dirs = {}
    for tag in ("a", "b"):
        for name, argv in _commands(tmp_path, tag, cfg, aug_cfg).items():
            assert main(argv) == 0, argv
            dirs[(name, tag)] = Path(argv[argv.index("--out") + 1])

    compared = differ = 0
    for name, files in METRIC_ARTIFACTS.items():
        for f in files:
            a, b = dirs[(name, "a")] / f, dirs[(name, "b")] / f
            compared += 1
            differ += not (a.exists() and b.exists() and _metric_bytes(a) == _metric_bytes(b))
    verdict(
        acceptance_log,
        11,
        differ == 0,
        f"{compared - differ}/{compared} artifacts byte-identical across reruns of {', '.join(METRIC_ARTIFACTS)} "
        "(ablation.csv without its sec_per_iter column)",
    )
