from pathlib import Path

import pytest

from mmrobust import benchmark
from mmrobust.benchmark import AUGMENTER_SUITE, VARIANTS, run_benchmark, summary_rows, variant_config
from mmrobust.config import load_config

CONFIGS = Path(__file__).parents[1] / "configs" / "benchmark"


def test_shipped_configs_match_variants():
    for name in VARIANTS:
        cfg = variant_config(name)
        shipped = load_config(CONFIGS / f"{cfg.name[len('bench-'):]}.yaml")
        assert shipped.digest() == cfg.digest(), name


def test_variants_are_distinct_and_valid():
    digests = set()
    for name in VARIANTS:
        cfg = variant_config(name, seed=2)
        cfg.validate()
        assert cfg.seed == 2
        digests.add(cfg.digest())
    assert len(digests) == len(VARIANTS)
    assert set(AUGMENTER_SUITE) <= set(VARIANTS)


def test_variants_share_world_data_and_eval():
    base = variant_config("mat")
    for name in VARIANTS:
        cfg = variant_config(name)
        assert cfg.world == base.world and cfg.data == base.data
        assert cfg.eval.budget == base.eval.budget and cfg.eval.gallery_size == base.eval.gallery_size


def test_unknown_variant():
    with pytest.raises(KeyError):
        variant_config("mat+bert")


def test_assembly_variants_use_identical_augmenters():
    specs = {tuple(variant_config(n).augment.specs) for n in VARIANTS if n.startswith("assembly:")}
    assert len(specs) == 1


@pytest.fixture
def tiny(monkeypatch):
    small = benchmark._merge(
        benchmark.BASE,
        {"data": {"n_train": 48, "n_test": 16}, "train": {"steps": 15, "batch_size": 16}, "eval": {"gallery_size": 8}},
    )
    monkeypatch.setattr(benchmark, "BASE", small)


def test_run_benchmark_writes_tables(tiny, tmp_path):
    res = run_benchmark(["mat", "mat+i2t"], seeds=(0, 1), out_root=tmp_path)
    assert [len(v) for v in res.reports.values()] == [2, 2]
    assert 0.0 <= res.mean("mat") <= 1.0
    for f in ("methods.csv", "ablation.csv", "quality.csv"):
        assert (tmp_path / f).exists()
    assert len((tmp_path / "quality.csv").read_text().splitlines()) == 3
    rows = summary_rows(res)
    assert {(r["variant"], r["attack"]) for r in rows} == {
        (v, a) for v in ("mat", "mat+i2t") for a in ("clean", "sga-analog")
    }
    assert all(r["alignment"] is None for r in rows if r["variant"] == "mat")


def test_run_benchmark_is_deterministic(tiny):
    a = run_benchmark(["mat"], seeds=(3,))
    b = run_benchmark(["mat"], seeds=(3,))
    assert a.reports["mat"][0].to_dict() == b.reports["mat"][0].to_dict()
