import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrobust.attacks import ZERO_BUDGET, PerturbationBudget
from mmrobust.augment import AugmenterSpec, build_augmented_dataset
from mmrobust.metrics import (
    ATTACKS,
    REPORT_COLUMNS,
    MetricsReport,
    MissingReferenceError,
    NumericError,
    alignment_score,
    augmentation_quality,
    diversity_kl,
    fit_gaussian,
    frechet_distance,
    frechet_gap,
    galleries,
    gaussian_kl_diag,
    psd_sqrt,
    recall_at_k,
    recall_from_similarity,
    recall_table,
    robust_eval,
)
from mmrobust.model import init_params
from mmrobust.world import ContractError, PairedDataset, WorldConfig, generate_dataset


def kl_full_cov(mu1, s1, mu2, s2):
    """Multivariate normal KL through matrix inverse and determinants."""
    k = len(mu1)
    inv = np.linalg.inv(s2)
    d = mu2 - mu1
    return 0.5 * (np.trace(inv @ s1) + d @ inv @ d - k + np.log(np.linalg.det(s2) / np.linalg.det(s1)))


# recall


def test_perfect_embeddings_give_full_recall():
    emb = np.eye(10)
    sim = emb @ emb.T
    r = recall_from_similarity(sim, np.arange(10), np.arange(10))
    assert r == {1: 1.0, 5: 1.0, 10: 1.0}


def test_ties_broken_by_candidate_index():
    sim = np.array([[0.5, 0.5, 0.5]])
    assert recall_from_similarity(sim, [0], [0, 1, 2], ks=(1,))[1] == 1.0
    assert recall_from_similarity(sim, [2], [0, 1, 2], ks=(1, 2, 3)) == {1: 0.0, 2: 0.0, 3: 1.0}


def test_any_group_member_counts_as_hit():
    sim = np.array([[0.1, 0.9, 0.2]])
    assert recall_from_similarity(sim, [7], [3, 7, 7], ks=(1,))[1] == 1.0


def test_random_model_at_chance():
    ds = generate_dataset(WorldConfig(), 128, 1, 1, seed=5)
    p = 1 / 128
    bound = p + 3 * math.sqrt(p * (1 - p) / 128)
    for seed in range(3):
        r = recall_table(init_params(seed=seed), ds)
        assert r["TR@1"] <= bound and r["IR@1"] <= bound


def test_recall_monotone_in_k_and_full_gallery(trained, splits):
    r = recall_table(trained, splits[1], ks=(1, 5, 10, 48 * 5))
    assert r["TR@1"] <= r["TR@5"] <= r["TR@10"]
    assert r["IR@1"] <= r["IR@5"] <= r["IR@10"]
    assert r["TR@240"] == 1.0 and r["IR@240"] == 1.0


def test_recall_at_k_directions(trained, splits):
    r = recall_table(trained, splits[1])
    assert recall_at_k(trained, splits[1], 5, "image->text") == r["TR@5"]
    assert recall_at_k(trained, splits[1], 5, "text->image") == r["IR@5"]
    with pytest.raises(ValueError):
        recall_at_k(trained, splits[1], 1, "sideways")


def test_empty_test_set(trained):
    with pytest.raises(ContractError):
        recall_table(trained, PairedDataset([]))


def test_trained_model_retrieves(trained, splits):
    assert recall_table(trained, splits[1])["TR@1"] > 0.5


# robust evaluation


@pytest.mark.parametrize("attack", ATTACKS)
def test_zero_budget_equals_clean(trained, splits, attack):
    assert robust_eval(trained, splits[1], attack, ZERO_BUDGET) == recall_table(trained, splits[1])


def test_attacks_do_not_raise_recall(trained, splits):
    clean = recall_table(trained, splits[1])
    b = PerturbationBudget(eps=8 / 255, steps=10, step_size=4 / 255)
    for attack in ATTACKS[1:]:
        r = robust_eval(trained, splits[1], attack, b, seed=1)
        assert r["TR@1"] <= clean["TR@1"] and r["IR@1"] <= clean["IR@1"]


def test_robust_eval_rejects_unknown_attack(trained, splits):
    with pytest.raises(ValueError):
        robust_eval(trained, splits[1], "bert-attack")


# alignment and diversity


def test_alignment_positive_and_mean_invariant(trained, splits):
    images, captions = splits[1].first_pairs()
    a = alignment_score(trained, images, captions)
    assert a > 0
    assert alignment_score(trained, np.vstack([images, images]), captions + captions) == pytest.approx(a, abs=1e-15)


def test_alignment_needs_reference(splits):
    images, captions = splits[1].first_pairs()
    with pytest.raises(MissingReferenceError):
        alignment_score(None, images, captions)


def test_diversity_identity_is_zero():
    x = np.random.default_rng(0).normal(size=(40, 16))
    assert diversity_kl(x, x) == 0.0
    assert diversity_kl(x, x, "gaussian-fit") == 0.0


def test_diversity_length_mismatch():
    with pytest.raises(ContractError):
        diversity_kl(np.zeros((3, 4)), np.zeros((2, 4)))


def test_gaussian_kl_matches_full_covariance_formula():
    rng = np.random.default_rng(1)
    for _ in range(10):
        mu1, mu2 = rng.normal(size=6), rng.normal(size=6)
        v1, v2 = rng.uniform(0.1, 3, 6), rng.uniform(0.1, 3, 6)
        expected = kl_full_cov(mu1, np.diag(v1), mu2, np.diag(v2))
        assert abs(gaussian_kl_diag(mu1, v1, mu2, v2) - expected) < 1e-8


def test_gaussian_fit_estimator_on_known_samples():
    # +-sd around the mean gives an exact population mean and variance
    mu1, sd1 = np.array([0.0, 1.0, -2.0]), np.array([1.0, 0.5, 2.0])
    mu2, sd2 = np.array([0.5, 1.0, -1.0]), np.array([1.5, 0.5, 1.0])
    signs = np.array([[1, 1, 1], [-1, -1, -1]] * 10, dtype=float)
    a, b = mu1 + signs * sd1, mu2 + signs * sd2
    reg = 1e-6
    expected = kl_full_cov(mu1, np.diag(sd1**2 + reg), mu2, np.diag(sd2**2 + reg))
    assert abs(diversity_kl(a, b, "gaussian-fit") - expected) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_diversity_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
    assert diversity_kl(a, b) >= 0 and diversity_kl(a, b, "gaussian-fit") >= 0


def test_i2t_more_diverse_than_light_eda(trained, splits):
    i2t = augmentation_quality(trained, build_augmented_dataset(splits[0], [AugmenterSpec("i2t-oracle")]))
    eda = augmentation_quality(trained, build_augmented_dataset(splits[0], [AugmenterSpec("eda", alpha=0.05)]))
    assert i2t["diversity"] > eda["diversity"]


# psd_sqrt and Frechet


def test_psd_sqrt_examples():
    np.testing.assert_allclose(psd_sqrt(np.eye(4)), np.eye(4), atol=1e-15)
    np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_psd_sqrt_reconstruction():
    rng = np.random.default_rng(2)
    for _ in range(5):
        m = rng.normal(size=(32, 32))
        A = m @ m.T
        S = psd_sqrt(A)
        assert np.linalg.norm(S @ S - A) / np.linalg.norm(A) < 1e-8


def test_psd_sqrt_rejects_asymmetric_and_clamps_tiny_negatives():
    with pytest.raises(ContractError):
        psd_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))
    S = psd_sqrt(np.diag([1.0, -1e-13]))
    assert S[1, 1] == 0.0
    with pytest.raises(NumericError):
        psd_sqrt(np.diag([1.0, -1.0]))


def test_frechet_identical_is_zero():
    x = np.random.default_rng(3).normal(size=(100, 8))
    assert frechet_distance(*fit_gaussian(x), *fit_gaussian(x)) <= 1e-8


def test_frechet_mean_shift_equal_covariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 8))
    delta = rng.normal(size=8)
    d = frechet_distance(*fit_gaussian(x), *fit_gaussian(x + delta))
    assert abs(d - delta @ delta) < 1e-6


def test_frechet_symmetric():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(100, 6)), 2 * rng.normal(size=(100, 6)) + 1
    ga, gb = fit_gaussian(a), fit_gaussian(b)
    assert frechet_distance(*ga, *gb) == pytest.approx(frechet_distance(*gb, *ga), abs=1e-9)


def test_frechet_gaussian_closed_form_for_scaled_covariance():
    # for S2 = c^2 S1 the trace term is (1 - c)^2 Tr(S1)
    s1 = np.diag([1.0, 2.0, 3.0])
    d = frechet_distance(np.zeros(3), s1, np.zeros(3), 4 * s1, reg=0.0)
    assert abs(d - 6.0) < 1e-10


def test_fit_gaussian_needs_enough_samples():
    with pytest.raises(ContractError):
        fit_gaussian(np.zeros((4, 8)))


def test_frechet_gap_identical_datasets(trained, splits):
    pairs = splits[0].first_pairs()
    assert frechet_gap(trained, pairs, pairs) <= 1e-8


# galleries


def test_galleries_split_into_blocks(splits):
    test = splits[1]
    blocks = galleries(test, 16)
    assert [len(b) for b in blocks] == [16, 16, 16]
    assert [g for b in blocks for g in b.groups] == list(test.groups)
    assert galleries(test) == [test]


def test_galleries_must_divide(splits):
    with pytest.raises(ContractError):
        galleries(splits[1], 20)


def test_gallery_recall_is_mean_of_blocks(trained, splits):
    test = splits[1]
    blocks = [recall_table(trained, b) for b in galleries(test, 16)]
    avg = recall_table(trained, test, gallery_size=16)
    for k in avg:
        assert avg[k] == pytest.approx(np.mean([b[k] for b in blocks]), abs=1e-12)
    # smaller galleries are easier to rank
    assert avg["TR@1"] >= recall_table(trained, test)["TR@1"]


def test_robust_eval_galleries_match_attacked_blocks(trained, splits):
    from mmrobust.metrics import attack_dataset

    test = splits[1]
    budget = PerturbationBudget(eps=8 / 255, step_size=4 / 255, steps=3)
    attacked = attack_dataset(trained, test, "coattack", budget, 2)
    expected = recall_table(trained, attacked, gallery_size=16)
    assert robust_eval(trained, test, "coattack", budget, seed=2, gallery_size=16) == expected


# reports


def test_report_round_trip(tmp_path):
    rec = {f"{d}@{k}": 0.5 for d in ("TR", "IR") for k in (1, 5, 10)}
    rep = MetricsReport(
        recalls={"clean": rec, "sga-analog": {**rec, "TR@1": 0.125}},
        alignment=0.7,
        diversity=0.2,
        frechet_gap=0.01,
        config_hash="abc",
        seed=3,
        meta={"name": "x"},
    )
    rep.save(tmp_path / "m.jsonl", tmp_path / "m.csv")
    back = MetricsReport.load(tmp_path / "m.jsonl")
    assert back.to_dict() == rep.to_dict()
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3
