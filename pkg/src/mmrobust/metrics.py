"""Retrieval recall, robust evaluation and augmentation-quality measures."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import (
    PerturbationBudget,
    compose_multimodal,
    embedding_synonyms,
    eval_attack_sga,
    pgd_image_attack,
    text_attack,
)
from .model import ModelParams, embed_images, embed_texts
from .world import ORIGINAL, ContractError, PairedDataset, SampleGroup

ATTACKS = ("clean", "pgd-only", "text-only", "coattack", "sga-analog")
DIRECTIONS = ("image->text", "text->image")
KS = (1, 5, 10)
COV_REG = 1e-6
RECALL_KEYS = tuple(f"{d}@{k}" for d in ("TR", "IR") for k in KS)
# frozen column order of metrics.csv
REPORT_COLUMNS = (
    "run",
    "regime",
    "attack",
    *RECALL_KEYS,
    "alignment",
    "diversity",
    "frechet_gap",
    "diversity_estimator",
    "seed",
    "config_hash",
    "reference_hash",
)


class NumericError(ArithmeticError):
    pass


class MissingReferenceError(ValueError):
    pass


# --------------------------------------------------------------------------
# retrieval


def _gallery(dataset: PairedDataset):
    images, img_owner, captions, cap_owner = [], [], [], []
    for gi, g in enumerate(dataset.groups):
        for im in g.images:
            images.append(im)
            img_owner.append(gi)
        for c in g.captions:
            captions.append(c)
            cap_owner.append(gi)
    return np.stack(images), np.array(img_owner), captions, np.array(cap_owner)


def recall_from_similarity(sim: np.ndarray, query_owner, cand_owner, ks=KS) -> dict[int, float]:
    """Fraction of queries with a same-group candidate among the top k.

    Candidates are ranked by decreasing similarity; ties keep candidate order.
    """
    query_owner = np.asarray(query_owner)
    cand_owner = np.asarray(cand_owner)
    order = np.argsort(-sim, axis=1, kind="stable")
    hits = cand_owner[order] == query_owner[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), sim.shape[1])
    return {k: float(np.mean(first < k)) for k in ks}


def galleries(dataset: PairedDataset, size: int | None = None) -> list[PairedDataset]:
    """Consecutive blocks of ``size`` groups (the whole set when ``size`` is None)."""
    if size is None or size >= len(dataset):
        return [dataset]
    if size < 1 or len(dataset) % size:
        raise ContractError(f"{len(dataset)} test groups do not split into galleries of {size}")
    return [
        PairedDataset(dataset.groups[i : i + size], dataset.policy, dataset.split, dataset.world)
        for i in range(0, len(dataset), size)
    ]


def _recall_single(params: ModelParams, dataset: PairedDataset, ks) -> dict[str, float]:
    images, io, captions, co = _gallery(dataset)
    ei = embed_images(params, images)
    et = embed_texts(params, captions)
    sim = ei @ et.T
    tr = recall_from_similarity(sim, io, co, ks)
    ir = recall_from_similarity(sim.T, co, io, ks)
    out = {f"TR@{k}": tr[k] for k in ks}
    out.update({f"IR@{k}": ir[k] for k in ks})
    return out


def recall_table(
    params: ModelParams, dataset: PairedDataset, ks=KS, gallery_size: int | None = None
) -> dict[str, float]:
    """TR@k (image query, caption gallery) and IR@k (caption query, image gallery).

    With ``gallery_size`` the test set is ranked in independent galleries of
    that many groups and the recalls are averaged over galleries.
    """
    if len(dataset) == 0:
        raise ContractError("recall needs a non-empty test set")
    tables = [_recall_single(params, g, ks) for g in galleries(dataset, gallery_size)]
    if len(tables) == 1:
        return tables[0]
    return {k: float(np.mean([t[k] for t in tables])) for k in tables[0]}


def recall_at_k(params: ModelParams, dataset: PairedDataset, k: int, direction: str = "image->text") -> float:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if len(dataset) == 0:
        raise ContractError("recall needs a non-empty test set")
    table = recall_table(params, dataset, (k,))
    return table[f"TR@{k}" if direction == "image->text" else f"IR@{k}"]


# --------------------------------------------------------------------------
# robust evaluation


EVAL_BUDGET = PerturbationBudget(steps=10)


def attack_dataset(
    params: ModelParams,
    dataset: PairedDataset,
    attack: str,
    budget: PerturbationBudget = EVAL_BUDGET,
    seed: int = 0,
    sga_views: int = 2,
    sga_scales: Sequence[float] = (0.75, 1.0, 1.25),
) -> PairedDataset:
    """Replace every group's image and captions by their adversarial versions.

    pgd-only: image vs the group's first caption. text-only: each caption vs
    the clean image. coattack: image first, then each caption vs the
    adversarial image. sga-analog: set-level image attack then captions.
    """
    if attack not in ATTACKS:
        raise ValueError(f"attack must be one of {ATTACKS}")
    rng = np.random.default_rng([seed, ATTACKS.index(attack)])
    groups = dataset.groups
    images = np.stack([g.images[0] for g in groups])
    captions = [list(g.captions) for g in groups]
    tag = f"adversarial:{attack}"

    if attack in ("pgd-only", "coattack") and budget.attacks_image:
        first = embed_texts(params, [g.captions[0] for g in groups])
        images = pgd_image_attack(params, images, first, budget, rng).adversarial
    if attack in ("text-only", "coattack") and budget.attacks_text:
        target = embed_images(params, images)
        flat = [c for g in groups for c in g.captions]
        owner = [i for i, g in enumerate(groups) for _ in g.captions]
        adv = text_attack(params, flat, target[owner], budget, rng)
        captions = [[] for _ in groups]
        for i, c in zip(owner, adv):
            captions[i].append(c)
    if attack == "sga-analog" and (budget.attacks_image or budget.attacks_text):
        images, captions = eval_attack_sga(
            params, groups, budget, sga_views, sga_scales, rng, max_len=dataset.world.max_len
        )

    out = []
    for i, g in enumerate(groups):
        img_changed = not np.array_equal(images[i], g.images[0])
        cap_tags = [
            tag if tuple(c) != tuple(o) else t for c, o, t in zip(captions[i], g.captions, g.caption_tags)
        ]
        out.append(
            SampleGroup(
                g.group_id,
                g.concept,
                [images[i]] + [im for im in g.images[1:]],
                [tuple(c) for c in captions[i]],
                [tag if img_changed else g.image_tags[0]] + g.image_tags[1:],
                cap_tags,
            )
        )
    return PairedDataset(out, dataset.policy, dataset.split, dataset.world)


def robust_eval(
    params: ModelParams,
    dataset: PairedDataset,
    attack: str,
    budget: PerturbationBudget = EVAL_BUDGET,
    seed: int = 0,
    gallery_size: int | None = None,
    **kwargs,
) -> dict[str, float]:
    """Recall on the attacked test set: every query and every gallery item is
    replaced by its adversarial version."""
    if attack == "clean":
        return recall_table(params, dataset, gallery_size=gallery_size)
    attacked = attack_dataset(params, dataset, attack, budget, seed, **kwargs)
    return recall_table(params, attacked, gallery_size=gallery_size)


# --------------------------------------------------------------------------
# augmentation quality


def _require(reference):
    if reference is None:
        raise MissingReferenceError("augmentation metrics need a frozen reference model")


def alignment_score(reference: ModelParams | None, images, captions) -> float:
    """Mean cosine similarity of (image, caption) pairs under ``reference``."""
    _require(reference)
    if len(captions) == 0:
        raise ContractError("alignment needs at least one pair")
    ei = embed_images(reference, np.asarray(images))
    et = embed_texts(reference, captions)
    return float(np.mean(np.einsum("ij,ij->i", ei, et)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def gaussian_kl_diag(mu1, var1, mu2, var2) -> float:
    """KL(N(mu1, diag var1) || N(mu2, diag var2))."""
    mu1, var1, mu2, var2 = map(np.asarray, (mu1, var1, mu2, var2))
    return float(0.5 * np.sum(np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0))


def diversity_kl(
    originals: np.ndarray,
    augments: np.ndarray,
    estimator: str = "per-pair-categorical",
    temperature: float = 0.1,
) -> float:
    """KL divergence between original and augmented embeddings.

    per-pair-categorical: mean over pairs of KL(softmax(o/T) || softmax(a/T)).
    gaussian-fit: KL between diagonal Gaussians fitted to the two sets.
    """
    originals = np.asarray(originals, dtype=np.float64)
    augments = np.asarray(augments, dtype=np.float64)
    if originals.shape != augments.shape:
        raise ContractError(f"{originals.shape[0]} originals but {augments.shape[0]} augments")
    if estimator == "per-pair-categorical":
        p = _softmax(originals / temperature)
        q = _softmax(augments / temperature)
        kl = np.sum(p * (np.log(p) - np.log(q)), axis=1)
        return float(max(np.mean(kl), 0.0))
    if estimator == "gaussian-fit":
        var1 = originals.var(axis=0) + COV_REG
        var2 = augments.var(axis=0) + COV_REG
        return max(gaussian_kl_diag(originals.mean(0), var1, augments.mean(0), var2), 0.0)
    raise ValueError(f"unknown estimator {estimator!r}")


def psd_sqrt(matrix, sym_tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"psd_sqrt needs a square matrix, got {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > sym_tol * scale:
        raise ContractError("psd_sqrt needs a symmetric matrix")
    w, V = np.linalg.eigh((A + A.T) / 2.0)
    if w.min(initial=0.0) < -sym_tol * scale:
        raise NumericError(f"matrix is not PSD (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(mu1, cov1, mu2, cov2, reg: float = COV_REG) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2), with ``reg`` added to both."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    d = mu1.size
    s1 = np.asarray(cov1, dtype=np.float64) + reg * np.eye(d)
    s2 = np.asarray(cov2, dtype=np.float64) + reg * np.eye(d)
    try:
        r2 = psd_sqrt(s2)
        cross = psd_sqrt(r2 @ s1 @ r2)
    except NumericError as exc:
        cond = np.linalg.cond(s1), np.linalg.cond(s2)
        raise NumericError(f"{exc}; condition numbers {cond[0]:.3g}, {cond[1]:.3g}") from None
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross), 0.0))


def fit_gaussian(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < x.shape[1] + 1:
        raise ContractError(f"need at least {x.shape[1] + 1} samples for a full covariance, got {x.shape[0]}")
    return x.mean(axis=0), np.cov(x, rowvar=False)


def pair_embeddings(reference: ModelParams, images, captions) -> np.ndarray:
    """(image embedding || caption embedding) for each pair."""
    return np.hstack([embed_images(reference, np.asarray(images)), embed_texts(reference, captions)])


def frechet_gap(reference: ModelParams | None, original_pairs, augmented_pairs) -> float:
    """Fréchet distance between Gaussian fits of the two sets of joint pair embeddings.

    Each argument is an ``(images, captions)`` tuple.
    """
    _require(reference)
    a = pair_embeddings(reference, *original_pairs)
    b = pair_embeddings(reference, *augmented_pairs)
    return frechet_distance(*fit_gaussian(a), *fit_gaussian(b))


def original_pairs(dataset: PairedDataset):
    return dataset.first_pairs()


def augmented_pairs(dataset: PairedDataset):
    """The augmented side of every group: (I_aug, T) and (I, T_aug) pairs.

    Returns ``(images, captions, kind, original_index)``; ``kind`` is "image"
    or "text" and tells which element is augmented.
    """
    images, captions, kinds, owners = [], [], [], []
    for gi, g in enumerate(dataset.groups):
        for im, tag in zip(g.images, g.image_tags):
            if tag != ORIGINAL:
                images.append(im)
                captions.append(g.captions[0])
                kinds.append("image")
                owners.append(gi)
        for c, tag in zip(g.captions, g.caption_tags):
            if tag != ORIGINAL:
                images.append(g.images[0])
                captions.append(c)
                kinds.append("text")
                owners.append(gi)
    return images, captions, kinds, owners


def augmentation_quality(
    reference: ModelParams | None,
    dataset: PairedDataset,
    estimator: str = "per-pair-categorical",
) -> dict[str, float]:
    """Alignment, diversity and Fréchet gap of a dataset's augmented elements."""
    _require(reference)
    images, captions, kinds, owners = augmented_pairs(dataset)
    if not captions:
        return {"alignment": float("nan"), "diversity": 0.0, "frechet_gap": 0.0, "n_augmented": 0}
    orig_img, orig_cap = dataset.first_pairs()
    align = alignment_score(reference, np.stack(images), captions)

    kinds = np.array(kinds)
    owners = np.array(owners)
    o_parts, a_parts = [], []
    if np.any(kinds == "image"):
        sel = np.flatnonzero(kinds == "image")
        o_parts.append(embed_images(reference, orig_img[owners[sel]]))
        a_parts.append(embed_images(reference, np.stack([images[i] for i in sel])))
    if np.any(kinds == "text"):
        sel = np.flatnonzero(kinds == "text")
        o_parts.append(embed_texts(reference, [orig_cap[i] for i in owners[sel]]))
        a_parts.append(embed_texts(reference, [captions[i] for i in sel]))
    div = diversity_kl(np.vstack(o_parts), np.vstack(a_parts), estimator)
    gap = frechet_gap(reference, (orig_img, orig_cap), (np.stack(images), captions))
    return {"alignment": align, "diversity": div, "frechet_gap": gap, "n_augmented": len(captions)}


@dataclass
class MetricsReport:
    """One model's evaluation: clean and robust recalls plus augmentation quality."""

    recalls: dict[str, dict[str, float]] = field(default_factory=dict)
    alignment: float | None = None
    diversity: float | None = None
    frechet_gap: float | None = None
    diversity_estimator: str = "per-pair-categorical"
    config_hash: str = ""
    reference_hash: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for attack, table in self.recalls.items():
            out.append({"attack": attack, **table})
        return out

    def robust(self, attack: str = "sga-analog", metric: str = "TR@1") -> float:
        return self.recalls[attack][metric]

    def to_dict(self) -> dict:
        return {
            "recalls": {a: dict(t) for a, t in self.recalls.items()},
            "alignment": self.alignment,
            "diversity": self.diversity,
            "frechet_gap": self.frechet_gap,
            "diversity_estimator": self.diversity_estimator,
            "config_hash": self.config_hash,
            "reference_hash": self.reference_hash,
            "seed": self.seed,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})

    def jsonl_lines(self) -> list[str]:
        """A header record followed by one record per attack."""
        head = {k: v for k, v in self.to_dict().items() if k != "recalls"}
        lines = [json.dumps({"kind": "report", **head}, sort_keys=True)]
        for row in self.rows():
            lines.append(json.dumps({"kind": "recall", **row}, sort_keys=True))
        return lines

    def csv_rows(self) -> list[dict]:
        """Rows keyed by ``REPORT_COLUMNS``; one per attack."""
        out = []
        for attack, table in self.recalls.items():
            row = {c: "" for c in REPORT_COLUMNS}
            row.update(
                run=self.meta.get("name", ""),
                regime=self.meta.get("regime", ""),
                attack=attack,
                alignment=_fmt(self.alignment),
                diversity=_fmt(self.diversity),
                frechet_gap=_fmt(self.frechet_gap),
                diversity_estimator=self.diversity_estimator,
                seed=self.seed,
                config_hash=self.config_hash,
                reference_hash=self.reference_hash,
            )
            for key in RECALL_KEYS:
                row[key] = _fmt(table.get(key))
            out.append(row)
        return out

    def save(self, jsonl_path, csv_path=None) -> None:
        Path(jsonl_path).write_text("\n".join(self.jsonl_lines()) + "\n")
        if csv_path is not None:
            write_csv(csv_path, REPORT_COLUMNS, self.csv_rows())

    @classmethod
    def load(cls, path) -> "MetricsReport":
        lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
        if not lines or lines[0].get("kind") != "report":
            raise ValueError(f"{path}: not a metrics report")
        head = {k: v for k, v in lines[0].items() if k != "kind"}
        recalls = {}
        for rec in lines[1:]:
            rec = {k: v for k, v in rec.items() if k != "kind"}
            recalls[rec.pop("attack")] = rec
        return cls(recalls=recalls, **head)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{float(x):.6f}"


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    """CSV with a fixed column order and ``\\n`` line endings."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="raise")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    Path(path).write_text(buf.getvalue())
