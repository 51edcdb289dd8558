"""One-to-many augmenters and dataset assembly.

Intra-modal augmenters (eda, randaug-analog) never look at the concept.
Cross-modal oracles render new elements from the ground-truth concept, with
knobs for diversity (masks, blend strength) and distribution shift.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .attacks import eda_edit, static_synonyms
from .world import (
    ORIGINAL,
    ContractError,
    PairedDataset,
    SampleGroup,
    WorldConfig,
    caption_mask,
    generate_groups,
    random_mask,
    render_caption,
    render_image,
)

TECHNIQUES = (
    "randaug-analog",
    "eda",
    "i2t-oracle",
    "i2t-divcaps-oracle",
    "t2i-oracle",
    "ti2i-oracle",
    "misaligned-control",
)
TEXT_TECHNIQUES = ("eda", "i2t-oracle", "i2t-divcaps-oracle", "misaligned-control")
IMAGE_TECHNIQUES = ("randaug-analog", "t2i-oracle", "ti2i-oracle")
ASSEMBLIES = ("one-to-many", "many-to-one", "many-to-many", "naive-flat-1:1", "oracle-extra-originals")
DIVCAPS_ARCHETYPES = ("full", "main", "background", "style")


class AugmentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugmenterSpec:
    """One augmenter and its knobs.

    alpha: EDA per-token edit rate. magnitude: randaug-analog strength in
    [0, 1]. strength: ti2i blend weight in [0, 1]. shift: mean offset of the
    nuisance noise for t2i/ti2i renders. mask_p: per-slot mention probability
    for i2t-oracle (None uses the world's).
    """

    technique: str = "i2t-oracle"
    count: int | None = None
    alpha: float = 0.3
    magnitude: float = 0.5
    strength: float = 0.5
    shift: float = 0.0
    mask_p: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise AugmentConfigError(f"unknown augmenter {self.technique!r}; expected one of {TECHNIQUES}")
        if self.count is None:
            object.__setattr__(self, "count", 2 if self.technique == "ti2i-oracle" else 4)
        if self.count < 0:
            raise AugmentConfigError("count must be >= 0")
        for name in ("alpha", "magnitude", "strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentConfigError(f"{name} must lie in [0, 1], got {v}")
        if not -0.5 <= self.shift <= 0.5:
            raise AugmentConfigError(f"shift must lie in [-0.5, 0.5], got {self.shift}")
        if self.mask_p is not None and not 0.0 < self.mask_p <= 1.0:
            raise AugmentConfigError("mask_p must lie in (0, 1]")

    @property
    def modality(self) -> str:
        return "text" if self.technique in TEXT_TECHNIQUES else "image"

    def to_dict(self) -> dict:
        return asdict(self)

    def rng(self, group_id: int) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFF, TECHNIQUES.index(self.technique), group_id])


# --------------------------------------------------------------------------
# text


def augment_text_intra(
    caption: Sequence[int],
    spec: AugmenterSpec,
    world: WorldConfig,
    rng: np.random.Generator | None = None,
    synonyms=None,
) -> list[tuple[int, ...]]:
    """``spec.count`` independent EDA edits of ``caption``."""
    if spec.technique != "eda":
        raise AugmentConfigError("augment_text_intra needs technique 'eda'")
    rng = rng if rng is not None else spec.rng(0)
    synonyms = synonyms if synonyms is not None else static_synonyms(world)
    return [eda_edit(caption, spec.alpha, rng, synonyms, world.max_len)[0] for _ in range(spec.count)]


def divcaps_mask(world: WorldConfig, archetype: str, rng: np.random.Generator) -> tuple[tuple[bool, ...], int | None]:
    """Mask and filler count for one divcaps archetype."""
    n = world.n_slots
    if archetype == "full":
        return (True,) * n, 0
    if archetype == "main":
        return tuple(s < min(2, n) for s in range(n)), None
    if archetype == "background":
        return tuple(s == n - 1 for s in range(n)), None
    if archetype == "style":
        slot = int(rng.integers(n))
        return tuple(s == slot for s in range(n)), min(world.max_fillers, world.max_len - 1)
    raise AugmentConfigError(f"unknown archetype {archetype!r}")


def augment_text_i2t_oracle(
    group: SampleGroup,
    spec: AugmenterSpec,
    world: WorldConfig,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, ...]]:
    """Fresh captions of the group's concept with new masks and fillers."""
    if spec.technique not in ("i2t-oracle", "i2t-divcaps-oracle"):
        raise AugmentConfigError("augment_text_i2t_oracle needs an i2t technique")
    rng = rng if rng is not None else spec.rng(group.group_id)
    out = []
    for k in range(spec.count):
        filler_seed = int(rng.integers(2**31 - 1))
        if spec.technique == "i2t-oracle":
            mask = random_mask(world, rng, spec.mask_p)
            out.append(render_caption(world, group.concept, mask, filler_seed))
        else:
            mask, n_fill = divcaps_mask(world, DIVCAPS_ARCHETYPES[k % len(DIVCAPS_ARCHETYPES)], rng)
            out.append(render_caption(world, group.concept, mask, filler_seed, n_fill))
    return out


def make_misaligned_control(
    dataset: PairedDataset,
    index: int,
    spec: AugmenterSpec,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, ...]]:
    """Captions describing other groups' concepts, attached to group ``index``.

    Each caption mentions at least one slot on which the two concepts differ,
    so it is inconsistent with the group by construction.
    """
    if len(dataset) < 2:
        raise ContractError("misaligned control needs at least two groups")
    world = dataset.world
    group = dataset.groups[index]
    rng = rng if rng is not None else spec.rng(group.group_id)
    others = [j for j, g in enumerate(dataset.groups) if tuple(g.concept) != tuple(group.concept)]
    if not others:
        raise ContractError("misaligned control needs at least two distinct concepts")
    out = []
    for _ in range(spec.count):
        other = dataset.groups[others[int(rng.integers(len(others)))]]
        diff = [s for s in range(world.n_slots) if other.concept[s] != group.concept[s]]
        mask = list(random_mask(world, rng))
        mask[diff[int(rng.integers(len(diff)))]] = True
        out.append(render_caption(world, other.concept, mask, int(rng.integers(2**31 - 1))))
    return out


# --------------------------------------------------------------------------
# images


def augment_image_intra(
    image: np.ndarray,
    spec: AugmenterSpec,
    world: WorldConfig,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Concept-blind vector transforms: swap jitter, gain/bias and noise."""
    if spec.technique != "randaug-analog":
        raise AugmentConfigError("augment_image_intra needs technique 'randaug-analog'")
    rng = rng if rng is not None else spec.rng(0)
    m = spec.magnitude
    image = np.asarray(image, dtype=np.float64)
    out = []
    for _ in range(spec.count):
        x = image.copy()
        if m == 0:
            out.append(x)
            continue
        # permutation jitter: swap a few coordinates with their right neighbour;
        # rare at moderate magnitude since a swap can move an attribute peak
        n_swaps = rng.poisson(0.5 * m * m)
        for p in rng.integers(0, x.size - 1, size=n_swaps):
            x[p], x[p + 1] = x[p + 1], x[p]
        gain = 1.0 + m * rng.uniform(-0.4, 0.4)
        bias = m * rng.uniform(-0.15, 0.15)
        x = gain * x + bias + rng.normal(0.0, 0.1 * m, size=x.size)
        out.append(np.clip(x, 0.0, 1.0))
    return out


def augment_image_t2i_oracle(
    group: SampleGroup,
    spec: AugmenterSpec,
    world: WorldConfig,
    rng: np.random.Generator | None = None,
    caption: Sequence[int] | None = None,
) -> list[np.ndarray]:
    """Renders guided by a caption (t2i) or blends toward a fresh render (ti2i).

    t2i keeps the slots ``caption`` mentions (default: the group's first
    caption) and redraws the others uniformly. ti2i blends the group's first
    image toward a fresh render of its concept with weight ``strength``.
    """
    if spec.technique not in ("t2i-oracle", "ti2i-oracle"):
        raise AugmentConfigError("augment_image_t2i_oracle needs t2i-oracle or ti2i-oracle")
    rng = rng if rng is not None else spec.rng(group.group_id)
    out = []
    if spec.technique == "t2i-oracle":
        mask = caption_mask(world, caption if caption is not None else group.captions[0])
        for _ in range(spec.count):
            drawn = rng.integers(0, world.n_values, size=world.n_slots)
            concept = tuple(int(group.concept[s]) if mask[s] else int(drawn[s]) for s in range(world.n_slots))
            out.append(render_image(world, concept, int(rng.integers(2**31 - 1)), shift=spec.shift))
    else:
        base = np.asarray(group.images[0], dtype=np.float64)
        s = spec.strength
        for _ in range(spec.count):
            fresh = render_image(world, group.concept, int(rng.integers(2**31 - 1)), shift=spec.shift)
            out.append(np.clip((1.0 - s) * base + s * fresh, 0.0, 1.0))
    return out


# --------------------------------------------------------------------------
# assembly


def _augments_for(dataset: PairedDataset, index: int, spec: AugmenterSpec, synonyms):
    g = dataset.groups[index]
    rng = spec.rng(g.group_id)
    world = dataset.world
    if spec.technique == "eda":
        return augment_text_intra(g.captions[0], spec, world, rng, synonyms)
    if spec.technique in ("i2t-oracle", "i2t-divcaps-oracle"):
        return augment_text_i2t_oracle(g, spec, world, rng)
    if spec.technique == "misaligned-control":
        return make_misaligned_control(dataset, index, spec, rng)
    if spec.technique == "randaug-analog":
        return augment_image_intra(g.images[0], spec, world, rng)
    return augment_image_t2i_oracle(g, spec, world, rng)


def base_pairs(base: PairedDataset) -> PairedDataset:
    """Each group reduced to its first image and first caption."""
    groups = [
        SampleGroup(g.group_id, tuple(g.concept), [g.images[0].copy()], [tuple(g.captions[0])])
        for g in base.groups
    ]
    return PairedDataset(groups, "first-only-1:1", base.split, base.world)


def build_augmented_dataset(
    base: PairedDataset,
    specs: Sequence[AugmenterSpec],
    assembly: str = "one-to-many",
    seed: int = 0,
) -> PairedDataset:
    """Attach augmented elements to the (first image, first caption) of each group.

    one-to-many / many-to-one / many-to-many keep one group per original and
    set the matching pairing policy. naive-flat-1:1 pairs the k-th augmented
    image with the k-th augmented caption (the original stands in when one
    side runs out) and makes each such pair its own 1:1 group.
    oracle-extra-originals instead adds as many freshly drawn ground-truth
    1:1 groups as naive-flat-1:1 would add. Elements are tagged with the
    technique that produced them; ``base`` is never modified.
    """
    if assembly not in ASSEMBLIES:
        raise AugmentConfigError(f"unknown assembly {assembly!r}; expected one of {ASSEMBLIES}")
    reduced = base_pairs(base)
    world = base.world
    synonyms = static_synonyms(world) if any(s.technique == "eda" for s in specs) else None

    per_group = []
    for i in range(len(reduced)):
        imgs, caps = [], []
        for spec in specs:
            tag = spec.technique
            elems = _augments_for(base, i, spec, synonyms)
            target = caps if spec.modality == "text" else imgs
            target.extend((e, tag) for e in elems)
        per_group.append((imgs, caps))

    if assembly in ("one-to-many", "many-to-one", "many-to-many"):
        groups = []
        for g, (imgs, caps) in zip(reduced.groups, per_group):
            groups.append(
                SampleGroup(
                    g.group_id,
                    g.concept,
                    g.images + [np.asarray(e) for e, _ in imgs],
                    g.captions + [tuple(e) for e, _ in caps],
                    g.image_tags + [t for _, t in imgs],
                    g.caption_tags + [t for _, t in caps],
                )
            )
        return PairedDataset(groups, assembly, base.split, world)

    next_id = max(base.group_ids()) + 1
    groups = list(reduced.groups)
    if assembly == "naive-flat-1:1":
        for g, (imgs, caps) in zip(reduced.groups, per_group):
            for k in range(max(len(imgs), len(caps))):
                im, it = (np.asarray(imgs[k][0]), imgs[k][1]) if k < len(imgs) else (g.images[0].copy(), ORIGINAL)
                cp, ct = (tuple(caps[k][0]), caps[k][1]) if k < len(caps) else (g.captions[0], ORIGINAL)
                groups.append(SampleGroup(next_id, g.concept, [im], [cp], [it], [ct]))
                next_id += 1
        return PairedDataset(groups, "naive-flat-1:1", base.split, world)

    n_extra = sum(max(len(i), len(c)) for i, c in per_group)
    if n_extra:
        fresh = generate_groups(world, n_extra, 1, 1, seed=(0xE7 << 20) ^ (seed & 0xFFFFF), first_id=next_id)
        for g in fresh:
            g.image_tags = ["oracle-extra"]
            g.caption_tags = ["oracle-extra"]
        groups.extend(fresh)
    return PairedDataset(groups, "first-only-1:1", base.split, world)


def augmented_element_count(dataset: PairedDataset) -> int:
    """Number of elements whose provenance tag is not ``original``."""
    return sum(
        sum(t != ORIGINAL for t in g.image_tags) + sum(t != ORIGINAL for t in g.caption_tags)
        for g in dataset.groups
    )
