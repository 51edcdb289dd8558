"""Concept-grounded synthetic image/caption world.

A concept is a tuple of attribute values (colour, shape, size, background by
default). Images are attribute one-hot blocks lifted into ``[low, high]`` plus
Gaussian nuisance and a few free nuisance coordinates; captions are the tokens
of a subset of the attributes (the aspect mask) mixed with filler tokens. One
concept therefore has many valid images and many valid captions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SLOT_VALUES = {
    "color": ["red", "green", "blue", "yellow", "purple", "orange"],
    "shape": ["circle", "square", "triangle", "star", "hexagon", "cross"],
    "size": ["tiny", "small", "medium", "large", "huge", "giant"],
    "background": ["grass", "sky", "sand", "snow", "water", "wall"],
}
FILLER_WORDS = [
    "a", "the", "an", "photo", "of", "with", "on", "in", "picture", "image",
    "showing", "there", "is", "one", "some", "nice", "pretty", "scene", "view", "shot",
    "object", "thing", "item", "near", "and", "very", "quite", "seen", "here", "this",
    "that", "it", "looks", "like", "cute", "simple", "plain", "clear", "bright", "soft",
]


class ContractError(ValueError):
    """A generator or dataset precondition was violated."""


class DatasetParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class WorldConfig:
    n_slots: int = 4
    n_values: int = 6
    d_image: int = 32
    n_fillers: int = 40
    max_len: int = 12
    low: float = 0.2
    high: float = 0.8
    noise: float = 0.05
    # probability that an original caption mentions a given slot
    mention_prob: float = 0.6
    max_fillers: int = 4

    @property
    def n_attr_tokens(self) -> int:
        return self.n_slots * self.n_values

    @property
    def vocab_size(self) -> int:
        return self.n_attr_tokens + self.n_fillers

    @property
    def n_free(self) -> int:
        return self.d_image - self.n_attr_tokens

    @property
    def neutral_token(self) -> int:
        """Filler used to mask a position when ranking token importance."""
        return self.n_attr_tokens

    def attr_token(self, slot: int, value: int) -> int:
        return slot * self.n_values + value

    def token_slot(self, token: int) -> int | None:
        return token // self.n_values if token < self.n_attr_tokens else None

    def is_filler(self, token: int) -> bool:
        return token >= self.n_attr_tokens

    def filler_ids(self) -> np.ndarray:
        return np.arange(self.n_attr_tokens, self.vocab_size)

    def validate(self) -> None:
        if self.n_free < 0:
            raise ContractError("d_image must be at least n_slots * n_values")
        if not 0.0 <= self.low < self.high <= 1.0:
            raise ContractError("attribute band must satisfy 0 <= low < high <= 1")
        if self.n_slots > self.max_len:
            raise ContractError("max_len must fit a full caption")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def vocabulary(config: WorldConfig) -> list[str]:
    slots = list(SLOT_VALUES)
    words = []
    for s in range(config.n_slots):
        name = slots[s] if s < len(slots) else f"slot{s}"
        vals = SLOT_VALUES.get(name, [])
        for v in range(config.n_values):
            words.append(f"{name}:{vals[v] if v < len(vals) else v}")
    for f in range(config.n_fillers):
        words.append(FILLER_WORDS[f] if f < len(FILLER_WORDS) else f"filler{f}")
    return words


# --------------------------------------------------------------------------
# rendering


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def concept_key(concept: Sequence[int]) -> int:
    key = 0
    for v in concept:
        key = key * 97 + int(v) + 1
    return key


def check_concept(config: WorldConfig, concept: Sequence[int]) -> tuple[int, ...]:
    c = tuple(int(v) for v in concept)
    if len(c) != config.n_slots or any(not 0 <= v < config.n_values for v in c):
        raise ContractError(f"invalid concept {c} for {config.n_slots} slots x {config.n_values} values")
    return c


def render_image(
    config: WorldConfig,
    concept: Sequence[int],
    noise_seed: int,
    shift: float = 0.0,
) -> np.ndarray:
    """Deterministic image of ``concept``; ``shift`` offsets the nuisance mean."""
    concept = check_concept(config, concept)
    rng = _rng(0x1A, concept_key(concept), noise_seed)
    x = np.full(config.d_image, config.low)
    for s, v in enumerate(concept):
        x[config.attr_token(s, v)] = config.high
    x[config.n_attr_tokens :] = rng.uniform(0.0, 1.0, size=config.n_free)
    x += rng.normal(shift, config.noise, size=config.d_image)
    return np.clip(x, 0.0, 1.0)


def decode_image(config: WorldConfig, image: np.ndarray) -> tuple[int, ...]:
    """Nearest one-hot decoding of the attribute blocks."""
    blocks = np.asarray(image)[: config.n_attr_tokens].reshape(config.n_slots, config.n_values)
    return tuple(int(i) for i in blocks.argmax(axis=1))


def random_mask(config: WorldConfig, rng: np.random.Generator, p: float | None = None) -> tuple[bool, ...]:
    p = config.mention_prob if p is None else p
    while True:
        m = rng.random(config.n_slots) < p
        if m.any():
            return tuple(bool(b) for b in m)


def render_caption(
    config: WorldConfig,
    concept: Sequence[int],
    aspect_mask: Sequence[bool],
    filler_seed: int,
    n_fillers: int | None = None,
) -> tuple[int, ...]:
    """Attribute tokens for the masked slots interleaved with filler tokens.

    ``n_fillers=None`` draws the filler count from the seed (0..max_fillers,
    limited by ``max_len``).
    """
    concept = check_concept(config, concept)
    mask = tuple(bool(b) for b in aspect_mask)
    if len(mask) != config.n_slots:
        raise ContractError(f"aspect mask needs {config.n_slots} entries")
    if not any(mask):
        raise ContractError("aspect mask selects no slot")
    rng = _rng(0x2B, concept_key(concept), filler_seed)
    attrs = [config.attr_token(s, v) for s, v in enumerate(concept) if mask[s]]
    room = config.max_len - len(attrs)
    if n_fillers is None:
        n_fillers = int(rng.integers(0, min(config.max_fillers, room) + 1))
    if not 0 <= n_fillers <= room:
        raise ContractError(f"{n_fillers} fillers do not fit next to {len(attrs)} attributes")
    fillers = rng.choice(config.filler_ids(), size=n_fillers).tolist()
    tokens = attrs + [int(f) for f in fillers]
    order = rng.permutation(len(tokens))
    return tuple(int(tokens[i]) for i in order)


def caption_consistent(config: WorldConfig, concept: Sequence[int], caption: Iterable[int]) -> bool:
    """True when every attribute token of ``caption`` matches the concept."""
    for t in caption:
        slot = config.token_slot(int(t))
        if slot is not None and config.attr_token(slot, concept[slot]) != int(t):
            return False
    return True


def caption_mask(config: WorldConfig, caption: Iterable[int]) -> tuple[bool, ...]:
    mask = [False] * config.n_slots
    for t in caption:
        slot = config.token_slot(int(t))
        if slot is not None:
            mask[slot] = True
    return tuple(mask)


# --------------------------------------------------------------------------
# datasets

POLICIES = ("first-only-1:1", "one-to-many", "many-to-one", "many-to-many", "naive-flat-1:1")
ORIGINAL = "original"


@dataclass
class SampleGroup:
    group_id: int
    concept: tuple[int, ...]
    images: list[np.ndarray]
    captions: list[tuple[int, ...]]
    image_tags: list[str] = field(default_factory=list)
    caption_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.image_tags:
            self.image_tags = [ORIGINAL] * len(self.images)
        if not self.caption_tags:
            self.caption_tags = [ORIGINAL] * len(self.captions)
        if len(self.image_tags) != len(self.images) or len(self.caption_tags) != len(self.captions):
            raise ContractError(f"group {self.group_id}: provenance tags do not match elements")

    def copy(self) -> "SampleGroup":
        return SampleGroup(
            self.group_id,
            tuple(self.concept),
            [im.copy() for im in self.images],
            [tuple(c) for c in self.captions],
            list(self.image_tags),
            list(self.caption_tags),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleGroup):
            return NotImplemented
        return (
            self.group_id == other.group_id
            and tuple(self.concept) == tuple(other.concept)
            and len(self.images) == len(other.images)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
            and [tuple(c) for c in self.captions] == [tuple(c) for c in other.captions]
            and self.image_tags == other.image_tags
            and self.caption_tags == other.caption_tags
        )


@dataclass
class PairedDataset:
    groups: list[SampleGroup]
    policy: str = "first-only-1:1"
    split: str = "train"
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ContractError(f"unknown pairing policy {self.policy!r}")

    def __len__(self) -> int:
        return len(self.groups)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairedDataset):
            return NotImplemented
        return (
            self.policy == other.policy
            and self.split == other.split
            and self.world == other.world
            and self.groups == other.groups
        )

    def copy(self) -> "PairedDataset":
        return PairedDataset([g.copy() for g in self.groups], self.policy, self.split, self.world)

    def with_policy(self, policy: str) -> "PairedDataset":
        return replace(self.copy(), policy=policy)

    def group_ids(self) -> list[int]:
        return [g.group_id for g in self.groups]

    def n_pairs(self) -> int:
        """Number of distinct (image, caption) pairs the policy exposes."""
        total = 0
        for g in self.groups:
            ni, nc = len(g.images), len(g.captions)
            if self.policy in ("first-only-1:1", "naive-flat-1:1"):
                total += 1
            elif self.policy == "one-to-many":
                total += nc + ni - 1
            elif self.policy == "many-to-one":
                total += ni
            else:
                total += ni * nc
        return total

    def element_counts(self) -> tuple[int, int]:
        return sum(len(g.images) for g in self.groups), sum(len(g.captions) for g in self.groups)

    def first_pairs(self) -> tuple[np.ndarray, list[tuple[int, ...]]]:
        return np.stack([g.images[0] for g in self.groups]), [g.captions[0] for g in self.groups]


def generate_groups(
    config: WorldConfig,
    n_groups: int,
    images_per_group: int,
    captions_per_group: int,
    seed: int,
    first_id: int = 0,
) -> list[SampleGroup]:
    if n_groups < 1:
        raise ContractError("n_groups must be >= 1")
    if images_per_group < 1 or captions_per_group < 1:
        raise ContractError("each group needs at least one image and one caption")
    config.validate()
    rng = _rng(0x3C, seed)
    concepts = rng.integers(0, config.n_values, size=(n_groups, config.n_slots))
    elem_seeds = rng.integers(0, 2**31 - 1, size=(n_groups, images_per_group + captions_per_group))
    groups = []
    for i in range(n_groups):
        concept = tuple(int(v) for v in concepts[i])
        s = elem_seeds[i]
        images = [render_image(config, concept, int(s[j])) for j in range(images_per_group)]
        captions = []
        for j in range(captions_per_group):
            cseed = int(s[images_per_group + j])
            mask = random_mask(config, _rng(0x4D, cseed))
            captions.append(render_caption(config, concept, mask, cseed))
        groups.append(SampleGroup(first_id + i, concept, images, captions))
    return groups


def generate_dataset(
    config: WorldConfig,
    n_groups: int,
    images_per_group: int = 1,
    captions_per_group: int = 5,
    seed: int = 0,
    split: str = "train",
    first_id: int = 0,
    policy: str = "first-only-1:1",
) -> PairedDataset:
    """Draw ``n_groups`` concepts uniformly and render their elements."""
    groups = generate_groups(config, n_groups, images_per_group, captions_per_group, seed, first_id)
    return PairedDataset(groups, policy=policy, split=split, world=config)


def generate_splits(
    config: WorldConfig,
    n_train: int,
    n_test: int,
    images_per_group: int = 1,
    captions_per_group: int = 5,
    seed: int = 0,
) -> tuple[PairedDataset, PairedDataset]:
    """Train and test datasets with disjoint group ids and independent draws."""
    train = generate_dataset(config, n_train, images_per_group, captions_per_group, seed, "train", 0)
    test = generate_dataset(
        config, n_test, images_per_group, captions_per_group, seed + 0x5EED, "test", first_id=n_train
    )
    return train, test


# --------------------------------------------------------------------------
# file format
#
# One JSON object per line. Line 1 is a header:
#   {"format": "mmrobust-dataset", "version": 1, "split", "policy", "world", "n_groups"}
# followed by one line per group:
#   {"group_id", "concept", "images": [[float,...],...], "captions": [[int,...],...],
#    "image_tags": [...], "caption_tags": [...]}
# Floats are written with repr(), which round-trips float64 exactly.

DATASET_FORMAT = "mmrobust-dataset"
DATASET_VERSION = 1


def dataset_lines(dataset: PairedDataset) -> list[str]:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": dataset.split,
        "policy": dataset.policy,
        "world": asdict(dataset.world),
        "n_groups": len(dataset.groups),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for g in dataset.groups:
        rec = {
            "group_id": g.group_id,
            "concept": list(g.concept),
            "images": [[float(v) for v in im] for im in g.images],
            "captions": [list(c) for c in g.captions],
            "image_tags": g.image_tags,
            "caption_tags": g.caption_tags,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    return lines


def save_dataset(dataset: PairedDataset, path, vocab_path=None) -> None:
    path = Path(path)
    path.write_text("\n".join(dataset_lines(dataset)) + "\n")
    if vocab_path is None:
        vocab_path = path.with_suffix(".vocab.json")
    if vocab_path:
        save_vocabulary(dataset.world, vocab_path)


def save_vocabulary(config: WorldConfig, path) -> None:
    vocab = {str(i): w for i, w in enumerate(vocabulary(config))}
    Path(path).write_text(json.dumps(vocab, indent=1, sort_keys=False) + "\n")


def load_dataset(path) -> PairedDataset:
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise DatasetParseError(path, len(lines), "file does not end with a newline (truncated?)")
    if not lines:
        raise DatasetParseError(path, 1, "empty file")

    def parse(i: int) -> dict:
        try:
            rec = json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise DatasetParseError(path, i + 1, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetParseError(path, i + 1, "record is not an object")
        return rec

    header = parse(0)
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise DatasetParseError(path, 1, "not a mmrobust dataset header")
    try:
        world = WorldConfig(**header["world"])
        n_groups = int(header["n_groups"])
    except (KeyError, TypeError) as exc:
        raise DatasetParseError(path, 1, f"bad header: {exc}") from None
    if len(lines) - 1 != n_groups:
        raise DatasetParseError(path, len(lines), f"expected {n_groups} groups, found {len(lines) - 1}")

    groups = []
    for i in range(1, len(lines)):
        rec = parse(i)
        try:
            groups.append(
                SampleGroup(
                    int(rec["group_id"]),
                    tuple(int(v) for v in rec["concept"]),
                    [np.array(im, dtype=np.float64) for im in rec["images"]],
                    [tuple(int(t) for t in c) for c in rec["captions"]],
                    list(rec["image_tags"]),
                    list(rec["caption_tags"]),
                )
            )
        except (KeyError, TypeError, ValueError, ContractError) as exc:
            raise DatasetParseError(path, i + 1, f"bad group record: {exc}") from None
    try:
        return PairedDataset(groups, policy=header["policy"], split=header["split"], world=world)
    except (KeyError, ContractError) as exc:
        raise DatasetParseError(path, 1, f"bad header: {exc}") from None
