"""Outer minimisation: optimisers, batch sampling and the training regimes."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .attacks import ORDERS, PerturbationBudget, compose_multimodal, pgd_image_attack
from .autograd import Tape
from .model import (
    Architecture,
    ModelParams,
    embed_images,
    embed_texts,
    encode_image,
    info_nce_loss,
    init_params,
)
from .world import ContractError, PairedDataset

REGIMES = ("clean", "tecoa-itr", "fare", "mat")
NO_DECAY = ("log_tau",)


class TrainingDivergence(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# optimisers


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay added to the gradient."""

    def __init__(self, params: ModelParams, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, t in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay and name not in NO_DECAY:
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= lr * v


class AdamW:
    """Adam with weight decay decoupled from the adaptive step."""

    def __init__(
        self,
        params: ModelParams,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, t in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay and name not in NO_DECAY:
                t.data -= lr * self.weight_decay * t.data
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: ModelParams, weight_decay: float, momentum: float = 0.9):
    if name == "sgd-momentum":
        return SGDMomentum(params, momentum=momentum, weight_decay=weight_decay)
    if name == "adamw":
        return AdamW(params, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")


def lr_schedule(step: int, total: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total)) / 2.0


# --------------------------------------------------------------------------
# batches


def sample_batch(
    dataset: PairedDataset,
    policy: str | None,
    n: int,
    rng: np.random.Generator,
    element_rng: np.random.Generator | None = None,
):
    """Draw ``n`` pairs from distinct groups.

    first-only-1:1 and naive-flat-1:1 use each group's first image and first
    caption. one-to-many pairs the original image with a uniform caption or
    the original caption with a uniform augmented image (every pair touching
    an original is equally likely). many-to-one draws a uniform image with the
    original caption; many-to-many draws both uniformly.
    """
    policy = policy or dataset.policy
    groups = dataset.groups
    if n > len(groups):
        raise ContractError(f"batch of {n} needs {n} distinct groups, dataset has {len(groups)}")
    idx = rng.choice(len(groups), size=n, replace=False)
    erng = rng if element_rng is None else element_rng
    chosen = [groups[i] for i in idx]
    ni = np.array([len(g.images) for g in chosen])
    nc = np.array([len(g.captions) for g in chosen])
    if policy in ("first-only-1:1", "naive-flat-1:1"):
        ii = np.zeros(n, dtype=int)
        ci = np.zeros(n, dtype=int)
    elif policy == "one-to-many":
        j = erng.integers(0, nc + ni - 1)
        ci = np.where(j < nc, j, 0)
        ii = np.where(j < nc, 0, j - nc + 1)
    elif policy == "many-to-one":
        ii = erng.integers(0, ni)
        ci = np.zeros(n, dtype=int)
    elif policy == "many-to-many":
        ii = erng.integers(0, ni)
        ci = erng.integers(0, nc)
    else:
        raise ContractError(f"unknown pairing policy {policy!r}")
    images = np.stack([g.images[i] for g, i in zip(chosen, ii)])
    captions = [g.captions[c] for g, c in zip(chosen, ci)]
    return images, captions, np.array([g.group_id for g in chosen])


# --------------------------------------------------------------------------
# configuration and logs


@dataclass
class TrainConfig:
    regime: str = "clean"
    steps: int = 5000
    batch_size: int = 128
    optimizer: str = "sgd-momentum"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    schedule: str = "cosine"
    seed: int = 0
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    order: str = "T->I"
    policy: str | None = None
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"train.regime: unknown regime {self.regime!r}")
        if self.steps < 1:
            raise ConfigError("train.steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 for contrastive training")
        if self.order not in ORDERS:
            raise ConfigError(f"train.order must be one of {ORDERS}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("train.schedule must be 'cosine' or 'constant'")
        if self.optimizer not in ("sgd-momentum", "adamw"):
            raise ConfigError(f"train.optimizer: unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunLog:
    config_hash: str = ""
    steps: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def mean_seconds_per_step(self) -> float:
        return float(np.mean(self.wall_clock)) if self.wall_clock else 0.0

    def lines(self) -> list[str]:
        out = [json.dumps({"config_hash": self.config_hash, "kind": "header"}, sort_keys=True)]
        for rec in self.steps:
            out.append(json.dumps({"kind": "step", **rec}, sort_keys=True))
        for rec in self.snapshots:
            out.append(json.dumps({"kind": "snapshot", **rec}, sort_keys=True))
        return out

    def save(self, path, timing_path=None) -> None:
        """Deterministic records go to ``path``; wall-clock times to ``timing_path``."""
        Path(path).write_text("\n".join(self.lines()) + "\n")
        if timing_path is not None:
            Path(timing_path).write_text(
                json.dumps(
                    {"mean_seconds_per_step": self.mean_seconds_per_step(), "steps": len(self.wall_clock)},
                    sort_keys=True,
                )
                + "\n"
            )


def _derive(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, stream])


# --------------------------------------------------------------------------
# training


def _share(params: ModelParams) -> ModelParams:
    views = {}
    for name, t in params.items():
        v = ag.Tensor.__new__(ag.Tensor)
        v.data = t.data
        v.requires_grad = False
        v.grad = None
        v._node = None
        views[name] = v
    return ModelParams(**views)


def train(
    config: TrainConfig,
    dataset: PairedDataset,
    init: ModelParams | None = None,
    reference: ModelParams | None = None,
    arch: Architecture | None = None,
    config_hash: str = "",
    snapshot_fn: Callable[[ModelParams, int], dict] | None = None,
    snapshot_every: int = 0,
) -> tuple[ModelParams, RunLog]:
    """Run one training regime and return the final parameters and log.

    clean: InfoNCE on clean pairs. tecoa-itr: InfoNCE on (PGD image, clean
    text), the image attack minimising the cross-modal cosine. fare: squared
    distance between adversarial image embeddings and the frozen
    ``reference`` encoder's clean embeddings (text tower frozen). mat:
    multimodal composition in ``config.order`` then InfoNCE on the adversarial
    pair. The pairing policy of ``dataset`` (or ``config.policy``) selects
    1:1 versus one-to-many sampling.
    """
    config.validate()
    if config.regime == "fare" and reference is None:
        raise ConfigError("fare needs a frozen reference checkpoint")
    if arch is None:
        arch = Architecture(d_image=dataset.world.d_image, vocab_size=dataset.world.vocab_size)
    params = init.copy() if init is not None else init_params(arch, seed=config.seed, init_scale=config.init_scale)
    if config.regime == "fare" and init is None:
        params = reference.copy()
    ref_view = reference.frozen() if reference is not None else None
    opt = make_optimizer(config.optimizer, params, config.weight_decay, config.momentum)
    batch_rng = _derive(config.seed, 1)
    attack_rng = _derive(config.seed, 2)
    element_rng = _derive(config.seed, 3)
    trainable = params.names
    if config.regime == "fare":
        trainable = ["W1", "b1", "W2", "b2"]
    image_budget = config.budget.image_only()
    log = RunLog(config_hash=config_hash)

    for step in range(config.steps):
        t0 = time.perf_counter()
        lr = config.lr if config.schedule == "constant" else lr_schedule(step, config.steps, config.lr)
        images, captions, _ = sample_batch(dataset, config.policy, config.batch_size, batch_rng, element_rng)
        try:
            view = _share(params)
            if config.regime == "tecoa-itr":
                images = pgd_image_attack(view, images, embed_texts(view, captions), image_budget, attack_rng).adversarial
            elif config.regime == "mat":
                images, captions = compose_multimodal(view, images, captions, config.budget, config.order, attack_rng)
            elif config.regime == "fare":
                ref_emb = embed_images(ref_view, images)
                budget = PerturbationBudget(**{**asdict(image_budget), "image_objective": "uni"})
                images = pgd_image_attack(view, images, None, budget, attack_rng, reference=ref_emb).adversarial

            with Tape() as tape:
                if config.regime == "fare":
                    diff = encode_image(params, images) - ag.Tensor(ref_emb)
                    loss = ag.scale(ag.tsum(ag.multiply(diff, diff)), 1.0 / len(images))
                else:
                    loss = info_nce_loss(params, images, captions)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError("non-finite loss")
        except FloatingPointError as exc:
            raise TrainingDivergence(f"step {step}: {exc} (lr={lr:.3g}, tau={params.tau:.3g})") from exc
        grads = tape.backward(loss, wrt=params.tensors())
        opt.step({n: grads[t] for n, t in params.items() if n in trainable}, lr)
        params.clamp_temperature()
        log.steps.append({"step": step, "loss": value, "lr": lr})
        log.wall_clock.append(time.perf_counter() - t0)
        if snapshot_fn is not None and snapshot_every and (step + 1) % snapshot_every == 0:
            log.snapshots.append({"step": step + 1, **snapshot_fn(params, step + 1)})
    for t in params.tensors():
        t.grad = None
    return params, log
