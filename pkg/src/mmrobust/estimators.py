"""scikit-learn style wrappers around the trainers and augmenters.

``X`` is a PairedDataset in both cases, so the objects compose with
``sklearn.pipeline.Pipeline`` and ``sklearn.base.clone``::

    pipe = Pipeline([("aug", PairAugmenter("i2t-oracle")), ("model", DualEncoderRetriever(regime="mat"))])
    pipe.fit(train).score(test)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .attacks import PerturbationBudget
from .augment import AugmenterSpec, build_augmented_dataset
from .metrics import EVAL_BUDGET, recall_table, robust_eval
from .model import embed_images, embed_texts
from .train import TrainConfig, train


class DualEncoderRetriever(BaseEstimator):
    """Train a dual encoder under one regime and score it by recall@1."""

    def __init__(
        self,
        regime="clean",
        steps=1000,
        batch_size=128,
        optimizer="adamw",
        lr=3e-3,
        weight_decay=1.0,
        eps=8 / 255,
        pgd_steps=2,
        step_size=4 / 255,
        max_edits=1,
        order="T->I",
        image_objective="cross",
        reference=None,
        gallery_size=None,
        seed=0,
    ):
        self.regime = regime
        self.steps = steps
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.eps = eps
        self.pgd_steps = pgd_steps
        self.step_size = step_size
        self.max_edits = max_edits
        self.order = order
        self.image_objective = image_objective
        self.reference = reference
        self.gallery_size = gallery_size
        self.seed = seed

    def _config(self) -> TrainConfig:
        budget = PerturbationBudget(
            eps=self.eps,
            steps=self.pgd_steps,
            step_size=self.step_size,
            max_edits=self.max_edits,
            image_objective=self.image_objective,
        )
        return TrainConfig(
            regime=self.regime,
            steps=self.steps,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
            budget=budget,
            order=self.order,
        )

    def fit(self, X, y=None):
        self.params_, self.runlog_ = train(self._config(), X, reference=self.reference)
        return self

    def _check(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before using this retriever")

    def embed_images(self, images) -> np.ndarray:
        self._check()
        return embed_images(self.params_, images)

    def embed_texts(self, captions) -> np.ndarray:
        self._check()
        return embed_texts(self.params_, captions)

    def recall(self, X, attack: str = "clean", budget: PerturbationBudget = EVAL_BUDGET, seed: int = 0) -> dict:
        self._check()
        if attack == "clean":
            return recall_table(self.params_, X, gallery_size=self.gallery_size)
        return robust_eval(self.params_, X, attack, budget, seed=seed, gallery_size=self.gallery_size)

    def score(self, X, y=None) -> float:
        """Mean of clean TR@1 and IR@1."""
        r = self.recall(X)
        return 0.5 * (r["TR@1"] + r["IR@1"])


class PairAugmenter(BaseEstimator, TransformerMixin):
    """Attach augmented elements to every group of a PairedDataset."""

    def __init__(self, technique="i2t-oracle", count=None, assembly="one-to-many", alpha=0.3, shift=0.0, seed=0):
        self.technique = technique
        self.count = count
        self.assembly = assembly
        self.alpha = alpha
        self.shift = shift
        self.seed = seed

    def fit(self, X, y=None):
        self.spec_ = AugmenterSpec(
            self.technique, count=self.count, alpha=self.alpha, shift=self.shift, seed=self.seed
        )
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            raise NotFittedError("call fit before transform")
        return build_augmented_dataset(X, [self.spec_], self.assembly, seed=self.seed)
