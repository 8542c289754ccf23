"""Scikit-learn style wrapper around the two-stage training pipeline.

The underlying workflow is image-in, label-map-out, so X is a stack of
grayscale images (n, H, W) and y a stack of integer label maps of the same
shape, with 255 marking pixels whose class is not annotated.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, normalize_image
from .labels import SENTINEL, PartialLabelMap
from .metrics import EVAL_SEED, dice
from .network import assemble_segmentation, forward_prim
from .pairing import sample_conditional_set
from .trainer import TrainConfig, train_full, train_stage1


def _check_stack(X, name: str) -> np.ndarray:
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n_samples, height, width), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr


def _infer_annotated(labels: np.ndarray, num_classes: int) -> frozenset[int]:
    present = frozenset(int(v) for v in np.unique(labels) if v != SENTINEL)
    if SENTINEL not in labels:
        return frozenset(range(num_classes))
    return present


class DualCompatibleSegmenter(BaseEstimator):
    """Multi-label segmenter trained on partially annotated label maps.

    Parameters mirror :class:`TrainConfig`; ``use_dual=False`` stops after the
    first training stage. ``num_classes=None`` infers the class count from the
    largest label seen in ``y``.
    """

    def __init__(
        self,
        num_classes: int | None = None,
        lambda_dual: float = 0.2,
        lr_stage1: float = 1e-2,
        lr_stage2: float = 1e-4,
        batch_size: int = 8,
        stage1_epochs: int = 40,
        stage2_max_steps: int = 200,
        sync_every: int = 1,
        converge_eps: float = 1e-5,
        grad_clip: float = 5.0,
        depth: int = 3,
        base_filters: int = 16,
        weight_mode: str = "uniform",
        use_dual: bool = True,
        use_compatible: bool = True,
        use_pairwise: bool = True,
        conditional_input: bool = True,
        exclude_self: bool = True,
        eval_seed: int = EVAL_SEED,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.lambda_dual = lambda_dual
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.stage2_max_steps = stage2_max_steps
        self.sync_every = sync_every
        self.converge_eps = converge_eps
        self.grad_clip = grad_clip
        self.depth = depth
        self.base_filters = base_filters
        self.weight_mode = weight_mode
        self.use_dual = use_dual
        self.use_compatible = use_compatible
        self.use_pairwise = use_pairwise
        self.conditional_input = conditional_input
        self.exclude_self = exclude_self
        self.eval_seed = eval_seed
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_dual=self.lambda_dual,
            lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2,
            batch_size=self.batch_size,
            stage1_epochs=self.stage1_epochs,
            stage2_max_steps=self.stage2_max_steps,
            sync_every=self.sync_every,
            converge_eps=self.converge_eps,
            grad_clip=self.grad_clip,
            depth=self.depth,
            base_filters=self.base_filters,
            weight_mode=self.weight_mode,
            use_compatible=self.use_compatible,
            use_pairwise=self.use_pairwise,
            conditional_input=self.conditional_input,
            exclude_self=self.exclude_self,
            seed=self.seed,
        )

    def fit(self, X, y, annotated_classes=None) -> "DualCompatibleSegmenter":
        """Train on images ``X`` and partial label maps ``y``.

        ``annotated_classes`` gives the annotated class set per sample; when
        omitted, a map without 255 counts as fully annotated and one with 255
        as annotated exactly for the classes it contains.
        """
        X = _check_stack(X, "X")
        y = _check_stack(y, "y").astype(np.uint8)
        if X.shape != y.shape:
            raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
        m = self.num_classes
        if m is None:
            observed = [int(v) for v in np.unique(y) if v != SENTINEL]
            m = max(max(observed, default=0) + 1, 2)
        if annotated_classes is None:
            annotated = [_infer_annotated(y[i], m) for i in range(len(y))]
        else:
            if len(annotated_classes) != len(y):
                raise ValueError("annotated_classes must give one class set per sample")
            annotated = [frozenset(int(c) for c in ann) for ann in annotated_classes]
        maps = [PartialLabelMap(y[i], annotated[i], m) for i in range(len(y))]
        dataset = Dataset.from_arrays(list(X), maps)
        cfg = self._train_config()
        if self.use_dual:
            state = train_full(dataset, cfg)
        else:
            state = train_stage1(dataset, cfg)
        self.n_classes_ = m
        self.dataset_ = dataset
        self.state_ = state
        self.model_ = state.model
        self.cond_classes_ = state.cond_classes
        return self

    def _predict_one(self, image: np.ndarray, sample_index: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.eval_seed, sample_index])
        cond = sample_conditional_set(-1, self.dataset_, rng, self.cond_classes_, exclude_self=False)
        with torch.no_grad():
            pred = forward_prim(self.model_, image, cond, self.conditional_input)
            probs, labels = assemble_segmentation(pred, background_pair=0 in self.cond_classes_)
        return probs.numpy(), labels.numpy().astype(np.uint8)

    def predict(self, X) -> np.ndarray:
        """Hard label maps (n, H, W) for a stack of raw images."""
        check_is_fitted(self, "model_")
        X = _check_stack(X, "X")
        out = []
        for i in range(len(X)):
            img = normalize_image(X[i], f"X[{i}]")
            out.append(self._predict_one(img, i)[1])
        return np.stack(out)

    def predict_proba(self, X) -> np.ndarray:
        """Per-class probability maps (n, n_classes, H, W)."""
        check_is_fitted(self, "model_")
        X = _check_stack(X, "X")
        out = []
        for i in range(len(X)):
            img = normalize_image(X[i], f"X[{i}]")
            out.append(self._predict_one(img, i)[0])
        return np.stack(out)

    def score(self, X, y) -> float:
        """Mean foreground Dice against fully annotated label maps."""
        check_is_fitted(self, "model_")
        y = _check_stack(y, "y")
        if SENTINEL in y:
            raise ValueError("score needs fully annotated reference label maps")
        pred = self.predict(X)
        per_class = []
        for c in range(1, self.n_classes_):
            per_class.append(np.mean([dice(pred[i] == c, y[i] == c) for i in range(len(y))]))
        return float(np.mean(per_class))
