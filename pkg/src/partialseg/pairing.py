"""Conditional pairing: turning partial labels plus conditional priors into
per-channel supervision targets, and building the swapped samples used by the
dual training branch.

Channel layout is fixed throughout the package: a prediction over m classes
has 2m channels, channel 2j scoring "class j, inside the conditional region"
(intersection) and channel 2j+1 scoring "class j, outside it" (extra),
0-based.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import torch

from .labels import SENTINEL, PartialLabelMap


class ConditionalCoverageError(ValueError):
    """No training sample can supply a conditional mask for some class."""


def _is_soft(mask) -> bool:
    if torch.is_tensor(mask):
        return mask.dtype.is_floating_point
    return np.issubdtype(np.asarray(mask).dtype, np.floating)


@dataclasses.dataclass(frozen=True)
class ConditionalPair:
    """One conditional prior: an image together with its mask of one class.

    ``mask`` is binary for real annotations; the dual branch injects a soft
    probability map instead (``pseudo=True``), which is binarized whenever a
    0/1 mask is required but kept soft as network input.
    """

    image: np.ndarray | torch.Tensor
    mask: np.ndarray | torch.Tensor
    class_id: int
    source: int | None = None
    pseudo: bool = False

    def __post_init__(self):
        if tuple(self.image.shape) != tuple(self.mask.shape):
            raise ValueError(f"image shape {tuple(self.image.shape)} != mask shape {tuple(self.mask.shape)}")
        if _is_soft(self.mask):
            mx = self.mask
            bad = bool((mx < 0).any() or (mx > 1).any())
            if bad:
                raise ValueError("soft conditional mask must lie in [0, 1]")
        elif not self.pseudo:
            vals = np.unique(np.asarray(self.mask))
            if not set(vals.tolist()) <= {0, 1}:
                raise ValueError(f"conditional mask must be binary, got values {vals}")

    def binary_mask(self) -> np.ndarray:
        """0/1 mask as numpy; soft masks are thresholded at 0.5."""
        m = self.mask
        if torch.is_tensor(m):
            m = m.detach().cpu().numpy()
        m = np.asarray(m)
        if np.issubdtype(m.dtype, np.floating):
            return m >= 0.5
        return m.astype(bool)

    def input_mask(self) -> np.ndarray | torch.Tensor:
        """Mask as fed to the network: soft values preserved."""
        if torch.is_tensor(self.mask):
            return self.mask
        return np.asarray(self.mask, dtype=np.float32)


@dataclasses.dataclass(frozen=True)
class ConditionalSet:
    """Ordered conditional pairs, one slot per conditional class."""

    pairs: tuple[ConditionalPair, ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise ValueError("conditional set must hold at least one pair")
        ids = [p.class_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate conditional classes: {ids}")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(p.class_id for p in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def slot_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"no conditional slot for class {class_id}") from None

    def replace_slot(self, r: int, pair: ConditionalPair) -> "ConditionalSet":
        pairs = list(self.pairs)
        if pair.class_id != pairs[r].class_id:
            raise ValueError(f"slot {r} holds class {pairs[r].class_id}, not {pair.class_id}")
        pairs[r] = pair
        return ConditionalSet(pairs=tuple(pairs))


@dataclasses.dataclass(frozen=True)
class PairwiseTarget:
    """Supervision for the 2m channels derived from one target/conditional pair.

    inter/extra are per-class 0/1 maps (m, H, W); ``known`` marks which of the
    2m channels carry a trustworthy target at each pixel: labeled pixels
    determine every channel, unlabeled pixels only the channel pairs of
    annotated classes.
    """

    inter: np.ndarray
    extra: np.ndarray
    known: np.ndarray
    annotated: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "annotated", frozenset(int(c) for c in self.annotated))
        m = self.inter.shape[0]
        if self.extra.shape != self.inter.shape:
            raise ValueError("inter/extra shape mismatch")
        if self.known.shape != (2 * m,) + self.inter.shape[1:]:
            raise ValueError(f"known must have {2 * m} channels, got shape {self.known.shape}")
        if bool(np.logical_and(self.inter, self.extra).any()):
            raise ValueError("inter and extra overlap")

    @property
    def num_classes(self) -> int:
        return self.inter.shape[0]

    def interleaved(self) -> np.ndarray:
        """Channel-interleaved target (2m, H, W): [inter_0, extra_0, inter_1, ...]."""
        m = self.num_classes
        out = np.empty((2 * m,) + self.inter.shape[1:], dtype=np.float32)
        out[0::2] = self.inter
        out[1::2] = self.extra
        return out


@dataclasses.dataclass(frozen=True)
class DualSample:
    """A primal sample plus its role-swapped counterpart.

    Slot ``swap_index`` of the dual conditional set carries the primal image
    with the soft class-probability map predicted for the swapped class; the
    dual target is the conditional pair that used to occupy that slot.
    """

    primal_image: np.ndarray | torch.Tensor
    primal_labels: PartialLabelMap
    primal_cond: ConditionalSet
    dual_image: np.ndarray | torch.Tensor
    dual_labels: PartialLabelMap
    dual_cond: ConditionalSet
    swap_index: int


def build_pairwise_target(target: PartialLabelMap, cond: ConditionalSet) -> PairwiseTarget:
    """Split each annotated class into intersection/extra against its
    conditional mask and record which channels are determined where."""
    m = target.num_classes
    h, w = target.labels.shape
    inter = np.zeros((m, h, w), dtype=np.uint8)
    extra = np.zeros((m, h, w), dtype=np.uint8)
    known = np.zeros((2 * m, h, w), dtype=bool)

    for k in sorted(target.annotated_classes):
        tk = target.class_mask(k)
        try:
            ck = cond.pairs[cond.slot_of(k)].binary_mask()
        except KeyError:
            raise ConditionalCoverageError(
                f"annotated class {k} has no conditional slot (slots: {cond.class_ids})"
            ) from None
        if ck.shape != tk.shape:
            raise ValueError(f"conditional mask shape {ck.shape} != target shape {tk.shape}")
        inter[k] = tk & ck
        extra[k] = tk & ~ck
        # Unlabeled pixels are known not to belong to any annotated class.
        known[2 * k] = True
        known[2 * k + 1] = True

    known[:, target.labeled_mask()] = True
    return PairwiseTarget(inter=inter, extra=extra, known=known, annotated=target.annotated_classes)


def sample_conditional_set(
    target_index: int,
    dataset,
    rng: np.random.Generator,
    cond_classes: Sequence[int] | None = None,
    exclude_self: bool = True,
) -> ConditionalSet:
    """Draw one conditional pair per conditional class from the train split.

    Exclusion is by record index, so one-label records split from the same
    source image remain eligible for each other.
    """
    if cond_classes is None:
        cond_classes = dataset.conditional_classes()
    pairs = []
    for j in cond_classes:
        candidates = dataset.annotated_index()[int(j)]
        if exclude_self:
            candidates = [i for i in candidates if i != target_index]
        if not candidates:
            raise ConditionalCoverageError(
                f"no training sample (other than the target) is annotated with class {j}"
            )
        idx = candidates[int(rng.integers(len(candidates)))]
        labels = dataset.label_map(idx)
        pairs.append(
            ConditionalPair(
                image=dataset.image(idx),
                mask=labels.class_mask(int(j)).astype(np.uint8),
                class_id=int(j),
                source=idx,
            )
        )
    return ConditionalSet(pairs=tuple(pairs))


def class_probability_map(prediction: np.ndarray | torch.Tensor, class_id: int):
    """Assembled probability of one class from its channel pair: the two
    channels score disjoint regions, so their sum (capped at 1) is the class
    probability."""
    a = prediction[2 * class_id]
    b = prediction[2 * class_id + 1]
    if torch.is_tensor(prediction):
        return torch.clamp(a + b, max=1.0)
    return np.minimum(a + b, 1.0)


def make_dual_sample(
    image: np.ndarray | torch.Tensor,
    labels: PartialLabelMap,
    cond: ConditionalSet,
    prim_prediction: np.ndarray | torch.Tensor,
    r: int | None = None,
    rng: np.random.Generator | None = None,
) -> DualSample:
    """Swap conditional slot ``r`` with the target role.

    The dual target is the real annotation that sat in slot r; the dual
    conditional set reuses the remaining slots and injects the primal image
    with its predicted soft class-r probability map into slot r.
    """
    if r is None:
        if rng is None:
            raise ValueError("either r or rng must be given")
        r = int(rng.integers(len(cond)))
    if not 0 <= r < len(cond):
        raise ValueError(f"swap index {r} outside 0..{len(cond) - 1}")

    swapped = cond.pairs[r]
    class_id = swapped.class_id
    if 2 * class_id + 1 >= prim_prediction.shape[0]:
        raise ValueError(
            f"prediction has {prim_prediction.shape[0]} channels, too few for class {class_id}"
        )
    pseudo = class_probability_map(prim_prediction, class_id)

    dual_label_arr = np.full(labels.labels.shape, SENTINEL, dtype=np.uint8)
    dual_label_arr[swapped.binary_mask()] = class_id
    dual_labels = PartialLabelMap(
        labels=dual_label_arr,
        annotated_classes=frozenset({class_id}),
        num_classes=labels.num_classes,
    )
    dual_cond = cond.replace_slot(
        r, ConditionalPair(image=image, mask=pseudo, class_id=class_id, source=None, pseudo=True)
    )
    return DualSample(
        primal_image=image,
        primal_labels=labels,
        primal_cond=cond,
        dual_image=swapped.image,
        dual_labels=dual_labels,
        dual_cond=dual_cond,
        swap_index=r,
    )


def split_full_labels(full: PartialLabelMap) -> list[PartialLabelMap]:
    """Decompose a fully annotated map into m one-label maps (one per class)."""
    if not full.is_full:
        raise ValueError(f"map only annotates {sorted(full.annotated_classes)} of {full.num_classes} classes")
    out = []
    for k in range(full.num_classes):
        arr = np.full(full.labels.shape, SENTINEL, dtype=np.uint8)
        arr[full.labels == k] = k
        out.append(PartialLabelMap(labels=arr, annotated_classes=frozenset({k}), num_classes=full.num_classes))
    return out


def conditional_mask_stack(
    cond: ConditionalSet, num_classes: int, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Dense (m, H, W) 0/1 stack of the conditional masks plus an (m,) flag of
    which classes actually have a slot. Classes without a slot get zeros."""
    masks = np.zeros((num_classes,) + shape, dtype=np.float32)
    has_slot = np.zeros(num_classes, dtype=bool)
    for p in cond.pairs:
        masks[p.class_id] = p.binary_mask()
        has_slot[p.class_id] = True
    return masks, has_slot
