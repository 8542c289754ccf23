"""Label representations for partially annotated segmentation maps.

A training image comes with a subset of the label classes annotated. Pixels
belonging to an unannotated class carry the sentinel value instead of a class
index. Two dense encodings of such partial labels are provided: a weak
(uniform-over-unannotated) categorical vector, and a per-channel encoding
where only the channels determined by the annotation are marked as known.
"""
from __future__ import annotations

import dataclasses
import enum

import numpy as np

# Pixel value marking "class unknown" in serialized 8-bit label maps. Class
# indices are therefore restricted to 0..254.
SENTINEL = 255


class LabelKind(enum.Enum):
    ONE_HOT = "one_hot"
    WEAK = "weak"
    COMPAT_ZERO = "compat_zero"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclasses.dataclass(frozen=True)
class ClassSpace:
    """The label classes of a dataset. Class 0 is always background."""

    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(names) < 2:
            raise ValueError(f"need at least background + 1 class, got {names!r}")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names: {names!r}")
        if len(names) > SENTINEL:
            raise ValueError(f"at most {SENTINEL} classes supported, got {len(names)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_classes))

    def validate_class(self, c: int) -> int:
        if not 0 <= c < self.num_classes:
            raise ValueError(f"class index {c} outside 0..{self.num_classes - 1}")
        return int(c)


@dataclasses.dataclass(frozen=True)
class LabelVector:
    """A dense per-pixel label encoding over the m class channels."""

    values: np.ndarray
    kind: LabelKind

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, np.float64))
        v = self.values
        if v.ndim != 1 or v.size < 2:
            raise ValueError(f"label vector must be 1-d with >= 2 entries, got shape {v.shape}")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("label vector entries must lie in [0, 1]")
        if self.kind is LabelKind.ONE_HOT:
            if not (np.count_nonzero(v == 1.0) == 1 and np.count_nonzero(v) == 1):
                raise ValueError(f"one-hot vector must have exactly one entry equal to 1, got {v}")
        elif self.kind is LabelKind.COMPAT_ZERO:
            if np.any(v != 0.0):
                raise ValueError(f"compat-zero vector must be all zeros, got {v}")
        elif self.kind is LabelKind.WEAK:
            nz = v[v != 0.0]
            if nz.size == 0 or np.unique(nz).size != 1:
                raise ValueError(f"weak vector must share one nonzero value, got {v}")
            if abs(nz.sum() - 1.0) > 1e-9:
                raise ValueError(f"weak vector must sum to 1, got {v}")

    @property
    def num_classes(self) -> int:
        return self.values.size


@dataclasses.dataclass(frozen=True)
class PartialLabelMap:
    """An H x W label map where only ``annotated_classes`` are trustworthy.

    Every pixel holds either SENTINEL (class unknown) or a member of
    ``annotated_classes``. Pixels of any unannotated class, including
    background when background is unannotated, must carry the sentinel.
    """

    labels: np.ndarray
    annotated_classes: frozenset[int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen_array(self.labels, np.uint8))
        object.__setattr__(self, "annotated_classes", frozenset(int(c) for c in self.annotated_classes))
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be 2-d, got shape {self.labels.shape}")
        if not 2 <= self.num_classes <= SENTINEL:
            raise ValueError(f"num_classes must be in 2..{SENTINEL}, got {self.num_classes}")
        if not self.annotated_classes:
            raise ValueError("annotated_classes must be non-empty")
        bad = [c for c in self.annotated_classes if not 0 <= c < self.num_classes]
        if bad:
            raise ValueError(f"annotated classes {bad} outside 0..{self.num_classes - 1}")
        present = set(np.unique(self.labels).tolist()) - {SENTINEL}
        stray = present - self.annotated_classes
        if stray:
            raise ValueError(f"pixels labeled with unannotated classes {sorted(stray)}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def is_full(self) -> bool:
        return len(self.annotated_classes) == self.num_classes

    def labeled_mask(self) -> np.ndarray:
        return self.labels != SENTINEL

    def class_mask(self, c: int) -> np.ndarray:
        """Binary mask of class ``c``; only meaningful for annotated classes."""
        if c not in self.annotated_classes:
            raise ValueError(f"class {c} is not annotated (annotated={sorted(self.annotated_classes)})")
        return self.labels == c


def to_weak_label(gt_class: int, annotated: frozenset[int] | set[int], space: ClassSpace) -> LabelVector:
    """Uniform categorical encoding of an unlabeled pixel.

    The pixel's true class is known to be outside ``annotated``, so the
    remaining m - q classes share the probability mass equally.
    """
    m = space.num_classes
    annotated = frozenset(int(c) for c in annotated)
    space.validate_class(gt_class)
    if gt_class in annotated:
        raise ValueError(f"gt class {gt_class} is annotated; weak encoding is for unlabeled pixels")
    if len(annotated) >= m:
        raise ValueError("weak encoding undefined when every class is annotated")
    values = np.zeros(m)
    unannotated = [c for c in range(m) if c not in annotated]
    values[unannotated] = 1.0 / len(unannotated)
    return LabelVector(values=values, kind=LabelKind.WEAK)


def to_compat_label(
    pixel_value: int, annotated: frozenset[int] | set[int], space: ClassSpace
) -> tuple[LabelVector, np.ndarray]:
    """Per-channel encoding plus the boolean mask of known channels.

    A labeled pixel (``pixel_value`` is an annotated class) determines all m
    channels and encodes as one-hot. An unlabeled pixel (SENTINEL) determines
    only the annotated channels, all of which it is known not to belong to,
    and encodes as the all-zero vector.
    """
    m = space.num_classes
    annotated = frozenset(int(c) for c in annotated)
    bad = [c for c in annotated if not 0 <= c < m]
    if bad:
        raise ValueError(f"annotated classes {bad} outside 0..{m - 1}")
    known = np.zeros(m, dtype=bool)
    if pixel_value == SENTINEL:
        known[sorted(annotated)] = True
        return LabelVector(values=np.zeros(m), kind=LabelKind.COMPAT_ZERO), known
    space.validate_class(pixel_value)
    if pixel_value not in annotated:
        raise ValueError(f"labeled pixel of class {pixel_value} outside annotated set {sorted(annotated)}")
    values = np.zeros(m)
    values[pixel_value] = 1.0
    known[:] = True
    return LabelVector(values=values, kind=LabelKind.ONE_HOT), known
