"""Numerical check that a loss admits the ground truth as a minimizer under
two different partial-annotation regimes.

For one pixel with known ground-truth class, each regime encodes the partial
label it would produce; the loss is evaluated on every point of a finite
probability grid and the (tie-aware) argmin sets are compared. The loss is
compatible for the pixel iff the one-hot ground truth lies in both sets.
Grid search is exhaustive rather than analytic so the verdict certifies the
actual loss implementation used for training.
"""
from __future__ import annotations

import dataclasses
import json
from fractions import Fraction

import numpy as np
import torch

from .labels import SENTINEL, ClassSpace, LabelKind, LabelVector, to_compat_label, to_weak_label
from .losses import LossConfig, compatible_ce_pixel, partial_ce_pixel, weak_label_ce_pixel

LOSS_IDS = ("weak_ce", "compatible_ce", "partial_ce", "one_hot_ce")

# Domain of the grid search per loss: categorical losses range over the
# probability simplex, per-channel losses over the full unit box. one_hot_ce
# is the control row: standard cross-entropy as if the pixel were fully
# labeled, ignoring the annotation regime.
_DOMAINS = {"weak_ce": "simplex", "compatible_ce": "box", "partial_ce": "simplex", "one_hot_ce": "simplex"}


def _grid_resolution(grid_step: float) -> int:
    frac = Fraction(str(grid_step)).limit_denominator(10**9)
    if frac <= 0 or Fraction(1, 1) % frac != 0:
        raise ValueError(f"grid_step must exactly divide 1, got {grid_step}")
    return int(1 / frac)


def simplex_grid(m: int, grid_step: float) -> np.ndarray:
    """All (K, m) integer points with coordinates summing to 1/grid_step."""
    n = _grid_resolution(grid_step)
    rows: list[tuple[int, ...]] = []

    def fill(prefix: tuple[int, ...], remaining: int, slots: int):
        if slots == 1:
            rows.append(prefix + (remaining,))
            return
        for v in range(remaining + 1):
            fill(prefix + (v,), remaining - v, slots - 1)

    fill((), n, m)
    return np.array(rows, dtype=np.int64)


def box_grid(m: int, grid_step: float) -> np.ndarray:
    """All (K, m) integer points of the regular grid on the unit box."""
    n = _grid_resolution(grid_step)
    axes = np.meshgrid(*([np.arange(n + 1)] * m), indexing="ij")
    return np.stack(axes, axis=-1).reshape(-1, m).astype(np.int64)


@dataclasses.dataclass(frozen=True)
class ArgminResult:
    points: np.ndarray  # (K, m) integer grid coordinates of the tie set
    min_value: float
    grid_resolution: int
    grid_size: int

    def contains(self, point_units: np.ndarray) -> bool:
        return bool((self.points == np.asarray(point_units)).all(axis=1).any())

    def as_probs(self) -> np.ndarray:
        return self.points.astype(np.float64) / self.grid_resolution


def argmin_set(loss_fn, domain: str, m: int, grid_step: float = 0.01, tolerance: float = 1e-9) -> ArgminResult:
    """Exhaustively minimize ``loss_fn`` over the grid, keeping all ties.

    ``loss_fn`` maps an (N, m) float64 array of probability vectors to (N,)
    loss values. The tie set is every point within ``tolerance`` of the
    minimum, in deterministic lexicographic order.
    """
    if domain not in ("simplex", "box"):
        raise ValueError(f"unknown domain {domain!r}")
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    n = _grid_resolution(grid_step)
    units = simplex_grid(m, grid_step) if domain == "simplex" else box_grid(m, grid_step)
    values = np.asarray(loss_fn(units.astype(np.float64) / n), dtype=np.float64)
    if values.shape != (units.shape[0],):
        raise ValueError(f"loss_fn returned shape {values.shape}, expected ({units.shape[0]},)")
    if not np.isfinite(values).all():
        raise ValueError("loss values must be finite on the whole grid")
    min_value = float(values.min())
    keep = values <= min_value + tolerance
    points = units[keep]
    order = np.lexsort(points.T[::-1])
    return ArgminResult(points=points[order], min_value=min_value, grid_resolution=n, grid_size=len(units))


def _regime_loss(loss_id: str, gt_class: int, annotated: frozenset[int], space: ClassSpace, cfg: LossConfig):
    """The per-pixel loss as this regime would apply it, plus its encoded label."""
    labeled = gt_class in annotated
    if loss_id == "weak_ce":
        rep = (
            LabelVector(values=np.eye(space.num_classes)[gt_class], kind=LabelKind.ONE_HOT)
            if labeled
            else to_weak_label(gt_class, annotated, space)
        )
        return rep, lambda pts: weak_label_ce_pixel(torch.from_numpy(pts), rep, cfg).numpy()
    if loss_id == "compatible_ce":
        rep, known = to_compat_label(gt_class if labeled else SENTINEL, annotated, space)
        return (rep, known), lambda pts: compatible_ce_pixel(
            torch.from_numpy(pts), rep.values, known, cfg
        ).numpy()
    if loss_id == "partial_ce":
        rep = gt_class if labeled else SENTINEL
        return rep, lambda pts: partial_ce_pixel(torch.from_numpy(pts), rep, cfg).numpy()
    if loss_id == "one_hot_ce":
        rep = LabelVector(values=np.eye(space.num_classes)[gt_class], kind=LabelKind.ONE_HOT)
        return rep, lambda pts: weak_label_ce_pixel(torch.from_numpy(pts), rep, cfg).numpy()
    raise ValueError(f"unknown loss {loss_id!r}; known: {LOSS_IDS}")


@dataclasses.dataclass(frozen=True)
class CompatCase:
    """One pixel, one loss, two annotation regimes.

    The encoded labels for each regime are derived from (gt_class, annotated)
    so they are valid encodings by construction.
    """

    space: ClassSpace
    gt_class: int
    ann_a: frozenset[int]
    ann_b: frozenset[int]
    loss_id: str
    grid_step: float = 0.01
    tolerance: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "ann_a", frozenset(int(c) for c in self.ann_a))
        object.__setattr__(self, "ann_b", frozenset(int(c) for c in self.ann_b))
        self.space.validate_class(self.gt_class)
        if self.loss_id not in LOSS_IDS:
            raise ValueError(f"unknown loss {self.loss_id!r}; known: {LOSS_IDS}")
        for name, ann in (("ann_a", self.ann_a), ("ann_b", self.ann_b)):
            if not ann:
                raise ValueError(f"{name} must be non-empty")
            bad = [c for c in ann if not 0 <= c < self.space.num_classes]
            if bad:
                raise ValueError(f"{name} classes {bad} outside 0..{self.space.num_classes - 1}")
            if self.loss_id == "weak_ce" and self.gt_class not in ann and len(ann) >= self.space.num_classes:
                raise ValueError(f"{name} annotates every class yet excludes gt")
        if not 0 < self.grid_step <= 0.25:
            raise ValueError(f"grid_step must lie in (0, 0.25], got {self.grid_step}")
        _grid_resolution(self.grid_step)
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")


@dataclasses.dataclass(frozen=True)
class CompatReport:
    loss_id: str
    verdict: str
    gt_in_d1: bool
    gt_in_d2: bool
    d1_size: int
    d2_size: int
    grid_step: float
    tolerance: float
    min_value_d1: float
    min_value_d2: float
    nearest_d1: list[float]
    nearest_d2: list[float]
    nearest_dist_d1: float
    nearest_dist_d2: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _nearest(result: ArgminResult, gt_probs: np.ndarray) -> tuple[list[float], float]:
    probs = result.as_probs()
    d = np.linalg.norm(probs - gt_probs[None, :], axis=1)
    i = int(d.argmin())
    return probs[i].tolist(), float(d[i])


def check_compatibility(case: CompatCase, cfg: LossConfig = LossConfig()) -> CompatReport:
    """Grid-search both regimes' argmin sets and test gt membership in both."""
    m = case.space.num_classes
    domain = _DOMAINS[case.loss_id]
    results = []
    for ann in (case.ann_a, case.ann_b):
        _, loss_fn = _regime_loss(case.loss_id, case.gt_class, ann, case.space, cfg)
        results.append(argmin_set(loss_fn, domain, m, case.grid_step, case.tolerance))
    d1, d2 = results
    gt_units = np.zeros(m, dtype=np.int64)
    gt_units[case.gt_class] = d1.grid_resolution
    gt_probs = gt_units.astype(np.float64) / d1.grid_resolution
    in1, in2 = d1.contains(gt_units), d2.contains(gt_units)
    near1, dist1 = _nearest(d1, gt_probs)
    near2, dist2 = _nearest(d2, gt_probs)
    return CompatReport(
        loss_id=case.loss_id,
        verdict="COMPATIBLE" if (in1 and in2) else "INCOMPATIBLE",
        gt_in_d1=in1,
        gt_in_d2=in2,
        d1_size=len(d1.points),
        d2_size=len(d2.points),
        grid_step=case.grid_step,
        tolerance=case.tolerance,
        min_value_d1=d1.min_value,
        min_value_d2=d2.min_value,
        nearest_d1=near1,
        nearest_d2=near2,
        nearest_dist_d1=dist1,
        nearest_dist_d2=dist2,
    )
