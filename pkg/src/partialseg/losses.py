"""Loss functions for training on partially annotated label maps.

All losses are negative log-likelihoods restricted to what the partial
annotation actually determines: a labeled pixel supervises every channel, an
unlabeled pixel supervises only the channels of annotated classes (which it
is known not to belong to). The pairwise term constrains the channels of
unannotated classes against their conditional masks. Probabilities are
clamped away from {0, 1} before taking logs.

Functions accept numpy arrays or torch tensors with the class/channel axis
last, broadcast over any leading axes, and return torch tensors (0-dim for a
single pixel) so the same code serves hand-computed examples, the grid
verifier, and the differentiable training path.
"""
from __future__ import annotations

import dataclasses
import warnings

import numpy as np
import torch

from .labels import SENTINEL, LabelVector, PartialLabelMap
from .pairing import ConditionalSet, PairwiseTarget, conditional_mask_stack


@dataclasses.dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-7
    weight_mode: str = "uniform"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1e-2:
            raise ValueError(f"epsilon must lie in (0, 1e-2), got {self.epsilon}")
        if self.weight_mode not in ("uniform", "inverse_frequency"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


DEFAULT_CONFIG = LossConfig()


def _as_probs(x, name: str) -> torch.Tensor:
    if torch.is_tensor(x):
        t = x
    else:
        arr = np.asarray(x)
        if not arr.flags.writeable:  # torch refuses read-only buffers
            arr = arr.copy()
        t = torch.as_tensor(arr)
    if not t.dtype.is_floating_point:
        t = t.double()
    if not bool(torch.isfinite(t).all()):
        raise ValueError(f"{name} contains NaN or infinite entries")
    if bool((t < 0).any() or (t > 1).any()):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    return t


def _as_dtype(x, dtype) -> torch.Tensor:
    if torch.is_tensor(x):
        return x.to(dtype)
    arr = np.asarray(x)
    if not arr.flags.writeable:  # torch refuses read-only buffers
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=dtype)


def _log(p: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=eps, max=1.0 - eps))


def _log1m(p: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log1p(-torch.clamp(p, min=eps, max=1.0 - eps))


def compatible_ce_pixel(pred, target, known=None, cfg: LossConfig = DEFAULT_CONFIG) -> torch.Tensor:
    """Bernoulli cross-entropy over the known channels only.

    ``pred`` and ``target`` are (..., n); ``known`` is a boolean (..., n) mask
    (default: everything known). With a one-hot target and all channels known
    this is the standard per-channel cross-entropy; for an unlabeled pixel the
    target is all-zero and only annotated channels are known, so the loss
    reduces to -sum log(1 - pred_j) over those channels.
    """
    p = _as_probs(pred, "pred")
    y = _as_dtype(target, p.dtype)
    if bool(((y != 0) & (y != 1)).any()):
        raise ValueError("target entries must be 0 or 1")
    if known is None:
        mask = torch.ones_like(p, dtype=torch.bool)
    else:
        mask = _as_dtype(known, torch.bool)
    if mask.shape[-1] != p.shape[-1]:
        raise ValueError(f"known mask has {mask.shape[-1]} channels, pred has {p.shape[-1]}")
    none_known = ~mask.any(dim=-1)
    if bool(none_known.any()):
        warnings.warn("pixel with no known channels contributes zero loss", RuntimeWarning, stacklevel=2)
    ce = -(y * _log(p, cfg.epsilon) + (1.0 - y) * _log1m(p, cfg.epsilon))
    return torch.where(mask, ce, torch.zeros_like(ce)).sum(dim=-1)


def _class_flags(spec, m: int) -> torch.Tensor:
    """Normalize a class subset given as an index collection or bool mask."""
    if isinstance(spec, (set, frozenset, list, tuple, range)):
        flags = torch.zeros(m, dtype=torch.bool)
        for c in spec:
            if not 0 <= int(c) < m:
                raise ValueError(f"class index {c} outside 0..{m - 1}")
            flags[int(c)] = True
        return flags
    flags = torch.as_tensor(spec, dtype=torch.bool)
    if flags.shape[-1] != m:
        raise ValueError(f"class mask has {flags.shape[-1]} entries, expected {m}")
    return flags


def pairwise_loss_pixel(
    pred, cond_label, annotated, cfg: LossConfig = DEFAULT_CONFIG, active=None
) -> torch.Tensor:
    """Conditional constraint on the channels of unannotated classes.

    Where the conditional mask of class j is 0 the intersection channel 2j is
    pushed to zero; where it is 1 the extra channel 2j+1 is. ``active``
    optionally restricts the constrained classes (defaults to all unannotated
    ones); classes without a conditional mask must be excluded by the caller.
    """
    p = _as_probs(pred, "pred")
    if p.shape[-1] % 2:
        raise ValueError(f"pred needs an even channel count, got {p.shape[-1]}")
    m = p.shape[-1] // 2
    yc = _as_dtype(cond_label, p.dtype)
    if yc.shape[-1] != m:
        raise ValueError(f"cond_label has {yc.shape[-1]} classes, pred implies {m}")
    if bool(((yc != 0) & (yc != 1)).any()):
        raise ValueError("cond_label entries must be 0 or 1")
    include = ~_class_flags(annotated, m)
    if active is not None:
        include = include & _class_flags(active, m)
    p_inter = p[..., 0::2]
    p_extra = p[..., 1::2]
    term = -((1.0 - yc) * _log1m(p_inter, cfg.epsilon) + yc * _log1m(p_extra, cfg.epsilon))
    return torch.where(include, term, torch.zeros_like(term)).sum(dim=-1)


def weak_label_ce_pixel(pred, weak, cfg: LossConfig = DEFAULT_CONFIG) -> torch.Tensor:
    """Categorical cross-entropy against a (possibly weak) label distribution."""
    p = _as_probs(pred, "pred")
    total = p.sum(dim=-1)
    if bool((total - 1.0).abs().max() > 1e-6):
        raise ValueError("pred must be normalized over classes (within 1e-6)")
    w = weak.values if isinstance(weak, LabelVector) else np.asarray(weak)
    y = _as_dtype(w, p.dtype)
    return -(y * _log(p, cfg.epsilon)).sum(dim=-1)


def partial_ce_pixel(pred, pixel_value: int, cfg: LossConfig = DEFAULT_CONFIG) -> torch.Tensor:
    """Categorical cross-entropy at a labeled pixel, zero at an unlabeled one."""
    p = _as_probs(pred, "pred")
    if pixel_value == SENTINEL:
        return torch.zeros(p.shape[:-1], dtype=p.dtype)
    if not 0 <= pixel_value < p.shape[-1]:
        raise ValueError(f"class index {pixel_value} outside 0..{p.shape[-1] - 1}")
    return -_log(p[..., pixel_value], cfg.epsilon)


def pixel_weights(labels: PartialLabelMap, mode: str = "uniform") -> np.ndarray:
    """Per-pixel weights summing to 1 over the image.

    "uniform" weighs every pixel 1/K. "inverse_frequency" equalizes the total
    weight of each annotated class and of the unlabeled pool, which counters
    the area imbalance between small structures and background.
    """
    h, w = labels.labels.shape
    if mode == "uniform":
        return np.full((h, w), 1.0 / (h * w), dtype=np.float64)
    if mode != "inverse_frequency":
        raise ValueError(f"unknown weight mode {mode!r}")
    out = np.zeros((h, w), dtype=np.float64)
    groups = [labels.labels == c for c in sorted(labels.annotated_classes)]
    groups.append(~labels.labeled_mask())
    nonempty = [g for g in groups if g.any()]
    for g in nonempty:
        out[g] = 1.0 / (len(nonempty) * g.sum())
    return out


def pairwise_compatible_loss(
    pred,
    target: PairwiseTarget,
    cond: ConditionalSet,
    weights: np.ndarray | None = None,
    cfg: LossConfig = DEFAULT_CONFIG,
) -> torch.Tensor:
    """Pixel-weighted sum of the known-channel cross-entropy and the
    conditional pairwise constraint over one (2m, H, W) prediction."""
    p = _as_probs(pred, "pred")
    m = target.num_classes
    if p.shape[0] != 2 * m:
        raise ValueError(f"pred has {p.shape[0]} channels, target implies {2 * m}")
    spatial = p.shape[1:]
    cond_masks, has_slot = conditional_mask_stack(cond, m, tuple(spatial))
    active = torch.as_tensor(has_slot) & ~_class_flags(target.annotated, m)

    pred_cl = p.permute(1, 2, 0)
    y_cl = torch.as_tensor(target.interleaved(), dtype=p.dtype).permute(1, 2, 0)
    known_cl = torch.as_tensor(target.known).permute(1, 2, 0)
    cond_cl = torch.as_tensor(cond_masks, dtype=p.dtype).permute(1, 2, 0)

    cce = compatible_ce_pixel(pred_cl, y_cl, known_cl, cfg)
    pair = pairwise_loss_pixel(pred_cl, cond_cl, target.annotated, cfg, active=active)
    if weights is None:
        weights = np.full(tuple(spatial), 1.0 / int(np.prod(spatial)))
    w = torch.as_tensor(weights, dtype=p.dtype)
    return (w * (cce + pair)).sum()


def batched_known_ce(
    pred: torch.Tensor,
    target_y: torch.Tensor,
    known: torch.Tensor,
    weights: torch.Tensor,
    cfg: LossConfig = DEFAULT_CONFIG,
) -> torch.Tensor:
    """Known-channel cross-entropy for a training batch.

    pred/target_y/known: (B, C, H, W); weights: (B, H, W) summing to 1 per
    image. Returns the per-image weighted sums averaged over the batch.
    """
    if not bool(torch.isfinite(pred).all()):
        raise ValueError("pred contains NaN or infinite entries")
    eps = cfg.epsilon
    ce = -(target_y * _log(pred, eps) + (1.0 - target_y) * _log1m(pred, eps))
    cce_pix = torch.where(known, ce, torch.zeros_like(ce)).sum(dim=1)
    return (weights * cce_pix).sum(dim=(1, 2)).mean()


def batched_pairwise_term(
    pred: torch.Tensor,
    cond_masks: torch.Tensor,
    active: torch.Tensor,
    weights: torch.Tensor,
    cfg: LossConfig = DEFAULT_CONFIG,
) -> torch.Tensor:
    """Conditional pairwise constraint for a training batch.

    pred: (B, 2m, H, W); cond_masks: (B, m, H, W); active: (B, m) flags of the
    classes the term constrains (classes with a conditional slot that are not
    annotated in the target); weights as in batched_known_ce.
    """
    if not bool(torch.isfinite(pred).all()):
        raise ValueError("pred contains NaN or infinite entries")
    eps = cfg.epsilon
    yc = cond_masks
    term = -((1.0 - yc) * _log1m(pred[:, 0::2], eps) + yc * _log1m(pred[:, 1::2], eps))
    act = active[:, :, None, None].to(term.dtype)
    pair_pix = (term * act).sum(dim=1)
    return (weights * pair_pix).sum(dim=(1, 2)).mean()


def batched_partial_ce(
    class_probs: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor,
    cfg: LossConfig = DEFAULT_CONFIG,
) -> torch.Tensor:
    """Conventional cross-entropy on labeled pixels of an m-channel output.

    class_probs: (B, m, H, W) normalized over classes; labels: (B, H, W)
    integer map with SENTINEL at unlabeled pixels, which contribute nothing.
    """
    m = class_probs.shape[1]
    labeled = labels != SENTINEL
    idx = torch.where(labeled, labels, torch.zeros_like(labels)).long().unsqueeze(1)
    p_true = class_probs.gather(1, idx).squeeze(1)
    nll = -_log(p_true, cfg.epsilon) * labeled.to(class_probs.dtype)
    return (weights * nll).sum(dim=(1, 2)).mean()
