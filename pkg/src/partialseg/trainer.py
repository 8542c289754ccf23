"""Two-stage training loop.

Stage 1 fits the primal network with the pairwise-compatible loss. Stage 2
keeps a frozen duplicate of the network, swaps one conditional slot with the
target role per sample (injecting the primal branch's soft prediction as the
swapped conditional mask), and fine-tunes the primal parameters on the
combined primal + weighted dual objective. The duplicate changes only by
being re-synced from the primal parameters; convergence is declared when the
max-norm drift between the two falls below a threshold.

Randomness is split into named streams (batch, conditional, dual) spawned
from one seed, so the dual branch's extra draws never perturb batch or
conditional sampling; with the dual weight at zero, stage-2 updates are
bit-for-bit the plain primal updates on the same batches.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import pathlib
from typing import Callable

import numpy as np
import torch

from . import __version__
from .data import Dataset
from .labels import SENTINEL
from .losses import (
    LossConfig,
    batched_known_ce,
    batched_pairwise_term,
    batched_partial_ce,
    pixel_weights,
)
from .network import (
    BackboneConfig,
    PairwiseUNet,
    assemble_segmentation,
    pack_inputs,
    parameter_drift,
    parameters_equal,
)
from .pairing import (
    ConditionalSet,
    build_pairwise_target,
    conditional_mask_stack,
    make_dual_sample,
    sample_conditional_set,
)

ENV_SEED = "PARTIALSEG_SEED"


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns NaN/inf; carries a diagnostic dict."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lambda_dual: float = 0.2
    lr_stage1: float = 1e-2
    lr_stage2: float = 1e-4
    batch_size: int = 8
    stage1_epochs: int = 40
    stage2_max_steps: int = 200
    sync_every: int = 1
    converge_eps: float = 1e-5
    grad_clip: float = 5.0
    seed: int = 0
    epsilon: float = 1e-7
    weight_mode: str = "uniform"
    use_compatible: bool = True
    use_pairwise: bool = True
    conditional_input: bool = True
    exclude_self: bool = True
    depth: int = 3
    base_filters: int = 16
    checkpoint_every_epochs: int = 1  # 0 = final checkpoint only

    def __post_init__(self):
        if self.lambda_dual < 0:
            raise ValueError(f"lambda_dual must be >= 0, got {self.lambda_dual}")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stage1_epochs < 0 or self.stage2_max_steps < 0:
            raise ValueError("epoch/step budgets must be >= 0")
        if self.sync_every < 1:
            raise ValueError(f"sync_every must be >= 1, got {self.sync_every}")
        if not self.converge_eps > 0:
            raise ValueError(f"converge_eps must be > 0, got {self.converge_eps}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.use_pairwise and not self.conditional_input:
            raise ValueError("the pairwise term requires conditional input channels")
        LossConfig(epsilon=self.epsilon, weight_mode=self.weight_mode)

    def loss_config(self) -> LossConfig:
        return LossConfig(epsilon=self.epsilon, weight_mode=self.weight_mode)


def resolve_seed(cfg: TrainConfig) -> int:
    """Config seed, unless the PARTIALSEG_SEED environment variable overrides it."""
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{ENV_SEED} must be an integer, got {env!r}") from None
    return cfg.seed


@dataclasses.dataclass
class RngStreams:
    batch: np.random.Generator
    cond: np.random.Generator
    dual: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        children = np.random.SeedSequence(seed).spawn(3)
        return cls(*(np.random.default_rng(c) for c in children))


@dataclasses.dataclass
class TrainState:
    model: torch.nn.Module
    dual_model: torch.nn.Module | None
    optimizer: torch.optim.Optimizer | None
    backbone: BackboneConfig
    cond_classes: tuple[int, ...]
    rng: RngStreams
    seed: int
    step: int = 0
    stage: int = 1
    history: list[dict] = dataclasses.field(default_factory=list)
    converged: bool = False
    model_factory: Callable[[BackboneConfig], torch.nn.Module] | None = None

    def build_twin(self) -> torch.nn.Module:
        factory = self.model_factory or PairwiseUNet
        # Twin construction must not disturb the global torch RNG stream.
        with torch.random.fork_rng():
            torch.manual_seed(0)
            return factory(self.backbone)


@dataclasses.dataclass
class PreparedBatch:
    """One training batch with its conditional sets and supervision tensors."""

    indices: list[int]
    images: list[np.ndarray]
    label_maps: list
    cond_sets: list[ConditionalSet]
    x_prim: torch.Tensor  # (B, 1+2s, H, W)
    target_y: torch.Tensor  # (B, 2m, H, W)
    known: torch.Tensor  # (B, 2m, H, W) bool
    cond_class_masks: torch.Tensor  # (B, m, H, W)
    pair_active: torch.Tensor  # (B, m) bool
    weights: torch.Tensor  # (B, H, W)
    labels_full: torch.Tensor  # (B, H, W) long, SENTINEL at unlabeled pixels
    swap_slots: list[int] | None = None


def prepare_batch(
    dataset: Dataset,
    indices: list[int],
    cond_rng: np.random.Generator,
    cfg: TrainConfig,
    cond_classes: tuple[int, ...],
    swap_rng: np.random.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> PreparedBatch:
    images, label_maps, cond_sets, xs = [], [], [], []
    ys, knowns, cond_stacks, actives, weight_rows, label_rows = [], [], [], [], [], []
    m = dataset.space.num_classes
    for i in indices:
        lm = dataset.label_map(i)
        cond = sample_conditional_set(i, dataset, cond_rng, cond_classes, cfg.exclude_self)
        target = build_pairwise_target(lm, cond)
        masks, has_slot = conditional_mask_stack(cond, m, lm.labels.shape)
        annotated = np.zeros(m, dtype=bool)
        annotated[sorted(lm.annotated_classes)] = True

        images.append(dataset.image(i))
        label_maps.append(lm)
        cond_sets.append(cond)
        xs.append(pack_inputs(dataset.image(i), cond, cfg.conditional_input, dtype=dtype))
        ys.append(torch.as_tensor(target.interleaved(), dtype=dtype))
        knowns.append(torch.as_tensor(target.known))
        cond_stacks.append(torch.as_tensor(masks, dtype=dtype))
        actives.append(torch.as_tensor(has_slot & ~annotated))
        weight_rows.append(torch.as_tensor(pixel_weights(lm, cfg.weight_mode), dtype=dtype))
        label_rows.append(torch.as_tensor(lm.labels.astype(np.int64)))

    swap_slots = None
    if swap_rng is not None:
        swap_slots = [int(swap_rng.integers(len(cond_classes))) for _ in indices]
    return PreparedBatch(
        indices=list(indices),
        images=images,
        label_maps=label_maps,
        cond_sets=cond_sets,
        x_prim=torch.stack(xs),
        target_y=torch.stack(ys),
        known=torch.stack(knowns),
        cond_class_masks=torch.stack(cond_stacks),
        pair_active=torch.stack(actives),
        weights=torch.stack(weight_rows),
        labels_full=torch.stack(label_rows),
        swap_slots=swap_slots,
    )


def _primal_parts(
    pred: torch.Tensor, batch: PreparedBatch, cfg: TrainConfig, cond_classes: tuple[int, ...]
) -> dict[str, torch.Tensor]:
    lcfg = cfg.loss_config()
    zero = pred.sum() * 0.0
    if cfg.use_pairwise:
        pair = batched_pairwise_term(pred, batch.cond_class_masks, batch.pair_active, batch.weights, lcfg)
    else:
        pair = zero
    if cfg.use_compatible:
        cce = batched_known_ce(pred, batch.target_y, batch.known, batch.weights, lcfg)
    else:
        probs, _ = assemble_segmentation(pred, background_pair=0 in cond_classes)
        probs = probs / probs.sum(dim=1, keepdim=True).clamp(min=lcfg.epsilon)
        cce = batched_partial_ce(probs, batch.labels_full, batch.weights, lcfg)
    return {"cce": cce, "pairwise": pair, "prim": cce + pair}


def _dual_parts(
    prim_pred: torch.Tensor,
    dual_model: torch.nn.Module,
    batch: PreparedBatch,
    cfg: TrainConfig,
    cond_classes: tuple[int, ...],
) -> dict[str, torch.Tensor]:
    if batch.swap_slots is None:
        raise ValueError("batch was prepared without swap slots; cannot build the dual branch")
    lcfg = cfg.loss_config()
    dtype = prim_pred.dtype
    m = batch.target_y.shape[1] // 2
    xs, ys, knowns, cond_stacks, actives, weight_rows = [], [], [], [], [], []
    for b, r in enumerate(batch.swap_slots):
        dual = make_dual_sample(batch.images[b], batch.label_maps[b], batch.cond_sets[b], prim_pred[b], r)
        target = build_pairwise_target(dual.dual_labels, dual.dual_cond)
        masks, has_slot = conditional_mask_stack(dual.dual_cond, m, dual.dual_labels.labels.shape)
        annotated = np.zeros(m, dtype=bool)
        annotated[sorted(dual.dual_labels.annotated_classes)] = True
        xs.append(pack_inputs(dual.dual_image, dual.dual_cond, cfg.conditional_input, dtype=dtype))
        ys.append(torch.as_tensor(target.interleaved(), dtype=dtype))
        knowns.append(torch.as_tensor(target.known))
        cond_stacks.append(torch.as_tensor(masks, dtype=dtype))
        actives.append(torch.as_tensor(has_slot & ~annotated))
        weight_rows.append(torch.as_tensor(pixel_weights(dual.dual_labels, cfg.weight_mode), dtype=dtype))
    x_dual = torch.stack(xs)
    dual_pred = dual_model(x_dual)
    cce = batched_known_ce(dual_pred, torch.stack(ys), torch.stack(knowns), torch.stack(weight_rows), lcfg)
    pair = batched_pairwise_term(
        dual_pred, torch.stack(cond_stacks), torch.stack(actives), torch.stack(weight_rows), lcfg
    )
    return {"dual": cce + pair}


def evaluate_objective(
    batch: PreparedBatch,
    model: torch.nn.Module,
    dual_model: torch.nn.Module | None,
    cfg: TrainConfig,
    cond_classes: tuple[int, ...],
) -> dict[str, torch.Tensor]:
    """Stage objective on one prepared batch.

    Returns the loss components and ``total = prim + lambda_dual * dual``.
    With ``lambda_dual == 0`` the dual branch is evaluated without a graph and
    the returned total IS the primal loss tensor, so updates match plain
    primal training exactly. The dual gradient reaches the primal parameters
    only through the injected soft pseudo-label input.

    A non-finite forward pass yields NaN components rather than tripping the
    loss ops' input validation, so training loops can snapshot and abort.
    """
    pred = model(batch.x_prim)
    if not bool(torch.isfinite(pred).all()):
        nan = (pred.detach().sum() * torch.nan).to(pred.dtype)
        return {"cce": nan, "pairwise": nan, "prim": nan, "dual": nan, "total": nan}
    parts = _primal_parts(pred, batch, cfg, cond_classes)
    if dual_model is None or batch.swap_slots is None:
        parts["dual"] = torch.zeros((), dtype=pred.dtype)
        parts["total"] = parts["prim"]
        return parts
    if cfg.lambda_dual == 0.0:
        with torch.no_grad():
            parts.update(_dual_parts(pred.detach(), dual_model, batch, cfg, cond_classes))
        parts["total"] = parts["prim"]
        return parts
    parts.update(_dual_parts(pred, dual_model, batch, cfg, cond_classes))
    parts["total"] = parts["prim"] + cfg.lambda_dual * parts["dual"]
    return parts


HISTORY_COLUMNS = ("step", "L_cce", "L_p", "L_prim", "L_dual", "total")


def _record(state: TrainState, parts: dict[str, torch.Tensor], **extra) -> dict:
    row = {
        "step": state.step,
        "L_cce": float(parts["cce"].detach()),
        "L_p": float(parts["pairwise"].detach()),
        "L_prim": float(parts["prim"].detach()),
        "L_dual": float(parts["dual"].detach()),
        "total": float(parts["total"].detach()),
        "stage": state.stage,
    }
    row.update(extra)
    state.history.append(row)
    return row


def write_history(run_dir: pathlib.Path, history: list[dict]) -> pathlib.Path:
    path = pathlib.Path(run_dir) / "history.csv"
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if c != "step" else str(row[c]) for c in HISTORY_COLUMNS))
    path.write_text("\n".join(lines) + "\n")
    return path


def _config_payload(cfg: TrainConfig, state: TrainState, dataset: Dataset) -> dict:
    return {
        "train": dataclasses.asdict(cfg),
        "seed": state.seed,
        "backbone": state.backbone.to_json_dict(),
        "conditional_classes": list(state.cond_classes),
        "class_names": list(dataset.space.class_names),
        "n_train": len(dataset.indices("train")),
        "package_version": __version__,
    }


def config_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def write_run_config(run_dir: pathlib.Path, cfg: TrainConfig, state: TrainState, dataset: Dataset) -> None:
    run_dir = pathlib.Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = _config_payload(cfg, state, dataset)
    (run_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_checkpoint(run_dir: pathlib.Path, state: TrainState, cfg: TrainConfig, dataset: Dataset) -> pathlib.Path:
    ckpt_dir = pathlib.Path(run_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    base = ckpt_dir / f"step_{state.step}"
    payload = {
        "model": state.model.state_dict(),
        "dual": state.dual_model.state_dict() if state.dual_model is not None else None,
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "rng": {
            "batch": state.rng.batch.bit_generator.state,
            "cond": state.rng.cond.bit_generator.state,
            "dual": state.rng.dual.bit_generator.state,
        },
    }
    tmp = base.with_suffix(".pt.tmp")
    torch.save(payload, tmp)
    tmp.rename(base.with_suffix(".pt"))
    meta = {
        "step": state.step,
        "stage": state.stage,
        "seed": state.seed,
        "converged": state.converged,
        "backbone": state.backbone.to_json_dict(),
        "conditional_classes": list(state.cond_classes),
        "config_sha256": config_digest(_config_payload(cfg, state, dataset)),
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return base.with_suffix(".pt")


def load_checkpoint(path: str | pathlib.Path) -> tuple[torch.nn.Module, dict]:
    """Rebuild the primal network and metadata from a checkpoint pair."""
    path = pathlib.Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = PairwiseUNet(BackboneConfig.from_json_dict(meta["backbone"]))
    model.load_state_dict(payload["model"])
    model.eval()
    return model, meta


def init_state(
    dataset: Dataset,
    cfg: TrainConfig,
    model_factory: Callable[[BackboneConfig], torch.nn.Module] | None = None,
) -> TrainState:
    """Seeded model + RNG streams; no optimizer yet."""
    if not dataset.indices("train"):
        raise ValueError("dataset has no train split")
    seed = resolve_seed(cfg)
    cond_classes = dataset.conditional_classes()
    shape = dataset.image(dataset.indices("train")[0]).shape
    backbone = BackboneConfig(
        num_classes=dataset.space.num_classes,
        cond_classes=cond_classes,
        depth=cfg.depth,
        base_filters=cfg.base_filters,
        image_size=(int(shape[0]), int(shape[1])),
    )
    torch.manual_seed(seed)
    model = (model_factory or PairwiseUNet)(backbone)
    return TrainState(
        model=model,
        dual_model=None,
        optimizer=None,
        backbone=backbone,
        cond_classes=cond_classes,
        rng=RngStreams.from_seed(seed),
        seed=seed,
        model_factory=model_factory,
    )


def _abort_if_diverged(parts: dict, state: TrainState, batch: PreparedBatch, run_dir) -> None:
    if math.isfinite(float(parts["total"].detach())):
        return
    snapshot = {
        "step": state.step + 1,
        "stage": state.stage,
        "seed": state.seed,
        "batch_indices": batch.indices,
        "losses": {k: float(v.detach()) for k, v in parts.items()},
    }
    if run_dir is not None:
        path = pathlib.Path(run_dir) / "diverged.json"
        path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    raise TrainingDiverged(f"non-finite loss at step {snapshot['step']}", snapshot)


def _train_batch_indices(dataset: Dataset, state: TrainState, cfg: TrainConfig) -> list[int]:
    train = dataset.indices("train")
    picks = state.rng.batch.integers(0, len(train), size=cfg.batch_size)
    return [train[int(i)] for i in picks]


def run_primal_steps(
    state: TrainState,
    dataset: Dataset,
    cfg: TrainConfig,
    n_steps: int,
    lr: float,
    run_dir: pathlib.Path | None = None,
    fresh_optimizer: bool = False,
) -> TrainState:
    """Plain primal updates; the shared engine of stage 1 and of trajectory
    comparisons against stage 2."""
    if state.optimizer is None or fresh_optimizer:
        state.optimizer = torch.optim.Adam(state.model.parameters(), lr=lr)
    for _ in range(n_steps):
        idxs = _train_batch_indices(dataset, state, cfg)
        batch = prepare_batch(dataset, idxs, state.rng.cond, cfg, state.cond_classes)
        parts = evaluate_objective(batch, state.model, None, cfg, state.cond_classes)
        _abort_if_diverged(parts, state, batch, run_dir)
        state.optimizer.zero_grad()
        parts["total"].backward()
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
        state.optimizer.step()
        state.step += 1
        _record(state, parts)
    return state


def train_stage1(
    dataset: Dataset,
    cfg: TrainConfig,
    run_dir: str | pathlib.Path | None = None,
    model_factory: Callable[[BackboneConfig], torch.nn.Module] | None = None,
) -> TrainState:
    """Fit the primal network for ``stage1_epochs`` epochs of random batches.

    With zero epochs the returned parameters equal the seeded initialization.
    """
    state = init_state(dataset, cfg, model_factory)
    if run_dir is not None:
        run_dir = pathlib.Path(run_dir)
        write_run_config(run_dir, cfg, state, dataset)
    state.optimizer = torch.optim.Adam(state.model.parameters(), lr=cfg.lr_stage1)
    steps_per_epoch = max(1, math.ceil(len(dataset.indices("train")) / cfg.batch_size))
    for epoch in range(cfg.stage1_epochs):
        run_primal_steps(state, dataset, cfg, steps_per_epoch, cfg.lr_stage1, run_dir)
        if (
            run_dir is not None
            and cfg.checkpoint_every_epochs
            and (epoch + 1) % cfg.checkpoint_every_epochs == 0
            and epoch + 1 < cfg.stage1_epochs
        ):
            save_checkpoint(run_dir, state, cfg, dataset)
    if run_dir is not None:
        save_checkpoint(run_dir, state, cfg, dataset)
        write_history(run_dir, state.history)
    return state


def train_stage2(
    state: TrainState,
    dataset: Dataset,
    cfg: TrainConfig,
    run_dir: str | pathlib.Path | None = None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Dual fine-tuning loop.

    Every ``sync_every`` steps the frozen duplicate is overwritten with the
    current primal parameters (asserted equal right after); each step swaps a
    random conditional slot per sample and minimizes prim + lambda * dual.
    Only the primal parameters receive gradient updates. Stops on parameter
    drift below ``converge_eps`` or after ``stage2_max_steps`` steps.
    """
    state.stage = 2
    state.converged = False
    dual_model = state.build_twin()
    dual_model.load_state_dict(state.model.state_dict())
    for p in dual_model.parameters():
        p.requires_grad_(False)
    dual_model.eval()
    state.dual_model = dual_model
    state.optimizer = torch.optim.Adam(state.model.parameters(), lr=cfg.lr_stage2)

    if run_dir is not None:
        run_dir = pathlib.Path(run_dir)
        write_run_config(run_dir, cfg, state, dataset)

    for t in range(cfg.stage2_max_steps):
        if t % cfg.sync_every == 0:
            dual_model.load_state_dict(state.model.state_dict())
            assert parameters_equal(dual_model, state.model), "duplicate out of sync after sync"
        idxs = _train_batch_indices(dataset, state, cfg)
        batch = prepare_batch(dataset, idxs, state.rng.cond, cfg, state.cond_classes, swap_rng=state.rng.dual)
        parts = evaluate_objective(batch, state.model, dual_model, cfg, state.cond_classes)
        _abort_if_diverged(parts, state, batch, run_dir)
        state.optimizer.zero_grad()
        parts["total"].backward()
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
        state.optimizer.step()
        state.step += 1
        drift = parameter_drift(state.model, dual_model)
        row = _record(state, parts, drift=drift, synced=t % cfg.sync_every == 0)
        if callback is not None:
            callback(state, row)
        if drift < cfg.converge_eps:
            state.converged = True
            break

    if run_dir is not None:
        save_checkpoint(run_dir, state, cfg, dataset)
        write_history(run_dir, state.history)
    return state


def train_full(
    dataset: Dataset,
    cfg: TrainConfig,
    run_dir: str | pathlib.Path | None = None,
    model_factory: Callable[[BackboneConfig], torch.nn.Module] | None = None,
) -> TrainState:
    """Stage 1 followed by stage 2 in one run directory."""
    state = train_stage1(dataset, cfg, run_dir, model_factory)
    return train_stage2(state, dataset, cfg, run_dir)
