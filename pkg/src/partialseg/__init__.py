"""Partially supervised multi-label segmentation with conditioned channel
pairs, compatibility-checked losses, and a dual closed-loop training stage."""

__version__ = "0.1.0"

from .labels import (
    SENTINEL,
    ClassSpace,
    LabelKind,
    LabelVector,
    PartialLabelMap,
    to_compat_label,
    to_weak_label,
)
from .losses import (
    LossConfig,
    compatible_ce_pixel,
    pairwise_compatible_loss,
    pairwise_loss_pixel,
    partial_ce_pixel,
    pixel_weights,
    weak_label_ce_pixel,
)
from .pairing import (
    ConditionalCoverageError,
    ConditionalPair,
    ConditionalSet,
    DualSample,
    PairwiseTarget,
    build_pairwise_target,
    class_probability_map,
    conditional_mask_stack,
    make_dual_sample,
    sample_conditional_set,
    split_full_labels,
)
from .verifier import (
    ArgminResult,
    CompatCase,
    CompatReport,
    argmin_set,
    box_grid,
    check_compatibility,
    simplex_grid,
)
from .data import (
    PHANTOM_CLASSES,
    Dataset,
    PhantomSpec,
    Record,
    generate_phantoms,
    load_dataset,
    normalize_image,
    read_image_png,
    read_label_png,
    read_manifest,
    render_phantom,
    simulate_partial,
    write_image_png,
    write_label_png,
    write_manifest,
)
from .network import (
    BackboneConfig,
    PairwiseUNet,
    assemble_segmentation,
    build_model,
    clone_parameters,
    count_parameters,
    forward_dual,
    forward_prim,
    load_parameters,
    pack_inputs,
    parameter_drift,
    parameters_equal,
)
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    TrainState,
    evaluate_objective,
    init_state,
    load_checkpoint,
    prepare_batch,
    resolve_seed,
    run_primal_steps,
    save_checkpoint,
    train_full,
    train_stage1,
    train_stage2,
    write_history,
)
from .metrics import EVAL_SEED, EvalReport, dice, evaluate, predict_sample
from .ablation import DEFAULT_PLAN, AblationRow, run_ablation, supervision_study
from .estimator import DualCompatibleSegmenter

__all__ = [
    "__version__",
    "SENTINEL",
    "ClassSpace",
    "LabelKind",
    "LabelVector",
    "PartialLabelMap",
    "to_compat_label",
    "to_weak_label",
    "LossConfig",
    "compatible_ce_pixel",
    "pairwise_loss_pixel",
    "weak_label_ce_pixel",
    "partial_ce_pixel",
    "pixel_weights",
    "pairwise_compatible_loss",
    "ConditionalCoverageError",
    "ConditionalPair",
    "ConditionalSet",
    "DualSample",
    "PairwiseTarget",
    "build_pairwise_target",
    "class_probability_map",
    "conditional_mask_stack",
    "make_dual_sample",
    "sample_conditional_set",
    "split_full_labels",
    "ArgminResult",
    "CompatCase",
    "CompatReport",
    "argmin_set",
    "box_grid",
    "simplex_grid",
    "check_compatibility",
    "PHANTOM_CLASSES",
    "Dataset",
    "PhantomSpec",
    "Record",
    "generate_phantoms",
    "load_dataset",
    "normalize_image",
    "read_image_png",
    "read_label_png",
    "read_manifest",
    "render_phantom",
    "simulate_partial",
    "write_image_png",
    "write_label_png",
    "write_manifest",
    "BackboneConfig",
    "PairwiseUNet",
    "assemble_segmentation",
    "build_model",
    "clone_parameters",
    "count_parameters",
    "forward_dual",
    "forward_prim",
    "load_parameters",
    "pack_inputs",
    "parameter_drift",
    "parameters_equal",
    "TrainConfig",
    "TrainingDiverged",
    "TrainState",
    "evaluate_objective",
    "init_state",
    "load_checkpoint",
    "prepare_batch",
    "resolve_seed",
    "run_primal_steps",
    "save_checkpoint",
    "train_full",
    "train_stage1",
    "train_stage2",
    "write_history",
    "EVAL_SEED",
    "EvalReport",
    "dice",
    "evaluate",
    "predict_sample",
    "DEFAULT_PLAN",
    "AblationRow",
    "run_ablation",
    "supervision_study",
    "DualCompatibleSegmenter",
]
