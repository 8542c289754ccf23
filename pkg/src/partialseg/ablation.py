"""Component ablations and annotation-budget studies on a dataset.

Each ablation row toggles one ingredient on top of the previous one:
conditional input channels, the known-channel (compatible) cross-entropy,
the pairwise conditional term, and the dual fine-tuning stage. Rows that
share their stage-1 configuration reuse the trained stage-1 state, so the
dual row continues from exactly the parameters the no-dual row reports.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import pathlib

from .data import load_dataset, simulate_partial
from .metrics import EVAL_SEED, EvalReport, evaluate
from .trainer import TrainConfig, TrainState, train_stage1, train_stage2


@dataclasses.dataclass(frozen=True)
class AblationRow:
    name: str
    conditional_input: bool
    use_compatible: bool
    use_pairwise: bool
    use_dual: bool

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return dataclasses.replace(
            cfg,
            conditional_input=self.conditional_input,
            use_compatible=self.use_compatible,
            use_pairwise=self.use_pairwise,
        )

    def stage1_key(self) -> tuple:
        return (self.conditional_input, self.use_compatible, self.use_pairwise)


DEFAULT_PLAN = (
    AblationRow("baseline_partial_ce", conditional_input=False, use_compatible=False, use_pairwise=False, use_dual=False),
    AblationRow("cond_cce", conditional_input=True, use_compatible=True, use_pairwise=False, use_dual=False),
    AblationRow("cond_cce_pairwise", conditional_input=True, use_compatible=True, use_pairwise=True, use_dual=False),
    AblationRow("full_dual", conditional_input=True, use_compatible=True, use_pairwise=True, use_dual=True),
)


def run_ablation(
    dataset,
    base_cfg: TrainConfig,
    plan: tuple[AblationRow, ...] = DEFAULT_PLAN,
    out_dir: str | pathlib.Path | None = None,
    eval_split: str = "test",
    eval_seed: int = EVAL_SEED,
) -> dict[str, EvalReport]:
    """Train and evaluate every row of the plan on the same dataset."""
    names = [row.name for row in plan]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate ablation row names: {names}")
    out_dir = pathlib.Path(out_dir) if out_dir is not None else None
    stage1_cache: dict[tuple, TrainState] = {}
    reports: dict[str, EvalReport] = {}
    for row in plan:
        cfg = row.apply(base_cfg)
        run_dir = out_dir / "rows" / row.name if out_dir is not None else None
        key = row.stage1_key()
        if key in stage1_cache:
            state = copy.deepcopy(stage1_cache[key])
        else:
            state = train_stage1(dataset, cfg, run_dir)
            stage1_cache[key] = copy.deepcopy(state)
        if row.use_dual:
            state = train_stage2(state, dataset, cfg, run_dir)
        reports[row.name] = evaluate(
            state.model,
            dataset,
            split=eval_split,
            cond_classes=state.cond_classes,
            eval_seed=eval_seed,
            conditional_input=cfg.conditional_input,
            checkpoint=str(run_dir / "checkpoints" / f"step_{state.step}.pt") if run_dir else "",
        )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = {
            name: {"mean_dice": rep.mean_dice, "per_class": rep.per_class} for name, rep in reports.items()
        }
        (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return reports


def format_report_table(reports: dict[str, EvalReport]) -> str:
    names = list(reports)
    classes = list(next(iter(reports.values())).per_class) if reports else []
    width = max([len(n) for n in names + ["row"]])
    header = "row".ljust(width) + "".join(f"  {c:>12}" for c in classes) + f"  {'mean':>8}"
    lines = [header]
    for n in names:
        rep = reports[n]
        cells = "".join(f"  {rep.per_class[c]['mean']:>12.4f}" for c in classes)
        lines.append(n.ljust(width) + cells + f"  {rep.mean_dice:>8.4f}")
    return "\n".join(lines)


def supervision_study(
    manifest_path: str | pathlib.Path,
    base_cfg: TrainConfig,
    fractions: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4, 0.2, 0.0),
    out_dir: str | pathlib.Path | None = None,
    seed: int = 0,
    eval_split: str = "test",
    eval_seed: int = EVAL_SEED,
) -> dict[str, EvalReport]:
    """Sweep the fraction of train records kept fully annotated.

    Each fraction gets its own partial manifest (remaining records one-label
    round-robin); fully annotated records enter training split into one-label
    records per class. Returns a report per "full:part" setting.
    """
    from .trainer import train_full

    manifest_path = pathlib.Path(manifest_path)
    out_dir = pathlib.Path(out_dir) if out_dir is not None else None
    reports: dict[str, EvalReport] = {}
    for frac in fractions:
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {frac}")
        tag = f"full_{int(round(frac * 100)):03d}"
        partial = simulate_partial(
            manifest_path, f"ratio:{frac}", seed, out_manifest=f"manifest_{tag}.json"
        )
        dataset = load_dataset(partial, expand_full_train=True)
        run_dir = out_dir / "runs" / tag if out_dir is not None else None
        state = train_full(dataset, base_cfg, run_dir)
        reports[tag] = evaluate(
            state.model,
            dataset,
            split=eval_split,
            cond_classes=state.cond_classes,
            eval_seed=eval_seed,
            conditional_input=base_cfg.conditional_input,
        )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = {
            tag: {"mean_dice": rep.mean_dice, "per_class": rep.per_class} for tag, rep in reports.items()
        }
        (out_dir / "supervision.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return reports
