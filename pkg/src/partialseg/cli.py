"""Command-line interface.

Exit codes: 0 on success, 2 for configuration/usage errors, 3 for runtime
failures. The PARTIALSEG_SEED environment variable overrides every configured
training seed.
"""
from __future__ import annotations

import dataclasses
import json
import pathlib
import sys

import click

from .ablation import DEFAULT_PLAN, format_report_table, run_ablation, supervision_study
from .data import PhantomSpec, generate_phantoms, load_dataset, simulate_partial, write_label_png
from .labels import ClassSpace
from .metrics import EVAL_SEED, evaluate, predict_sample
from .trainer import TrainConfig, load_checkpoint, train_full, train_stage1
from .verifier import CompatCase, check_compatibility


def _train_config(config_path: str | None, seed: int | None, **overrides) -> TrainConfig:
    fields = {}
    if config_path is not None:
        payload = json.loads(pathlib.Path(config_path).read_text())
        if not isinstance(payload, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"{config_path}: unknown config keys {sorted(unknown)}")
        fields.update(payload)
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    if seed is not None:
        fields["seed"] = seed
    return TrainConfig(**fields)


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise ValueError(f"{flag} must be a comma-separated integer list, got {text!r}") from None


@click.group()
def cli():
    """Partially supervised segmentation experiments."""


@cli.command("gen-data")
@click.option("--out-dir", required=True, type=click.Path(path_type=pathlib.Path))
@click.option("--count", type=int, default=None, help="Number of train phantoms.")
@click.option("--splits", type=str, default=None, help="train,val,test counts, e.g. 200,0,40.")
@click.option("--seed", type=int, default=0)
def gen_data(out_dir, count, splits, seed):
    """Generate a synthetic phantom dataset with a manifest."""
    if (count is None) == (splits is None):
        raise ValueError("give exactly one of --count or --splits")
    if splits is not None:
        numbers = _parse_int_list(splits, "--splits")
        if len(numbers) != 3:
            raise ValueError(f"--splits needs three counts, got {splits!r}")
        counts = dict(zip(("train", "val", "test"), numbers))
    else:
        counts = {"train": count}
    manifest = generate_phantoms(out_dir, counts, seed, PhantomSpec())
    click.echo(str(manifest))


@cli.command("simulate-partial")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--policy", required=True, type=str)
@click.option("--seed", type=int, default=0)
@click.option("--out-manifest", type=str, default="manifest_partial.json")
def simulate_partial_cmd(manifest_path, policy, seed, out_manifest):
    """Reduce fully annotated train records to partial annotations."""
    click.echo(str(simulate_partial(manifest_path, policy, seed, out_manifest)))


@cli.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--out-dir", required=True, type=click.Path(path_type=pathlib.Path))
@click.option("--stage", type=click.Choice(["1", "both"]), default="both")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None, help="Override stage-1 epochs.")
@click.option("--steps", type=int, default=None, help="Override stage-2 max steps.")
def train_cmd(manifest_path, out_dir, stage, config_path, seed, epochs, steps):
    """Run the one- or two-stage training pipeline into a run directory."""
    cfg = _train_config(config_path, seed, stage1_epochs=epochs, stage2_max_steps=steps)
    dataset = load_dataset(manifest_path, expand_full_train=True)
    if stage == "1":
        state = train_stage1(dataset, cfg, out_dir)
    else:
        state = train_full(dataset, cfg, out_dir)
    click.echo(f"finished at step {state.step} (stage {state.stage})")


@cli.command("predict")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--split", type=str, default="test")
@click.option("--out-dir", required=True, type=click.Path(path_type=pathlib.Path))
@click.option("--seed", type=int, default=EVAL_SEED, help="Conditional-sampling seed.")
def predict_cmd(checkpoint, manifest_path, split, out_dir, seed):
    """Write predicted label maps for a split as indexed PNGs."""
    model, meta = load_checkpoint(checkpoint)
    dataset = load_dataset(manifest_path)
    cond_classes = tuple(meta["conditional_classes"])
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = dataset.indices(split)
    if not indices:
        raise ValueError(f"split {split!r} is empty")
    for i in indices:
        _, labels = predict_sample(model, dataset, i, cond_classes, eval_seed=seed)
        write_label_png(out_dir / f"pred_{dataset.ids[i]}.png", labels, dataset.space.num_classes)
    click.echo(f"wrote {len(indices)} predictions to {out_dir}")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--split", type=str, default="test")
@click.option("--out-dir", type=click.Path(path_type=pathlib.Path), default=None)
@click.option("--seed", type=int, default=EVAL_SEED, help="Conditional-sampling seed.")
def eval_cmd(checkpoint, manifest_path, split, out_dir, seed):
    """Per-class Dice of a checkpoint on a fully annotated split."""
    model, meta = load_checkpoint(checkpoint)
    dataset = load_dataset(manifest_path)
    report = evaluate(
        model,
        dataset,
        split=split,
        cond_classes=tuple(meta["conditional_classes"]),
        eval_seed=seed,
        checkpoint=str(checkpoint),
    )
    if out_dir is not None:
        report.save(out_dir)
    click.echo(report.to_json())


@cli.command("verify-compat")
@click.option("--loss", "loss_id", required=True, type=click.Choice(["weak_ce", "compatible_ce", "partial_ce", "one_hot_ce"]))
@click.option("--m", "num_classes", required=True, type=int)
@click.option("--gt", "gt_class", required=True, type=int)
@click.option("--ann-a", required=True, type=str, help="Annotated classes of regime A, e.g. 0 or 0,2.")
@click.option("--ann-b", required=True, type=str, help="Annotated classes of regime B.")
@click.option("--grid-step", type=float, default=0.01)
@click.option("--tolerance", type=float, default=1e-9)
def verify_compat_cmd(loss_id, num_classes, gt_class, ann_a, ann_b, grid_step, tolerance):
    """Grid-search argmin sets under two annotation regimes and compare."""
    space = ClassSpace(tuple(f"class_{c}" for c in range(num_classes)))
    case = CompatCase(
        space=space,
        gt_class=gt_class,
        ann_a=frozenset(_parse_int_list(ann_a, "--ann-a")),
        ann_b=frozenset(_parse_int_list(ann_b, "--ann-b")),
        loss_id=loss_id,
        grid_step=grid_step,
        tolerance=tolerance,
    )
    click.echo(check_compatibility(case).to_json())


@cli.command("ablate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--out-dir", required=True, type=click.Path(path_type=pathlib.Path))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--rows", type=str, default=None, help="Comma-separated subset of row names.")
@click.option("--eval-seed", type=int, default=EVAL_SEED)
def ablate_cmd(manifest_path, out_dir, config_path, seed, rows, eval_seed):
    """Train and evaluate the component-ablation rows."""
    cfg = _train_config(config_path, seed)
    plan = DEFAULT_PLAN
    if rows is not None:
        wanted = [name.strip() for name in rows.split(",") if name.strip()]
        by_name = {row.name: row for row in DEFAULT_PLAN}
        missing = [n for n in wanted if n not in by_name]
        if missing:
            raise ValueError(f"unknown ablation rows {missing}; known: {sorted(by_name)}")
        plan = tuple(by_name[n] for n in wanted)
    dataset = load_dataset(manifest_path, expand_full_train=True)
    reports = run_ablation(dataset, cfg, plan, out_dir, eval_seed=eval_seed)
    click.echo(format_report_table(reports))


@cli.command("supervision-study")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=pathlib.Path))
@click.option("--out-dir", required=True, type=click.Path(path_type=pathlib.Path))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--fractions", type=str, default="1.0,0.8,0.6,0.4,0.2,0.0")
@click.option("--eval-seed", type=int, default=EVAL_SEED)
def supervision_study_cmd(manifest_path, out_dir, config_path, seed, fractions, eval_seed):
    """Sweep the fraction of fully annotated train records."""
    cfg = _train_config(config_path, None)
    try:
        fracs = tuple(float(f) for f in fractions.split(",") if f != "")
    except ValueError:
        raise ValueError(f"--fractions must be a comma-separated float list, got {fractions!r}") from None
    reports = supervision_study(manifest_path, cfg, fracs, out_dir, seed=seed, eval_seed=eval_seed)
    click.echo(format_report_table(reports))


def main(argv: list[str] | None = None) -> int:
    """Entry point mapping errors to exit codes (config 2, runtime 3)."""
    try:
        cli.main(args=argv, standalone_mode=True)
        return 0
    except SystemExit as e:
        raise e
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except Exception as e:  # runtime failures: IO, divergence, shape errors
        click.echo(f"error: {e}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
