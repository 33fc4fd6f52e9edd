"""Command-line entry point.

One experiment lives in one directory:

    out/
      config.yaml          # immutable snapshot, written by gen-data
      datasets/<split>/    # PNG images + annotations.jsonl per split
      datasets/target_train_labels.jsonl   # analysis-only sidecar
      checkpoints/         # named-array archives
      metrics.log          # one record per training iteration
      eval.log             # periodic-eval records
      reports/ curves/

Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ExperimentConfig, dump_config, load_config, save_config
from .data import (ExperimentSplits, build_experiment, dataset_fingerprint,
                   load_dataset, load_sidecar, save_dataset, save_sidecar)
from .errors import ConfigError, DataError, DriftDetError, NumericalError
from .evaluation import evaluate_detector, extract_curves
from .experiments import run_ablations
from .plots import plot_series, write_curves_csv
from .training import (Trainer, load_checkpoint, pretrain, read_metrics_log,
                       restore_trainer, save_checkpoint,
                       save_detector_checkpoint, write_metrics_log)

SPLIT_NAMES = ("source_train", "target_train", "source_test", "target_test")


@click.group()
def cli():
    """Cross-domain detector adaptation experiments on synthetic shape scenes."""


def _config_for(config_path: str, seed: int | None) -> ExperimentConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if cfg.arch.image_size != cfg.scene.image_size:
        raise ConfigError("arch.image_size must equal scene.image_size")
    if cfg.arch.num_classes != cfg.scene.num_classes:
        raise ConfigError("arch.num_classes must equal scene.num_classes")
    return cfg


def _snapshot(cfg: ExperimentConfig, out: Path) -> None:
    snap = out / "config.yaml"
    if snap.exists():
        if snap.read_text() != dump_config(cfg):
            raise ConfigError(f"{snap} exists with a different configuration")
    else:
        save_config(cfg, snap)


def _load_splits(out: Path, with_labels: bool = False,
                 with_third: bool = False) -> ExperimentSplits:
    base = out / "datasets"
    datasets = {}
    for name in SPLIT_NAMES:
        datasets[name] = load_dataset(base / name)
    labels = [[] for _ in datasets["target_train"].items]
    if with_labels:
        labels = load_sidecar(base / "target_train_labels.jsonl")
    third = None
    if with_third and (base / "third_test").exists():
        third = load_dataset(base / "third_test")
    return ExperimentSplits(datasets["source_train"], datasets["target_train"],
                            datasets["source_test"], datasets["target_test"],
                            labels, third)


config_opt = click.option("--config", "-c", "config_path", required=True,
                          type=click.Path(exists=False))
out_opt = click.option("--out", "-o", "out_dir", required=True,
                       type=click.Path())
seed_opt = click.option("--seed", type=int, default=None,
                        help="Override the configured seed everywhere.")


@cli.command("gen-data")
@config_opt
@out_opt
@seed_opt
@click.option("--force", is_flag=True, help="Allow writing into a nonempty directory.")
def cmd_gen_data(config_path, out_dir, seed, force):
    """Generate all splits and the target-train label sidecar."""
    cfg = _config_for(config_path, seed)
    out = Path(out_dir)
    base = out / "datasets"
    if base.exists() and any(base.iterdir()) and not force:
        raise ConfigError(f"{base} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)
    splits = build_experiment(cfg.scene, cfg.data.n_source, cfg.data.n_target,
                              cfg.data.n_test, cfg.data.third_shift,
                              cfg.data.third_severity)
    manifest = {}
    pairs = [("source_train", splits.source_train),
             ("target_train", splits.target_train),
             ("source_test", splits.source_test),
             ("target_test", splits.target_test)]
    if splits.third_test is not None:
        pairs.append(("third_test", splits.third_test))
    for name, ds in pairs:
        save_dataset(ds, base / name)
        manifest[name] = {"count": len(ds), "fingerprint": dataset_fingerprint(ds)}
    save_sidecar(splits.target_train_labels, base / "target_train_labels.jsonl")
    (base / "manifest.json").write_text(json.dumps(manifest, indent=2))
    click.echo(f"wrote {len(pairs)} splits to {base}")


@cli.command("pretrain")
@config_opt
@out_opt
@seed_opt
@click.option("--dry-run", is_flag=True)
def cmd_pretrain(config_path, out_dir, seed, dry_run):
    """Supervised burn-in on the source-train split."""
    cfg = _config_for(config_path, seed)
    out = Path(out_dir)
    splits = _load_splits(out)
    if dry_run:
        click.echo("config and datasets valid; skipping training (--dry-run)")
        return
    model, metrics = pretrain(cfg.arch, cfg.train, splits.source_train,
                              cfg.weak_aug)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_detector_checkpoint(out / "checkpoints" / "pretrain.npz", model)
    write_metrics_log(metrics, out / "metrics_pretrain.log")
    click.echo(f"burn-in finished: {len(metrics)} iterations; "
               f"checkpoint at checkpoints/pretrain.npz")


@cli.command("adapt")
@config_opt
@out_opt
@seed_opt
@click.option("--init", "init_ckpt", type=click.Path(), default=None,
              help="Initial checkpoint (default: checkpoints/pretrain.npz).")
@click.option("--resume", "resume_ckpt", type=click.Path(), default=None,
              help="Resume a previously interrupted adaptation run.")
@click.option("--dry-run", is_flag=True)
def cmd_adapt(config_path, out_dir, seed, init_ckpt, resume_ckpt, dry_run):
    """Teacher-student adaptation with adversarial alignment."""
    cfg = _config_for(config_path, seed)
    out = Path(out_dir)
    splits = _load_splits(out)  # the sidecar is never read on this path
    if dry_run:
        click.echo("config and datasets valid; skipping training (--dry-run)")
        return
    prior_records: list[dict] = []
    if resume_ckpt is not None:
        trainer = restore_trainer(resume_ckpt, cfg.train, splits.source_train,
                                  splits.target_train, cfg.weak_aug, cfg.strong_aug)
        log_path = out / "metrics.log"
        if log_path.exists():
            prior_records = [r for r in read_metrics_log(log_path)
                             if r["iteration"] < trainer.state.iteration]
    else:
        init_path = Path(init_ckpt) if init_ckpt else out / "checkpoints" / "pretrain.npz"
        _, student, _, _, _ = load_checkpoint(init_path, cfg.arch)
        trainer = Trainer(student, cfg.train, splits.source_train,
                          splits.target_train, cfg.weak_aug, cfg.strong_aug)
    eval_records: list[dict] = []
    eval_path = out / "eval.log"

    def hook(iteration, state):
        model = state.student if cfg.train.disable_mutual else state.teacher
        res = evaluate_detector(model, splits.target_test)
        eval_records.append({"iteration": iteration, "mean_ap": res.mean_ap})

    state = trainer.adapt(out_dir=out / "checkpoints", eval_hook=hook)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_checkpoint(out / "checkpoints" / "final.npz", trainer)
    all_records = prior_records + [m.log_record() for m in state.metrics]
    with open(out / "metrics.log", "w") as fh:
        for rec in all_records:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "metrics.log.timing", "w") as fh:
        for m in state.metrics:
            fh.write(json.dumps({"iteration": m.iteration,
                                 "wall_time": m.wall_time}) + "\n")
    with open(eval_path, "w") as fh:
        for rec in eval_records:
            fh.write(json.dumps(rec) + "\n")
    click.echo(f"adaptation finished at iteration {state.iteration}")


@cli.command("eval")
@config_opt
@out_opt
@seed_opt
@click.option("--checkpoint", "ckpt", required=True, type=click.Path())
@click.option("--split", "split_name", default="target_test")
@click.option("--which", type=click.Choice(["teacher", "student"]),
              default="teacher")
def cmd_eval(config_path, out_dir, seed, ckpt, split_name, which):
    """Evaluate a checkpoint on one split; writes a report JSON."""
    cfg = _config_for(config_path, seed)
    out = Path(out_dir)
    known = SPLIT_NAMES + ("third_test",)
    if split_name not in known:
        raise DataError(f"unknown split {split_name!r}; expected one of {known}")
    ds_path = out / "datasets" / split_name
    dataset = load_dataset(ds_path)
    teacher, student, _, _, _ = load_checkpoint(ckpt, cfg.arch)
    model = teacher if which == "teacher" else student
    result = evaluate_detector(model, dataset, which=which)
    report = {
        "split": split_name,
        "which": which,
        "split_fingerprint": result.split_fingerprint,
        "per_class_ap": {str(k): v for k, v in result.per_class.items()},
        "mean_ap": result.mean_ap,
        "num_detections": result.num_detections,
        "num_ground_truth": result.num_ground_truth,
    }
    (out / "reports").mkdir(exist_ok=True)
    path = out / "reports" / f"eval_{split_name}_{which}.json"
    path.write_text(json.dumps(report, indent=2))
    for k, v in result.per_class.items():
        click.echo(f"  class {k}: AP = {'undefined' if v is None else f'{v:.4f}'}")
    click.echo(f"mAP({split_name}, {which}) = {result.mean_ap:.4f}  -> {path}")


@cli.command("ablate")
@config_opt
@out_opt
@seed_opt
@click.option("--rows", default=None,
              help="Comma-separated subset of ablation rows to run.")
def cmd_ablate(config_path, out_dir, seed, rows):
    """Run the ablation grid; writes the report, curve CSVs, and SVG plots.

    The oracle row and the pseudo-label quality curves read the target-train
    label sidecar; this is the declared analysis-only access.
    """
    cfg = _config_for(config_path, seed)
    out = Path(out_dir)
    splits = _load_splits(out, with_labels=True)
    row_filter = tuple(rows.split(",")) if rows else None
    report = run_ablations(cfg.arch, cfg.train, splits, cfg.weak_aug,
                           cfg.strong_aug, with_eval_curves=True,
                           rows=row_filter)
    (out / "reports").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    doc = {"split_fingerprint": report.split_fingerprint,
           "rows": {name: {"mean_ap": res.mean_ap, "which": res.which_model,
                           "per_class_ap": {str(k): v
                                            for k, v in res.per_class.items()}}
                    for name, res in report.rows.items()},
           "failures": report.failures}
    (out / "reports" / "ablation.json").write_text(json.dumps(doc, indent=2))
    map_series, fp_series = {}, {}
    for name, series in report.curves.items():
        write_curves_csv(series, out / "curves" / f"{name}.csv")
        if "eval_iteration" in series:
            map_series[name] = (series["eval_iteration"], series["eval_map"])
        if "pseudo_fp_ratio" in series:
            fp_series[name] = (series["iteration"], series["pseudo_fp_ratio"])
    if map_series:
        plot_series(map_series, "target-test mAP", "mAP",
                    out / "curves" / "map_vs_iteration.svg")
    if fp_series:
        plot_series(fp_series, "pseudo-label false-positive ratio", "FP ratio",
                    out / "curves" / "fp_ratio_vs_iteration.svg")
    click.echo(f"{'row':<12} {'model':<8} mAP")
    for name, res in report.rows.items():
        click.echo(f"{name:<12} {res.which_model:<8} {res.mean_ap:.4f}")
    for name, msg in report.failures.items():
        click.echo(f"{name:<12} FAILED: {msg}")


@cli.command("curves")
@out_opt
def cmd_curves(out_dir):
    """Extract CSV curves and SVG plots from an experiment's logs."""
    out = Path(out_dir)
    log_path = out / "metrics.log"
    if not log_path.exists():
        raise DataError(f"no metrics log at {log_path}")
    records = read_metrics_log(log_path)
    eval_records = []
    if (out / "eval.log").exists():
        eval_records = read_metrics_log(out / "eval.log")
    series = extract_curves(records, eval_records)
    (out / "curves").mkdir(exist_ok=True)
    write_curves_csv(series, out / "curves" / "training.csv")
    loss_plot = {k: (series["iteration"], series[k])
                 for k in ("l_sup", "l_unsup", "l_dis", "total") if k in series}
    plot_series(loss_plot, "training losses", "loss",
                out / "curves" / "losses.svg")
    if "eval_iteration" in series:
        plot_series({"mAP": (series["eval_iteration"], series["eval_map"])},
                    "target-test mAP", "mAP", out / "curves" / "map.svg")
    click.echo(f"curves written to {out / 'curves'}")


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(2)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
