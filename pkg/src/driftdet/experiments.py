"""Experiment orchestration: baselines, adaptation runs, ablation grid,
and the unseen-domain generalization protocol.

All rows of a report run on identical splits and seeds; the only difference
between rows is the training variant.
"""

from __future__ import annotations

import traceback
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import StrongAugConfig, WeakAugConfig, weak_augment
from .data import Dataset, ExperimentSplits, dataset_fingerprint
from .errors import ConfigError
from .evaluation import AblationReport, EvalResult, evaluate_detector, extract_curves
from .model import ArchConfig, TwoStageDetector, detection_loss, sgd_step
from .training import (IterationMetrics, TrainConfig, Trainer, pretrain,
                       _derive_seed, _named_params, _check_finite)

DEFAULT_SWEEP = (0.0, 0.05, 0.1)


@dataclass
class RunResult:
    teacher: TwoStageDetector
    student: TwoStageDetector
    metrics: list[IterationMetrics]
    eval_records: list[dict] = field(default_factory=list)
    accessed_datasets: set[str] = field(default_factory=set)


def supervised_run(arch: ArchConfig, config: TrainConfig, train_set: Dataset,
                   iterations: int, weak_cfg: WeakAugConfig = WeakAugConfig(),
                   init: TwoStageDetector | None = None) -> RunResult:
    """Plain supervised detector training (source-only and oracle baselines)."""
    import copy

    if init is None:
        cfg = replace(config, burn_in_iterations=iterations)
        model, metrics = pretrain(arch, cfg, train_set, weak_cfg)
    else:
        model = copy.deepcopy(init)
        params = _named_params(model, "detector")
        opt_state: dict = {}
        metrics = []
        import time

        for it in range(iterations):
            t0 = time.perf_counter()
            rng = np.random.default_rng(_derive_seed(config.seed, 41, it))
            idx = rng.integers(0, len(train_set), size=config.batch_source)
            batch = [weak_augment(train_set.items[int(i)], weak_cfg,
                                  _derive_seed(config.seed, 43, it, j))[0]
                     for j, i in enumerate(idx)]
            loss, comps = detection_loss(model, batch)
            _check_finite(float(loss.detach()), it, comps)
            model.zero_grad()
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            sgd_step(params, grads, opt_state, config.lr, config.momentum,
                     config.weight_decay)
            metrics.append(IterationMetrics(
                iteration=it,
                rpn_cls=float(comps["rpn_cls"].detach()),
                rpn_reg=float(comps["rpn_reg"].detach()),
                roi_cls=float(comps["roi_cls"].detach()),
                roi_reg=float(comps["roi_reg"].detach()),
                l_sup=float(loss.detach()), l_unsup=0.0, l_dis=0.0,
                total=float(loss.detach()), pseudo_count=0,
                pseudo_fp_ratio=None, wall_time=time.perf_counter() - t0))
    return RunResult(teacher=model, student=model, metrics=metrics,
                     accessed_datasets={train_set.name or train_set.split})


def adaptation_run(pretrained: TwoStageDetector, config: TrainConfig,
                   splits: ExperimentSplits,
                   weak_cfg: WeakAugConfig = WeakAugConfig(),
                   strong_cfg: StrongAugConfig = StrongAugConfig(),
                   eval_set: Dataset | None = None,
                   with_fp_analysis: bool = True) -> RunResult:
    """One teacher-student adaptation run with optional periodic evaluation."""
    trainer = Trainer(
        pretrained, config, splits.source_train, splits.target_train,
        weak_cfg, strong_cfg,
        target_train_labels=splits.target_train_labels if with_fp_analysis else None)
    eval_records: list[dict] = []

    def hook(iteration, state):
        if eval_set is None:
            return
        model = state.student if config.disable_mutual else state.teacher
        res = evaluate_detector(model, eval_set)
        eval_records.append({"iteration": iteration, "mean_ap": res.mean_ap})

    state = trainer.adapt(eval_hook=hook if eval_set is not None else None)
    return RunResult(teacher=state.teacher, student=state.student,
                     metrics=state.metrics, eval_records=eval_records,
                     accessed_datasets=set(state.accessed_datasets))


def oracle_run(arch: ArchConfig, config: TrainConfig, splits: ExperimentSplits,
               iterations: int,
               weak_cfg: WeakAugConfig = WeakAugConfig()) -> RunResult:
    """Upper-bound baseline: trains on target-train WITH its sidecar labels.

    This is the one training path that may read the held-out labels; it does
    so explicitly by rebuilding a labeled copy of the target-train split.
    """
    labeled_items = []
    for img, annotations in zip(splits.target_train.items,
                                splits.target_train_labels):
        from .data import AnnotatedImage

        labeled_items.append(AnnotatedImage(
            pixels=img.pixels, annotations=list(annotations),
            domain=img.domain, depth=img.depth))
    labeled = Dataset(items=labeled_items, split="train",
                      domain=splits.target_train.domain, name="oracle_target_train",
                      shift=splits.target_train.shift)
    return supervised_run(arch, config, labeled, iterations, weak_cfg)


def run_ablations(arch: ArchConfig, config: TrainConfig, splits: ExperimentSplits,
                  weak_cfg: WeakAugConfig = WeakAugConfig(),
                  strong_cfg: StrongAugConfig = StrongAugConfig(),
                  sweep: tuple[float, ...] = DEFAULT_SWEEP,
                  with_eval_curves: bool = False,
                  rows: tuple[str, ...] | None = None) -> AblationReport:
    """Run the ablation grid on identical splits and seeds.

    Rows: source_only, oracle, full_AT, no_dis, no_ws_aug, no_mutual, and one
    sweep_<value> row per adversarial-weight sweep point. Failures are
    recorded per row; remaining rows still run.
    """
    report = AblationReport(split_fingerprint=dataset_fingerprint(splits.target_test))
    total_iters = config.burn_in_iterations + config.adapt_iterations
    base = pretrain(arch, config, splits.source_train, weak_cfg)[0]
    eval_set = splits.target_test if with_eval_curves else None

    def variant_config(**kw) -> TrainConfig:
        return replace(config, **kw)

    plans: dict[str, tuple] = {
        "source_only": ("supervised", splits.source_train, None),
        "oracle": ("oracle", None, None),
        "full_AT": ("adapt", variant_config(), "teacher"),
        "no_dis": ("adapt", variant_config(disable_dis=True), "teacher"),
        "no_ws_aug": ("adapt", variant_config(disable_ws_aug=True), "teacher"),
        "no_mutual": ("adapt", variant_config(disable_mutual=True), "student"),
    }
    for lam in sweep:
        plans[f"sweep_{lam:g}"] = (
            "adapt", variant_config(lambda_dis=lam, disable_dis=lam == 0.0),
            "teacher")
    if rows is not None:
        plans = {k: v for k, v in plans.items() if k in rows}

    for name, plan in plans.items():
        kind = plan[0]
        try:
            if kind == "supervised":
                run = supervised_run(arch, config, plan[1],
                                     config.adapt_iterations, weak_cfg, init=base)
                model, which = run.teacher, "student"
            elif kind == "oracle":
                run = oracle_run(arch, config, splits, total_iters, weak_cfg)
                model, which = run.teacher, "student"
            else:
                run = adaptation_run(base, plan[1], splits, weak_cfg, strong_cfg,
                                     eval_set=eval_set)
                which = plan[2]
                model = run.teacher if which == "teacher" else run.student
            report.rows[name] = evaluate_detector(model, splits.target_test,
                                                  which=which)
            report.curves[name] = extract_curves(
                [m.log_record() for m in run.metrics], run.eval_records)
        except Exception as exc:  # record and continue with the other rows
            report.failures[name] = "".join(
                traceback.format_exception_only(type(exc), exc)).strip()
    return report


def domain_generalization_eval(arch: ArchConfig, config: TrainConfig,
                               splits: ExperimentSplits,
                               weak_cfg: WeakAugConfig = WeakAugConfig(),
                               strong_cfg: StrongAugConfig = StrongAugConfig()
                               ) -> tuple[EvalResult, RunResult]:
    """Adapt on (source, unlabeled target A), evaluate on unseen domain B."""
    if splits.third_test is None:
        raise ConfigError("generalization protocol needs a third-domain test set")
    if splits.third_test.shift == splits.target_train.shift:
        raise ConfigError("domains A and B must carry distinct shifts")
    base = pretrain(arch, config, splits.source_train, weak_cfg)[0]
    run = adaptation_run(base, config, splits, weak_cfg, strong_cfg)
    third_name = splits.third_test.name or "third_test"
    if third_name in run.accessed_datasets:
        raise ConfigError("unseen domain B leaked into training")
    result = evaluate_detector(run.teacher, splits.third_test, which="teacher")
    return result, run
