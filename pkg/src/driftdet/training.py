"""Teacher-student adaptation engine.

One training iteration: weak-augment target images and let the teacher emit
pseudo labels; strong-augment both domains for the student; combine the
supervised, pseudo-label, and domain-classification losses; take one SGD step
on student + discriminator; fold the student into the teacher by EMA.

All randomness is derived from (config.seed, iteration), so a run resumed
from a checkpoint continues exactly where the uninterrupted run would be.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversary import Discriminator, GrlSpec, adversarial_contribution
from .augment import StrongAugConfig, WeakAugConfig, strong_augment, weak_augment
from .data import AnnotatedImage, BoundingBox, Dataset, Detection
from .errors import ConfigError, DataError, NumericalError
from .model import ArchConfig, TwoStageDetector, detection_loss, sgd_step, to_tensor


@dataclass(frozen=True)
class TrainConfig:
    lambda_unsup: float = 1.0
    lambda_dis: float = 0.1
    confidence_threshold: float = 0.8
    ema_alpha: float = 0.996
    lr: float = 0.01
    adapt_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0005
    burn_in_iterations: int = 500
    adapt_iterations: int = 2000
    batch_source: int = 8
    batch_target: int = 8
    nms_iou: float = 0.5
    seed: int = 1
    disable_dis: bool = False
    disable_ws_aug: bool = False
    disable_mutual: bool = False
    checkpoint_every: int = 500
    eval_every: int = 100

    def __post_init__(self):
        if self.lambda_unsup < 0 or self.lambda_dis < 0:
            raise ConfigError("loss weights must be >= 0")
        for name in ("confidence_threshold", "ema_alpha", "nms_iou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} outside [0, 1]")
        if self.lr < 0 or self.burn_in_iterations < 0 or self.adapt_iterations < 0:
            raise ConfigError("negative lr or iteration count")
        if self.adapt_lr is not None and self.adapt_lr < 0:
            raise ConfigError("negative adapt_lr")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be >= 1")

    @property
    def effective_adapt_lr(self) -> float:
        """Learning rate for the adaptation phase; burn-in always uses lr."""
        return self.lr if self.adapt_lr is None else self.adapt_lr


@dataclass
class IterationMetrics:
    iteration: int
    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float
    l_sup: float
    l_unsup: float
    l_dis: float
    total: float
    pseudo_count: int
    pseudo_fp_ratio: float | None
    wall_time: float

    LOGGED_FIELDS = ("iteration", "rpn_cls", "rpn_reg", "roi_cls", "roi_reg",
                     "l_sup", "l_unsup", "l_dis", "total", "pseudo_count",
                     "pseudo_fp_ratio")

    def log_record(self) -> dict:
        # wall_time goes to a separate timing log so metrics stay deterministic
        return {k: getattr(self, k) for k in self.LOGGED_FIELDS}


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts])
               .generate_state(1)[0])


def total_loss(l_sup: float, l_unsup: float, l_dis: float,
               lambda_unsup: float, lambda_dis: float) -> float:
    """Weighted sum of the three training-stream losses."""
    return l_sup + lambda_unsup * l_unsup + lambda_dis * l_dis


def duplicate(model: TwoStageDetector) -> tuple[TwoStageDetector, TwoStageDetector]:
    """Deep-copy a detector into independent (teacher, student) twins."""
    teacher = copy.deepcopy(model)
    student = copy.deepcopy(model)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher, student


@torch.no_grad()
def ema_update(teacher: TwoStageDetector, student: TwoStageDetector,
               alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, element-wise."""
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ConfigError("teacher/student parameter sets differ")
    for k, t in t_state.items():
        t.mul_(alpha).add_((1.0 - alpha) * s_state[k])


def generate_pseudo_labels(teacher: TwoStageDetector,
                           weak_images: list[AnnotatedImage],
                           confidence_threshold: float,
                           nms_iou: float) -> list[list[Detection]]:
    """Teacher inference with per-class NMS and score thresholding."""
    return [teacher.detect(img.pixels, score_threshold=confidence_threshold,
                           nms_iou=nms_iou)
            for img in weak_images]


def unsupervised_loss(student: TwoStageDetector,
                      strong_images: list[AnnotatedImage],
                      pseudo: list[list[Detection]],
                      features: torch.Tensor | None = None):
    """Classification-only detector loss against pseudo boxes."""
    annotations = [[(d.box, d.label) for d in dets] for dets in pseudo]
    return detection_loss(student, strong_images, classification_only=True,
                          override_annotations=annotations)


@dataclass
class TrainerState:
    teacher: TwoStageDetector
    student: TwoStageDetector
    discriminator: Discriminator
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    iteration: int = 0
    metrics: list[IterationMetrics] = field(default_factory=list)
    accessed_datasets: set[str] = field(default_factory=set)


def _named_params(module: torch.nn.Module, prefix: str):
    return {f"{prefix}/{name}": p for name, p in module.named_parameters()}


def _check_finite(value: float, iteration: int, components: dict) -> None:
    if not math.isfinite(value):
        dump = {k: float(v) for k, v in components.items()}
        raise NumericalError(
            f"non-finite loss at iteration {iteration}: {dump}")


def pretrain(arch: ArchConfig, config: TrainConfig, source_train: Dataset,
             weak_cfg: WeakAugConfig = WeakAugConfig(),
             log=None) -> tuple[TwoStageDetector, list[IterationMetrics]]:
    """Supervised burn-in on labeled source data only."""
    model = TwoStageDetector(arch, seed=config.seed)
    opt_state: dict[str, torch.Tensor] = {}
    params = _named_params(model, "detector")
    metrics: list[IterationMetrics] = []
    for it in range(config.burn_in_iterations):
        t0 = time.perf_counter()
        rng = np.random.default_rng(_derive_seed(config.seed, 11, it))
        idx = rng.integers(0, len(source_train), size=config.batch_source)
        batch = [weak_augment(source_train.items[int(i)], weak_cfg,
                              _derive_seed(config.seed, 13, it, j))[0]
                 for j, i in enumerate(idx)]
        loss, comps = detection_loss(model, batch)
        _check_finite(float(loss.detach()), it, comps)
        model.zero_grad()
        loss.backward()
        grads = {name: p.grad for name, p in params.items()}
        sgd_step(params, grads, opt_state, config.lr, config.momentum,
                 config.weight_decay)
        m = IterationMetrics(
            iteration=it,
            rpn_cls=float(comps["rpn_cls"].detach()),
            rpn_reg=float(comps["rpn_reg"].detach()),
            roi_cls=float(comps["roi_cls"].detach()),
            roi_reg=float(comps["roi_reg"].detach()),
            l_sup=float(loss.detach()), l_unsup=0.0, l_dis=0.0,
            total=float(loss.detach()), pseudo_count=0, pseudo_fp_ratio=None,
            wall_time=time.perf_counter() - t0)
        metrics.append(m)
        if log is not None:
            log(m)
    return model, metrics


def _unflip(dets: list[Detection], flipped: bool, width: float) -> list[Detection]:
    if not flipped:
        return dets
    return [Detection(box=d.box.flipped(width), label=d.label, score=d.score)
            for d in dets]


class Trainer:
    """Owns the teacher/student/discriminator triple and the iteration loop."""

    def __init__(self, pretrained: TwoStageDetector, config: TrainConfig,
                 source_train: Dataset, target_train: Dataset,
                 weak_cfg: WeakAugConfig = WeakAugConfig(),
                 strong_cfg: StrongAugConfig = StrongAugConfig(),
                 grl_spec: GrlSpec = GrlSpec(),
                 target_train_labels=None):
        if target_train.domain == source_train.domain:
            raise ConfigError("source and target datasets share a domain tag")
        teacher, student = duplicate(pretrained)
        discriminator = Discriminator(
            in_channels=pretrained.arch.stem_channels[-1],
            seed=_derive_seed(config.seed, 17))
        self.state = TrainerState(teacher, student, discriminator)
        self.config = config
        self.arch = pretrained.arch
        self.source_train = source_train
        self.target_train = target_train
        self.weak_cfg = weak_cfg
        self.strong_cfg = strong_cfg
        self.grl_spec = grl_spec
        # analysis-only ground truth for the pseudo-label FP ratio
        self._target_labels = target_train_labels

    @property
    def adversary_active(self) -> bool:
        return not self.config.disable_dis and self.config.lambda_dis > 0

    def _sample(self, dataset: Dataset, count: int, stream: int, iteration: int):
        rng = np.random.default_rng(
            _derive_seed(self.config.seed, 100 + stream, iteration))
        self.state.accessed_datasets.add(dataset.name or dataset.split)
        idx = [int(i) for i in rng.integers(0, len(dataset), size=count)]
        return [dataset.items[i] for i in idx], idx

    def train_iteration(self) -> IterationMetrics:
        cfg = self.config
        st = self.state
        it = st.iteration
        t0 = time.perf_counter()

        source_batch, _ = self._sample(self.source_train, cfg.batch_source, 1, it)
        target_batch, target_idx = self._sample(self.target_train,
                                                cfg.batch_target, 2, it)

        # target stream: weak view for the teacher, strong view for the student
        weak_targets, flips = [], []
        for j, img in enumerate(target_batch):
            w, f = weak_augment(img, self.weak_cfg, _derive_seed(cfg.seed, 21, it, j))
            weak_targets.append(w)
            flips.append(f)
        strong_targets = [strong_augment(w, self.strong_cfg,
                                         _derive_seed(cfg.seed, 23, it, j))
                          for j, w in enumerate(weak_targets)]

        pseudo: list[list[Detection]] = [[] for _ in target_batch]
        if not cfg.disable_mutual:
            # the no-weak-strong ablation feeds the teacher the student's view
            teacher_inputs = strong_targets if cfg.disable_ws_aug else weak_targets
            pseudo = generate_pseudo_labels(st.teacher, teacher_inputs,
                                            cfg.confidence_threshold, cfg.nms_iou)

        # source stream: flip with labels, then photometric strong view
        strong_sources = []
        for j, img in enumerate(source_batch):
            w, _ = weak_augment(img, self.weak_cfg, _derive_seed(cfg.seed, 25, it, j))
            strong_sources.append(
                strong_augment(w, self.strong_cfg, _derive_seed(cfg.seed, 27, it, j)))

        l_sup_t, comps = detection_loss(st.student, strong_sources)
        loss = l_sup_t
        l_unsup_t = None
        if not cfg.disable_mutual:
            l_unsup_t, _ = unsupervised_loss(st.student, strong_targets, pseudo)
            loss = loss + cfg.lambda_unsup * l_unsup_t
        l_dis_t = None
        if self.adversary_active:
            dtype = next(st.student.parameters()).dtype
            src_feats = st.student.encode(
                torch.stack([to_tensor(i.pixels, dtype) for i in strong_sources]))
            tgt_feats = st.student.encode(
                torch.stack([to_tensor(i.pixels, dtype) for i in strong_targets]))
            l_dis_t = adversarial_contribution(st.discriminator, src_feats,
                                               tgt_feats, self.grl_spec)
            loss = loss + cfg.lambda_dis * l_dis_t

        l_sup = float(l_sup_t.detach())
        l_unsup = float(l_unsup_t.detach()) if l_unsup_t is not None else 0.0
        l_dis = float(l_dis_t.detach()) if l_dis_t is not None else 0.0
        _check_finite(total_loss(l_sup, l_unsup, l_dis, cfg.lambda_unsup,
                                 cfg.lambda_dis), it,
                      {"l_sup": l_sup, "l_unsup": l_unsup, "l_dis": l_dis})

        params = _named_params(st.student, "student")
        if self.adversary_active:
            params.update(_named_params(st.discriminator, "discriminator"))
        st.student.zero_grad()
        st.discriminator.zero_grad()
        loss.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        sgd_step(params, grads, st.optimizer_state, cfg.effective_adapt_lr,
                 cfg.momentum, cfg.weight_decay)
        if not cfg.disable_mutual:
            ema_update(st.teacher, st.student, cfg.ema_alpha)

        fp_ratio = None
        if self._target_labels is not None and not cfg.disable_mutual:
            from .evaluation import false_positive_ratio

            originals = [
                _unflip(dets, flip, self.arch.image_size)
                for dets, flip in zip(pseudo, flips)]
            gts = [self._target_labels[i] for i in target_idx]
            fp_ratio, _ = false_positive_ratio(originals, gts)

        metrics = IterationMetrics(
            iteration=it,
            rpn_cls=float(comps["rpn_cls"].detach()),
            rpn_reg=float(comps["rpn_reg"].detach()),
            roi_cls=float(comps["roi_cls"].detach()),
            roi_reg=float(comps["roi_reg"].detach()),
            l_sup=l_sup, l_unsup=l_unsup, l_dis=l_dis,
            total=total_loss(l_sup, l_unsup, l_dis, cfg.lambda_unsup,
                             cfg.lambda_dis),
            pseudo_count=sum(len(p) for p in pseudo),
            pseudo_fp_ratio=fp_ratio,
            wall_time=time.perf_counter() - t0)
        st.metrics.append(metrics)
        st.iteration += 1
        return metrics

    def adapt(self, out_dir: str | Path | None = None,
              eval_hook=None, log=None) -> TrainerState:
        """Run the configured number of adaptation iterations."""
        cfg = self.config
        while self.state.iteration < cfg.adapt_iterations:
            m = self.train_iteration()
            if log is not None:
                log(m)
            it = self.state.iteration
            if eval_hook is not None and cfg.eval_every > 0 \
                    and it % cfg.eval_every == 0:
                eval_hook(it, self.state)
            if out_dir is not None and cfg.checkpoint_every > 0 \
                    and it % cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"checkpoint_{it:06d}.npz", self)
        return self.state


# ---------------------------------------------------------------------------
# checkpointing


def _state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def save_checkpoint(path: str | Path, trainer: "Trainer") -> None:
    """Atomic named-array archive: teacher, student, discriminator, optimizer."""
    path = Path(path)
    arrays = {}
    st = trainer.state
    arrays.update(_state_arrays(st.teacher, "teacher"))
    arrays.update(_state_arrays(st.student, "student"))
    arrays.update(_state_arrays(st.discriminator, "discriminator"))
    for k, v in st.optimizer_state.items():
        arrays[f"optimizer/{k}"] = v.detach().cpu().numpy()
    meta = {"fingerprint": trainer.arch.fingerprint(),
            "iteration": st.iteration,
            "arch": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in trainer.arch.__dict__.items()}}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path.with_suffix(".tmp.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def save_detector_checkpoint(path: str | Path, model: TwoStageDetector) -> None:
    path = Path(path)
    arrays = _state_arrays(model, "teacher")
    arrays.update(_state_arrays(model, "student"))
    meta = {"fingerprint": model.arch.fingerprint(), "iteration": 0,
            "arch": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in model.arch.__dict__.items()}}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path.with_suffix(".tmp.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def _checkpoint_meta(archive) -> dict:
    return json.loads(bytes(archive["meta"]).decode())


def _arch_from_meta(meta: dict) -> ArchConfig:
    kw = dict(meta["arch"])
    for key in ("stem_channels", "anchor_scales"):
        kw[key] = tuple(kw[key])
    return ArchConfig(**kw)


def load_checkpoint(path: str | Path, arch: ArchConfig | None = None):
    """Load (teacher, student, discriminator_state, optimizer_state, iteration).

    Verifies the architecture fingerprint when an expected arch is given.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with np.load(path) as archive:
        meta = _checkpoint_meta(archive)
        stored_arch = _arch_from_meta(meta)
        if arch is not None and arch.fingerprint() != meta["fingerprint"]:
            raise DataError(
                f"checkpoint fingerprint {meta['fingerprint']} does not match "
                f"the configured architecture {arch.fingerprint()}")
        groups: dict[str, dict[str, np.ndarray]] = {}
        for key in archive.files:
            if key == "meta":
                continue
            prefix, _, rest = key.partition("/")
            groups.setdefault(prefix, {})[rest] = archive[key]
    teacher = TwoStageDetector(stored_arch)
    student = TwoStageDetector(stored_arch)
    teacher.load_state_dict({k: torch.from_numpy(v.copy())
                             for k, v in groups["teacher"].items()})
    student.load_state_dict({k: torch.from_numpy(v.copy())
                             for k, v in groups["student"].items()})
    for p in teacher.parameters():
        p.requires_grad_(False)
    disc_state = {k: torch.from_numpy(v.copy())
                  for k, v in groups.get("discriminator", {}).items()}
    opt_state = {k: torch.from_numpy(v.copy())
                 for k, v in groups.get("optimizer", {}).items()}
    return teacher, student, disc_state, opt_state, meta["iteration"]


def restore_trainer(path: str | Path, config: TrainConfig, source_train: Dataset,
                    target_train: Dataset, weak_cfg=None, strong_cfg=None,
                    grl_spec: GrlSpec = GrlSpec(),
                    target_train_labels=None) -> Trainer:
    """Rebuild a Trainer mid-run from a checkpoint written by save_checkpoint."""
    teacher, student, disc_state, opt_state, iteration = load_checkpoint(path)
    trainer = Trainer(student, config, source_train, target_train,
                      weak_cfg or WeakAugConfig(), strong_cfg or StrongAugConfig(),
                      grl_spec, target_train_labels)
    trainer.state.teacher.load_state_dict(teacher.state_dict())
    if disc_state:
        trainer.state.discriminator.load_state_dict(disc_state)
    trainer.state.optimizer_state = opt_state
    trainer.state.iteration = iteration
    return trainer


def write_metrics_log(metrics: list[IterationMetrics], path: str | Path) -> None:
    """metrics.log holds the deterministic fields; timings go to a sidecar."""
    path = Path(path)
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m.log_record()) + "\n")
    with open(path.with_suffix(".timing"), "w") as fh:
        for m in metrics:
            fh.write(json.dumps({"iteration": m.iteration,
                                 "wall_time": m.wall_time}) + "\n")


def read_metrics_log(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"metrics log line {lineno}: {exc}") from exc
    return out
