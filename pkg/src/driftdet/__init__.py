"""driftdet: cross-domain object detection with a teacher-student adapter.

Synthetic two-domain shape scenes, a compact two-stage detector, gradient-
reversal domain alignment, pseudo-label mutual learning, and a VOC-style
evaluation and ablation harness.
"""

from .adversary import Discriminator, GrlSpec, adversarial_contribution, grl
from .augment import StrongAugConfig, WeakAugConfig, strong_augment, weak_augment
from .boxes import anchor_grid, decode_deltas, encode_deltas, iou_matrix, nms
from .config import (DataConfig, ExperimentConfig, load_config, parse_config,
                     save_config)
from .data import (AnnotatedImage, BoundingBox, Dataset, Detection,
                   ExperimentSplits, SceneSpec, apply_domain_shift, box_iou,
                   build_experiment, generate_scene, load_dataset, save_dataset)
from .errors import ConfigError, DataError, DriftDetError, NumericalError
from .estimators import AdaptiveDetector, SourceDetector
from .evaluation import (EvalResult, average_precision, evaluate_detector,
                         false_positive_ratio, mean_ap)
from .experiments import (adaptation_run, domain_generalization_eval,
                          oracle_run, run_ablations, supervised_run)
from .model import (ArchConfig, TwoStageDetector, detection_loss, micro_arch,
                    sgd_step, supervised_loss)
from .training import (TrainConfig, Trainer, ema_update, generate_pseudo_labels,
                       load_checkpoint, pretrain, restore_trainer,
                       save_checkpoint, total_loss)

__version__ = "0.1.0"
