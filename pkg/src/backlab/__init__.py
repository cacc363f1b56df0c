"""Backdoor poisoning attacks, robust-training defenses, and an ACC/ASR
evaluation harness for image classifiers.

The public surface follows the estimator convention: poisoners transform
datasets, trainers fit models and predict labels, and both expose their
settings through get_params for serialization.
"""

from .adaptive import (
    AdaptivePoisonCrafter,
    gradient_matching_diagnostics,
    gradient_matching_loss,
    retrain_rounds,
    select_poison_targets,
)
from .data import (
    LabeledDataset,
    augment_batch,
    load_cifar,
    make_synthetic,
    read_index_file,
    save_cifar,
    write_index_file,
)
from .defenses import ABLTrainer, DPSGDTrainer, dpsgd_aggregate, lga_loss
from .errors import (
    AttackError,
    BacklabError,
    CapabilityError,
    ConfigError,
    DegenerateGradientError,
    FormatError,
    SolverError,
    TrainingDivergedError,
)
from .evaluation import (
    RunRecord,
    asr_on_triggered,
    attack_success_rate,
    clean_accuracy,
    config_hash,
    emit_plots,
    new_record,
)
from .experiments import budget_sweep, run_single
from .models import (
    ResNet18,
    SmallCNN,
    build_model,
    get_flat_params,
    load_checkpoint,
    save_checkpoint,
    set_flat_params,
)
from .poisoning import (
    BadNetsPoisoner,
    BlendedPoisoner,
    LabelConsistentPoisoner,
    Poisoner,
    WaNetPoisoner,
    apply_blend,
    apply_patch,
    apply_warp,
    checkerboard,
    make_lc_poison,
    make_poisoner,
    place_patch,
    poisoner_config,
)
from .threats import (
    GaussianNoise,
    L2PGD,
    LinfPGD,
    PerceptualAttack,
    RandomWarp,
    SpatialAttack,
    ThreatModel,
    make_threat,
    threat_config,
)
from .training import (
    AdversarialTrainer,
    CompositeAdversarialTrainer,
    StandardTrainer,
    default_composite,
    evaluate_pair_matrix,
)
from .warp import build_warp_field, warp_images

__version__ = "0.1.0"

__all__ = [
    "ABLTrainer", "AdaptivePoisonCrafter", "AdversarialTrainer", "AttackError",
    "BacklabError", "BadNetsPoisoner", "BlendedPoisoner", "CapabilityError",
    "CompositeAdversarialTrainer", "ConfigError", "DPSGDTrainer",
    "DegenerateGradientError", "FormatError", "GaussianNoise", "L2PGD",
    "LabelConsistentPoisoner", "LabeledDataset", "LinfPGD", "PerceptualAttack",
    "Poisoner", "RandomWarp", "ResNet18", "RunRecord", "SmallCNN", "SolverError",
    "SpatialAttack", "StandardTrainer", "ThreatModel", "TrainingDivergedError",
    "WaNetPoisoner", "apply_blend", "apply_patch", "apply_warp", "asr_on_triggered",
    "attack_success_rate", "augment_batch", "budget_sweep", "build_model",
    "build_warp_field", "checkerboard", "clean_accuracy", "config_hash",
    "default_composite", "dpsgd_aggregate", "emit_plots", "evaluate_pair_matrix",
    "get_flat_params", "gradient_matching_diagnostics", "gradient_matching_loss",
    "lga_loss", "load_cifar", "load_checkpoint", "make_lc_poison", "make_poisoner",
    "make_synthetic", "make_threat", "new_record", "place_patch", "poisoner_config",
    "read_index_file", "retrain_rounds", "run_single", "save_checkpoint", "save_cifar",
    "select_poison_targets", "set_flat_params", "threat_config", "warp_images",
    "write_index_file",
]
