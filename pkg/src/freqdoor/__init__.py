"""Desk-scale lab for backdoor attacks on learned image compression via
adaptive frequency-domain triggers."""

__version__ = "0.1.0"

from .codec import (
    DEFAULT_LAMBDAS,
    HyperpriorCodec,
    QuantMode,
    RateReport,
    quantize,
    rd_loss,
)
from .losses import (
    AttackObjectiveSpec,
    LossBreakdown,
    LossVariant,
    ObjectiveKind,
    default_objective,
    stealth_hinge,
)
from .trigger import BaselineInjector, PoisonedImage, TriggerInjector, amplify
from .training import (
    FreezeAuditReport,
    MultiTriggerPlan,
    finetune_attack,
    freeze_audit,
    multi_trigger_train,
    vanilla_train,
)
from .config import ExperimentConfig, TrainConfig, config_hash, load_config
from .data import Corpus, load_dataset, synth_corpus
from .evaluation import (
    DefenseGrid,
    EvaluationReport,
    defense_sweep,
    gaussian_blur,
    psnr,
    rd_curve,
    squeeze_bits,
)

__all__ = [
    "AttackObjectiveSpec",
    "BaselineInjector",
    "Corpus",
    "DEFAULT_LAMBDAS",
    "DefenseGrid",
    "EvaluationReport",
    "ExperimentConfig",
    "FreezeAuditReport",
    "HyperpriorCodec",
    "LossBreakdown",
    "LossVariant",
    "MultiTriggerPlan",
    "ObjectiveKind",
    "PoisonedImage",
    "QuantMode",
    "RateReport",
    "TrainConfig",
    "TriggerInjector",
    "amplify",
    "config_hash",
    "default_objective",
    "defense_sweep",
    "finetune_attack",
    "freeze_audit",
    "gaussian_blur",
    "load_config",
    "load_dataset",
    "multi_trigger_train",
    "psnr",
    "quantize",
    "rd_curve",
    "rd_loss",
    "squeeze_bits",
    "stealth_hinge",
    "synth_corpus",
    "vanilla_train",
]
