"""Cycle-consistent GAN imputation of missing FNC/T1 modalities for AD vs CN classification."""
__version__ = "0.1.0"

from .classifier import ClassifierTrainConfig, FusionClassifier, FusionClassifierEstimator
from .cohort import Cohort, SubjectRecord, SyntheticSpec, generate_synthetic_cohort, load_cohort, save_cohort
from .cyclegan import CycleGANImputer, GanModel, GanTrainConfig, train_gan
from .imputation import ImputationStrategy, ModalityImputer, apply_strategy

__all__ = [
    "ClassifierTrainConfig", "Cohort", "CycleGANImputer", "FusionClassifier", "FusionClassifierEstimator",
    "GanModel", "GanTrainConfig", "ImputationStrategy", "ModalityImputer", "SubjectRecord", "SyntheticSpec",
    "apply_strategy", "generate_synthetic_cohort", "load_cohort", "save_cohort", "train_gan",
]
