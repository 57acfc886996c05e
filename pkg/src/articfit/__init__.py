"""Learn an articulated, skinned body model from partial surface observations."""
from .anthropometry import MeasurementSet, measure
from .energies import EnergyWeights, PosePrior, RobustLossParams
from .io import load_model, save_model
from .kinematics import InvalidArgument, KinematicTree, TemplateModel, forward
from .pipeline import (BodyModelTrainer, SubjectRegistration, TrainConfig, register_new_subject,
                       train)
from .shape_space import RobustPCA, ShapePCA
from .synth import SynthConfig, make_dataset, make_splits

__version__ = "0.1.0"

__all__ = [
    "BodyModelTrainer", "EnergyWeights", "InvalidArgument", "KinematicTree", "MeasurementSet",
    "PosePrior", "RobustLossParams", "RobustPCA", "ShapePCA", "SubjectRegistration",
    "SynthConfig", "TemplateModel", "TrainConfig", "forward", "load_model", "make_dataset",
    "make_splits", "measure", "register_new_subject", "save_model", "train",
]
