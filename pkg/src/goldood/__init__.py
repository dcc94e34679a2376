"""Graph OOD detection by training a classifier against generated latent pseudo-OOD embeddings."""

from .data import DatasetBundle, OodRecipe, OodSet, apply_recipe, load_dataset, make_sbm_toy, save_dataset
from .errors import ContractError, DataLoadError, DimensionError, NonFiniteError
from .evaluation import EvalReport, evaluate
from .models import DetectorMlp, GcnModel, GoldModel
from .pipeline import TrainConfig, TrainingDivergence, train_baseline, train_gold

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DataLoadError",
    "DatasetBundle",
    "DetectorMlp",
    "DimensionError",
    "EvalReport",
    "GcnModel",
    "GoldModel",
    "NonFiniteError",
    "OodRecipe",
    "OodSet",
    "TrainConfig",
    "TrainingDivergence",
    "apply_recipe",
    "evaluate",
    "load_dataset",
    "make_sbm_toy",
    "save_dataset",
    "train_baseline",
    "train_gold",
]
