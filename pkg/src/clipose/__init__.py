"""Category-level 6D object pose estimation with tri-modal contrastive alignment."""
from . import encoders, evaluation, geometry, losses, posehead, synthdata, training
from .geometry import CameraIntrinsics, Pose, RotationNormals, SymmetrySpec
from .synthdata import CATEGORY_NAMES, DataConfig, Triplet, generate_dataset, make_triplet
from .training import CLIPoseModel, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CATEGORY_NAMES", "CLIPoseModel", "CameraIntrinsics", "DataConfig", "Pose", "RotationNormals",
    "SymmetrySpec", "TrainConfig", "Triplet", "encoders", "evaluation", "fit", "generate_dataset",
    "geometry", "losses", "make_triplet", "posehead", "synthdata", "training", "__version__",
]
