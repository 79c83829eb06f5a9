"""Semi-supervised crowd counting with stacked surrogate segmentation tasks,
built on a small numpy autodiff engine."""

from .errors import CheckpointError, ConfigError, DataError, IrabError, NumericError, ShapeError
from .estimators import CrowdCounter, DensityRenderer, SurrogateMasker
from .pseudo import generate_pseudo_labels, naive_pseudo_labels
from .scenes import SceneSpec, generate_scene, render_density
from .surrogate import derive_thresholds
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "IrabError", "NumericError", "ShapeError",
    "CrowdCounter", "DensityRenderer", "SurrogateMasker", "generate_pseudo_labels", "naive_pseudo_labels",
    "SceneSpec", "generate_scene", "render_density", "derive_thresholds", "TrainConfig", "evaluate", "train",
]
