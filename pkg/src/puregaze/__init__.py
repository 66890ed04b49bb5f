"""Self-adversarial gaze feature purification."""
from .errors import ConfigurationError, DomainError, IngestionError, ProbeFailure, PureGazeError
from .geometry import (GazeLabel, GazeVector, angular_error, pitchyaw_angular_error, pitchyaw_to_vector,
                       vector_to_pitchyaw)
from .attention import AttentionMap, build_attention_map
from .losses import (LossReport, LossWeights, adversarial_loss, backbone_loss, gaze_loss, reconstruction_loss,
                     sa_module_loss)
from .models import PureGaze, attach_sa, build_puregaze, stop_gradient_boundaries
from .training import TrainConfig, finetune, load_model, train, train_step
from .evaluation import ablation_sweep, evaluate, illumination_buckets, visualize_purification

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DomainError", "IngestionError", "ProbeFailure", "PureGazeError",
    "GazeLabel", "GazeVector", "angular_error", "pitchyaw_angular_error", "pitchyaw_to_vector",
    "vector_to_pitchyaw", "AttentionMap", "build_attention_map", "LossReport", "LossWeights",
    "adversarial_loss", "backbone_loss", "gaze_loss", "reconstruction_loss", "sa_module_loss",
    "PureGaze", "attach_sa", "build_puregaze", "stop_gradient_boundaries", "TrainConfig", "finetune",
    "load_model", "train", "train_step", "ablation_sweep", "evaluate", "illumination_buckets",
    "visualize_purification",
]
