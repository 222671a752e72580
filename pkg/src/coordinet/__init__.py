"""Camera pose regression with learned per-image uncertainty, and EKF fusion
of the resulting pose + covariance stream."""

from .geometry import Pose, geodesic_distance, quat_angular_error, quat_to_matrix
from .model import CoordiNet, ModelConfig, NetworkOutput
from .losses import heteroscedastic_loss, homoscedastic_loss, plain_loss
from .fusion import FilterConfig, PoseObservation, run_filter, smoothness_score, evaluate_trajectory

__all__ = [
    "Pose", "geodesic_distance", "quat_angular_error", "quat_to_matrix",
    "CoordiNet", "ModelConfig", "NetworkOutput",
    "heteroscedastic_loss", "homoscedastic_loss", "plain_loss",
    "FilterConfig", "PoseObservation", "run_filter", "smoothness_score", "evaluate_trajectory",
]
__version__ = "0.1.0"
