"""
Casual-video SLAM backend

Monocular visual SLAM over precomputed correspondences: depth-regularized
windowed bundle adjustment, focal recovery, mask-aware patch sampling,
SIM(3) loop closure and trajectory evaluation, with a synthetic world
generator for testing.
"""

__version__ = "1.0.0"

from .exceptions import (
    SlamException,
    ValidationException,
    ConfigurationException,
    OptimizationException,
    DataFormatException,
)
from .lie_geometry import Pose, SimPose, CameraIntrinsics
from .frontend_sim import WorldSpec, DatasetBundle, generate, standard_worlds
from .pipeline import PipelineConfig, SlamPipeline, run_pipeline
from .eval_metrics import Trajectory, ate_rmse, detect_breaks, evaluate_trajectory

__all__ = [
    'SlamException',
    'ValidationException',
    'ConfigurationException',
    'OptimizationException',
    'DataFormatException',
    'Pose',
    'SimPose',
    'CameraIntrinsics',
    'WorldSpec',
    'DatasetBundle',
    'generate',
    'standard_worlds',
    'PipelineConfig',
    'SlamPipeline',
    'run_pipeline',
    'Trajectory',
    'ate_rmse',
    'detect_breaks',
    'evaluate_trajectory',
]
