"""fusionkit: camera/LiDAR depth fusion toolkit.

Sparse LiDAR densification (PDR), self-supervised photometric objectives
with analytic gradients, graph-based depth correction, direct depth
optimisation, depth metrics and KITTI-style I/O.
"""

from .depthopt import DepthOptimizer, MedianScaler, OptimizeConfig, OptimizeState, median_scale, optimize_depth
from .exceptions import (
    ConvergenceError,
    DivergenceError,
    FormatError,
    FusionKitError,
    ParameterError,
    SceneError,
    UnanchoredSystemError,
)
from .gdc import (
    CorrectionResult,
    DepthGraph,
    GraphDepthCorrector,
    build_graph,
    conjugate_gradient,
    normal_equations,
    reconstruction_weights,
    solve_correction,
)
from .geometry import CameraIntrinsics, Pose, backproject, bilinear_sample, project, warp_image, warp_jacobian
from .losses import (
    LossConfig,
    LossReport,
    photometric_error,
    reprojection_loss,
    scale_invariant_loss,
    smoothness_loss,
    ssim,
    total_loss,
    upsample_prediction,
)
from .metrics import MetricReport, depth_metrics
from .pdr import PDR, PDRTransformer, PointCloud, coverage_fraction, generate_pdr, subsample_beams

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConvergenceError",
    "CorrectionResult",
    "DepthGraph",
    "DepthOptimizer",
    "DivergenceError",
    "FormatError",
    "FusionKitError",
    "GraphDepthCorrector",
    "LossConfig",
    "LossReport",
    "MedianScaler",
    "MetricReport",
    "OptimizeConfig",
    "OptimizeState",
    "PDR",
    "PDRTransformer",
    "ParameterError",
    "PointCloud",
    "Pose",
    "SceneError",
    "UnanchoredSystemError",
    "backproject",
    "bilinear_sample",
    "build_graph",
    "conjugate_gradient",
    "coverage_fraction",
    "depth_metrics",
    "generate_pdr",
    "median_scale",
    "normal_equations",
    "optimize_depth",
    "photometric_error",
    "project",
    "reconstruction_weights",
    "reprojection_loss",
    "scale_invariant_loss",
    "smoothness_loss",
    "solve_correction",
    "ssim",
    "subsample_beams",
    "total_loss",
    "upsample_prediction",
    "warp_image",
    "warp_jacobian",
]
