"""carfit: joint vehicle pose and shape estimation toolkit.

Non-neural building blocks for monocular traffic-scene understanding:
a divide-and-conquer PCA shape space over fixed-topology car meshes, 6DoF
pose geometry, a hybrid loss suite with verified analytic gradients, a
Levenberg-Marquardt keypoint fitter, a software rasterizer, and 3D instance
average-precision metrics.
"""

from .exceptions import (
    CarfitError,
    DegenerateTriple,
    EmptyCluster,
    NonPositiveDepth,
    SimplexViolation,
    TooFewKeypoints,
    TopologyMismatch,
)
from .geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    Keypoint2D,
    Pose6DoF,
    box_to_world,
    euler_to_matrix,
    normalize_angle,
    project_point,
    project_points,
    rotation_geodesic_distance,
)
from .shapespace import (
    CanonicalMesh,
    ClusterModel,
    ShapeCode,
    ShapeSpace,
    blend_shape,
    build_shape_space,
    fit_code,
    reconstruct_in_cluster,
    retrieval_baseline,
    select_semantic_vertices,
    shape_error,
)
from .losses import (
    InstancePrediction,
    LossWeights,
    Plane,
    check_gradients,
    fit_plane,
    loss_cls,
    loss_coplanar_global,
    loss_coplanar_local,
    loss_kpts,
    loss_mesh,
    loss_rot,
    loss_total,
    loss_trans,
)
from .fitter import FitConfig, FitResult, fit_instance, lm_step
from .raster import MaskImage, RasterConfig, mask_iou, multiview_iou, render_mask
from .metrics import A3DPCriteria, EvalReport, match_and_score, viewpoint_metrics
from .scenegen import SceneAnnotation, SceneGenConfig, generate_scene
from .estimators import PoseShapeFitter, VehicleShapeSpace

__version__ = "0.1.0"

__all__ = [
    "A3DPCriteria",
    "BoundingBox2D",
    "CameraIntrinsics",
    "CanonicalMesh",
    "CarfitError",
    "ClusterModel",
    "DegenerateTriple",
    "EmptyCluster",
    "EvalReport",
    "FitConfig",
    "FitResult",
    "InstancePrediction",
    "Keypoint2D",
    "LossWeights",
    "MaskImage",
    "NonPositiveDepth",
    "Plane",
    "Pose6DoF",
    "PoseShapeFitter",
    "RasterConfig",
    "SceneAnnotation",
    "SceneGenConfig",
    "ShapeCode",
    "ShapeSpace",
    "SimplexViolation",
    "TooFewKeypoints",
    "TopologyMismatch",
    "VehicleShapeSpace",
    "blend_shape",
    "box_to_world",
    "build_shape_space",
    "check_gradients",
    "euler_to_matrix",
    "fit_code",
    "fit_instance",
    "fit_plane",
    "generate_scene",
    "lm_step",
    "loss_cls",
    "loss_coplanar_global",
    "loss_coplanar_local",
    "loss_kpts",
    "loss_mesh",
    "loss_rot",
    "loss_total",
    "loss_trans",
    "mask_iou",
    "match_and_score",
    "multiview_iou",
    "normalize_angle",
    "project_point",
    "project_points",
    "reconstruct_in_cluster",
    "render_mask",
    "retrieval_baseline",
    "rotation_geodesic_distance",
    "select_semantic_vertices",
    "shape_error",
    "viewpoint_metrics",
]
