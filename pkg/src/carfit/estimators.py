"""scikit-learn style estimators wrapping the functional core.

`VehicleShapeSpace` is a transformer over mesh databases (fit learns the
clustered PCA model, transform encodes meshes to compact codes,
inverse_transform decodes); `PoseShapeFitter` learns the same model and
predicts 6DoF poses from 2D keypoint observations. Both compose with
sklearn pipelines and `get_params`/`set_params`/`clone`.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .fitter import FitConfig, fit_instance
from .shapespace import (
    blend_vertices,
    build_shape_space,
    default_landmarks,
    fit_code,
    pack_code,
    unpack_code,
)
from .validation import as_canonical_meshes, check_camera, check_keypoint_batch


class VehicleShapeSpace(BaseEstimator, TransformerMixin):
    """Divide-and-conquer PCA shape model with a transformer interface.

    Parameters
    ----------
    n_clusters : number of K-means clusters (K).
    n_components : maximum PCA components per cluster (n <= 10 by default).
    temperature : softmax temperature of the cluster scores in transform;
        0 selects the best cluster hard.
    seed : K-means seed; fit is deterministic given it.
    faces : shared (n_faces, 3) topology, required when fit receives a
        flattened vertex array instead of CanonicalMesh objects.
    """

    def __init__(self, n_clusters=4, n_components=10, temperature=1.0, seed=0, faces=None):
        self.n_clusters = n_clusters
        self.n_components = n_components
        self.temperature = temperature
        self.seed = seed
        self.faces = faces

    def fit(self, X, y=None):
        meshes = as_canonical_meshes(X, faces=self.faces)
        self.space_ = build_shape_space(
            meshes, K=self.n_clusters, n_max=self.n_components, seed=self.seed
        )
        self.n_features_in_ = 3 * self.space_.n_vertices
        return self

    def _check_fitted(self):
        if not hasattr(self, "space_"):
            raise NotFittedError("VehicleShapeSpace must be fitted first")

    def transform(self, X):
        """Encode meshes to packed codes: [cluster probs, per-cluster coeffs]."""
        self._check_fitted()
        meshes = as_canonical_meshes(X, faces=self.space_.faces)
        return np.stack(
            [pack_code(self.space_, fit_code(self.space_, m, self.temperature)) for m in meshes]
        )

    def inverse_transform(self, C):
        """Decode packed codes back to flattened blended vertices."""
        self._check_fitted()
        C = np.asarray(C, dtype=float)
        if C.ndim == 1:
            C = C[None]
        return np.stack(
            [blend_vertices(self.space_, unpack_code(self.space_, row)).reshape(-1) for row in C]
        )


class PoseShapeFitter(BaseEstimator):
    """Keypoint-driven 6DoF pose and shape regressor.

    fit(X) learns the clustered PCA shape model from a mesh database;
    predict(X) recovers per-instance poses from (n, 66, 3) keypoint arrays
    (columns x, y, visibility) via multistart Levenberg-Marquardt.

    Parameters
    ----------
    camera : CameraIntrinsics or (fx, fy, px, py); required before predict.
    landmarks : 66 mesh vertex indices observed by the keypoints; defaults
        to the evenly spread table for the learned topology.
    """

    def __init__(self, camera=None, landmarks=None, n_clusters=4, n_components=10,
                 seed=0, max_iters=100, damping_init=1e-3, damping_factor=10.0,
                 rel_tol=1e-8, min_visible=6,
                 multistart_yaw=(0.0, math.pi / 2.0, math.pi, 3.0 * math.pi / 2.0),
                 reg_weight=1e-2):
        self.camera = camera
        self.landmarks = landmarks
        self.n_clusters = n_clusters
        self.n_components = n_components
        self.seed = seed
        self.max_iters = max_iters
        self.damping_init = damping_init
        self.damping_factor = damping_factor
        self.rel_tol = rel_tol
        self.min_visible = min_visible
        self.multistart_yaw = multistart_yaw
        self.reg_weight = reg_weight

    def fit(self, X, y=None):
        meshes = as_canonical_meshes(X)
        self.space_ = build_shape_space(
            meshes, K=self.n_clusters, n_max=self.n_components, seed=self.seed
        )
        if self.landmarks is not None:
            self.landmarks_ = np.asarray(self.landmarks, dtype=int)
        else:
            self.landmarks_ = default_landmarks(self.space_.n_vertices)
        return self

    def _fit_config(self):
        return FitConfig(
            max_iters=self.max_iters,
            damping_init=self.damping_init,
            damping_factor=self.damping_factor,
            rel_tol=self.rel_tol,
            min_visible=self.min_visible,
            multistart_yaw=tuple(self.multistart_yaw),
            reg_weight=self.reg_weight,
        )

    def predict_result(self, X):
        """Full FitResult list for (n_instances, 66, 3) keypoint arrays."""
        if not hasattr(self, "space_"):
            raise NotFittedError("PoseShapeFitter must be fitted first")
        cam = check_camera(self.camera)
        cfg = self._fit_config()
        obs = check_keypoint_batch(X)
        return [fit_instance(o, cam, self.space_, self.landmarks_, cfg) for o in obs]

    def predict(self, X):
        """Poses as an (n_instances, 6) array: [tx, ty, tz, rx, ry, rz]."""
        results = self.predict_result(X)
        return np.stack(
            [np.concatenate([r.pose.translation, r.pose.rotation]) for r in results]
        )
