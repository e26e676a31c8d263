"""Input validation helpers for the estimator layer."""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics
from .shapespace import N_KEYPOINTS, CanonicalMesh, check_shared_topology


def check_camera(camera) -> CameraIntrinsics:
    """Accept CameraIntrinsics or an (fx, fy, px, py) sequence."""
    if isinstance(camera, CameraIntrinsics):
        return camera
    if camera is None:
        raise ValueError("a camera is required; pass CameraIntrinsics or (fx, fy, px, py)")
    fx, fy, px, py = (float(v) for v in camera)
    return CameraIntrinsics(fx, fy, px, py)


def as_canonical_meshes(X, faces=None, car_ids=None):
    """Coerce estimator input into a validated CanonicalMesh list.

    X may already be a list of CanonicalMesh (faces ignored), or an
    (n_meshes, 3 * n_vertices) array of flattened vertices, in which case a
    shared (n_faces, 3) topology must be supplied.
    """
    if len(X) and isinstance(X[0], CanonicalMesh):
        meshes = list(X)
        check_shared_topology(meshes)
        return meshes
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 2 or arr.shape[1] % 3:
        raise ValueError(
            f"expected (n_meshes, 3*n_vertices) vertex array, got shape {arr.shape}"
        )
    if faces is None:
        raise ValueError("array input requires a shared face topology")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    ids = car_ids if car_ids is not None else [f"mesh-{i:03d}" for i in range(arr.shape[0])]
    return [
        CanonicalMesh(arr[i].reshape(-1, 3), faces, car_id=str(ids[i]))
        for i in range(arr.shape[0])
    ]


def check_keypoint_batch(X) -> np.ndarray:
    """Validate keypoint observations as an (n_instances, 66, 3) float array."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (N_KEYPOINTS, 3):
        raise ValueError(
            f"expected (n_instances, {N_KEYPOINTS}, 3) keypoints, got shape {arr.shape}"
        )
    if not np.isfinite(arr[..., :2][arr[..., 2] > 0.5]).all():
        raise ValueError("visible keypoints must have finite coordinates")
    return arr
