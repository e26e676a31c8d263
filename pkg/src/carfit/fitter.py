"""Levenberg-Marquardt recovery of pose and shape from 2D keypoints.

For each shape cluster and each yaw multistart, LM minimizes the visible
keypoint reprojection residuals plus a PCA-prior penalty on the shape
coefficients; the lowest-objective run wins. Jacobians are analytic,
composed from the same chain rules as the loss module, and are covered by
the finite-difference suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import TooFewKeypoints
from .geometry import CameraIntrinsics, Pose6DoF, euler_to_matrix_derivatives, normalize_angle
from .losses import as_keypoint_array, pixel_jacobians
from .shapespace import N_KEYPOINTS, ShapeCode, ShapeSpace

_EIG_FLOOR = 1e-10
# Constant residual for a visible observation whose landmark falls behind
# the camera. Large enough that "hiding" keypoints never pays off, with a
# zero Jacobian row so it injects no spurious gradient.
_BEHIND_PENALTY = 1e6


@dataclass
class FitConfig:
    max_iters: int = 100
    damping_init: float = 1e-3
    damping_factor: float = 10.0
    damping_max: float = 1e12
    rel_tol: float = 1e-8
    min_visible: int = 6
    multistart_yaw: tuple = (0.0, math.pi / 2.0, math.pi, 3.0 * math.pi / 2.0)
    reg_weight: float = 1e-2   # lambda_reg on sum(c_j^2 / eig_j)
    coeff_clip: float = 3.0    # coefficients clamped to +- clip * sqrt(eig_j)
    # Upright prior: rotation about the object x axis that stands the
    # canonical z-up car on the camera-frame ground; yaw multistarts apply
    # on top of it.
    base_tilt: float = math.pi / 2.0

    def __post_init__(self):
        if self.damping_factor <= 1.0:
            raise ValueError("damping_factor must be > 1")
        if self.rel_tol <= 0 or self.damping_init <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    pose: Pose6DoF
    shape_code: ShapeCode
    final_cost: float       # visible-keypoint reprojection cost (pixels^2)
    iters: int
    converged: bool
    cluster_chosen: int
    objective: float = 0.0  # final_cost + regularization, the LM objective


def lm_step(residuals, jacobian, damping):
    """One damped normal-equations solve: (J^T J + mu diag(J^T J)) d = -J^T r."""
    J = np.asarray(jacobian, dtype=float)
    r = np.asarray(residuals, dtype=float).reshape(-1)
    JtJ = J.T @ J
    g = J.T @ r
    A = JtJ + damping * np.diag(np.maximum(np.diag(JtJ), 1e-12))
    try:
        return np.linalg.solve(A, -g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, -g, rcond=None)[0]


class _ClusterProblem:
    """Residuals/Jacobian of one cluster's (T, rot, coeffs) parameterization."""

    def __init__(self, space, cluster, obs, cam, reg_weight):
        model = space.clusters[cluster]
        self.mean = model.mean.reshape(-1, 3)
        self.basis3 = model.basis.reshape(model.mean.size // 3, 3, model.n_components)
        self.n = model.n_components
        self.obs = obs
        self.visible = obs[:, 2] > 0.5
        self.cam = cam
        self.reg_scale = np.sqrt(reg_weight / np.maximum(model.eigenvalues, _EIG_FLOOR))
        self.coeff_bound = None  # set by fit_instance from coeff_clip

    def landmark_verts(self, coeffs, landmarks):
        return self.mean[landmarks] + self.basis3[landmarks] @ coeffs

    def residuals(self, params, landmarks, with_jacobian=False):
        t, rot, coeffs = params[:3], params[3:6], params[6:]
        verts = self.landmark_verts(coeffs, landmarks)
        R, dRs = euler_to_matrix_derivatives(rot)
        cam_pts = verts @ R.T + t
        active = self.visible & (cam_pts[:, 2] > 0.0)
        hidden = self.visible & ~active
        m = N_KEYPOINTS
        r = np.zeros(2 * m + self.n)
        hid = np.flatnonzero(hidden)
        r[2 * hid] = _BEHIND_PENALTY
        r[2 * hid + 1] = _BEHIND_PENALTY
        idx = np.flatnonzero(active)
        X = cam_pts[idx]
        z = X[:, 2]
        u = self.cam.fx * X[:, 0] / z + self.cam.px
        v = self.cam.fy * X[:, 1] / z + self.cam.py
        r[2 * idx] = u - self.obs[idx, 0]
        r[2 * idx + 1] = v - self.obs[idx, 1]
        r[2 * m :] = self.reg_scale * coeffs
        if not with_jacobian:
            return r, None
        J = np.zeros((2 * m + self.n, 6 + self.n))
        Jpix = pixel_jacobians(X, self.cam)  # (k, 2, 3)
        # d cam_pt / d params: translation = I, rotation via dR, coeffs via R B.
        dT = Jpix  # (k, 2, 3)
        J[np.repeat(2 * idx, 2) + np.tile([0, 1], idx.size), 0:3] = dT.reshape(-1, 3)
        va = verts[idx]
        for k in range(3):
            dc = va @ dRs[k].T  # (k, 3)
            J[2 * idx, 3 + k] = np.einsum("ij,ij->i", Jpix[:, 0, :], dc)
            J[2 * idx + 1, 3 + k] = np.einsum("ij,ij->i", Jpix[:, 1, :], dc)
        if self.n:
            dvert = np.einsum("ab,ibn->ian", R, self.basis3[landmarks][idx])  # (k, 3, n)
            J[2 * idx, 6:] = np.einsum("ij,ijn->in", Jpix[:, 0, :], dvert)
            J[2 * idx + 1, 6:] = np.einsum("ij,ijn->in", Jpix[:, 1, :], dvert)
            J[2 * m :, 6:] = np.diag(self.reg_scale)
        return r, J

    def split_cost(self, params, landmarks):
        r, _ = self.residuals(params, landmarks)
        data = float(np.sum(r[: 2 * N_KEYPOINTS] ** 2))
        reg = float(np.sum(r[2 * N_KEYPOINTS :] ** 2))
        return data, reg


def _init_translation(space, cluster, obs, cam, landmarks):
    """Depth from the 3D/2D spread ratio; ray through the observed centroid."""
    model = space.clusters[cluster]
    verts = model.mean.reshape(-1, 3)[landmarks]
    spread3d = float(np.sqrt(np.mean(np.sum((verts - verts.mean(0)) ** 2, axis=1))))
    vis = obs[obs[:, 2] > 0.5, :2]
    spread2d = float(np.sqrt(np.mean(np.sum((vis - vis.mean(0)) ** 2, axis=1))))
    f = 0.5 * (cam.fx + cam.fy)
    z0 = f * spread3d / max(spread2d, 1e-6)
    z0 = min(max(z0, 1.0), 200.0)
    cx, cy = vis.mean(0)
    return np.array([(cx - cam.px) * z0 / cam.fx, (cy - cam.py) * z0 / cam.fy, z0])


def _run_lm(problem, params0, landmarks, cfg):
    params = params0.copy()
    r, _ = problem.residuals(params, landmarks)
    cost = float(r @ r)
    if cost <= 1e-30:
        return params, cost, 0, True
    damping = cfg.damping_init
    converged = False
    iters = 0
    bound = problem.coeff_bound
    for iters in range(1, cfg.max_iters + 1):
        r, J = problem.residuals(params, landmarks, with_jacobian=True)
        accepted = False
        while damping <= cfg.damping_max:
            delta = lm_step(r, J, damping)
            cand = params + delta
            if bound is not None and bound.size:
                cand[6:] = np.clip(cand[6:], -bound, bound)
            rc, _ = problem.residuals(cand, landmarks)
            cand_cost = float(rc @ rc)
            if cand_cost < cost:
                rel_drop = (cost - cand_cost) / max(cost, 1e-300)
                params, cost = cand, cand_cost
                damping = max(damping / cfg.damping_factor, 1e-15)
                accepted = True
                if rel_drop < cfg.rel_tol or cost == 0.0:
                    converged = True
                break
            damping *= cfg.damping_factor
        if not accepted or converged:
            break
    return params, cost, iters, converged


def fit_instance(observations, cam: CameraIntrinsics, space: ShapeSpace, landmarks,
                 cfg: FitConfig = None) -> FitResult:
    """Fit pose and shape of one instance to its observed 2D keypoints.

    Runs LM from every (cluster, multistart yaw) start and returns the
    lowest-objective result, with Euler angles normalized to [-pi, pi] and
    a one-hot shape code on the winning cluster. ``final_cost`` is the
    reprojection part of the objective (the PCA-prior penalty is reported
    separately via ``objective``).

    Raises:
        TooFewKeypoints: fewer than cfg.min_visible visible observations.
    """
    if cfg is None:
        cfg = FitConfig()
    obs = as_keypoint_array(observations)
    landmarks = np.asarray(landmarks, dtype=int)
    n_visible = int(np.sum(obs[:, 2] > 0.5))
    if n_visible < cfg.min_visible:
        raise TooFewKeypoints(
            f"{n_visible} visible keypoints < min_visible={cfg.min_visible}"
        )

    best = None
    best_key = None
    for c in range(space.n_clusters):
        problem = _ClusterProblem(space, c, obs, cam, cfg.reg_weight)
        eig = np.maximum(space.clusters[c].eigenvalues, 0.0)
        problem.coeff_bound = cfg.coeff_clip * np.sqrt(eig)
        t0 = _init_translation(space, c, obs, cam, landmarks)
        for yi, yaw in enumerate(cfg.multistart_yaw):
            params0 = np.concatenate(
                [t0, [cfg.base_tilt, yaw, 0.0], np.zeros(problem.n)]
            )
            params, cost, iters, converged = _run_lm(problem, params0, landmarks, cfg)
            data, reg = problem.split_cost(params, landmarks)
            key = (cost, c, yi)
            if best_key is None or key < best_key:
                best_key = key
                probs = np.zeros(space.n_clusters)
                probs[c] = 1.0
                coeffs = [np.zeros(m.n_components) for m in space.clusters]
                coeffs[c] = params[6:].copy()
                best = FitResult(
                    pose=Pose6DoF(params[:3], normalize_angle(params[3:6])),
                    shape_code=ShapeCode(probs, coeffs),
                    final_cost=data,
                    iters=iters,
                    converged=converged,
                    cluster_chosen=c,
                    objective=cost,
                )
    return best
