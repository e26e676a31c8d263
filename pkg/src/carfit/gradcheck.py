"""Finite-difference verification suite for every analytic gradient.

Builds seeded random smooth configurations (away from abs-value kinks,
rotation wraparound boundaries, and visibility switches) for each loss term,
the weighted total, and the fitter's residual Jacobian, then compares
against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .fitter import FitConfig, _ClusterProblem
from .geometry import Pose6DoF, project_points
from .losses import (
    GradCheckReport,
    InstancePrediction,
    LossWeights,
    check_gradients,
    loss_cls,
    loss_coplanar_global,
    loss_coplanar_local,
    loss_kpts,
    loss_mesh,
    loss_rot,
    loss_total,
    loss_trans,
    pack_instance,
    unpack_instance,
)
from .scenegen import (
    InstanceAnnotation,
    SceneAnnotation,
    SceneGenConfig,
    make_car_database,
    synthetic_wheel_sets,
)
from .shapespace import (
    N_KEYPOINTS,
    N_SUBTYPES,
    CanonicalMesh,
    ShapeCode,
    blend_shape,
    build_shape_space,
    default_landmarks,
)

_ROT_MARGIN = 0.05   # distance from the 0 / pi kinks of the wrapped L1 loss
_PLANE_MARGIN = 1e-4  # distance from the |.| kink of the co-planar losses


def check_jacobian(fn, x0, eps: float = 1e-6, tol: float = 1e-4,
                   name: str = "jacobian") -> GradCheckReport:
    """Compare an analytic residual Jacobian against central differences.

    fn maps a flat parameter vector to (residuals, jacobian).
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    _, J = fn(x0)
    J = np.asarray(J, dtype=float)
    fd = np.empty_like(J)
    for i in range(x0.size):
        h = eps * max(1.0, abs(x0[i]))
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        fd[:, i] = (fn(xp)[0] - fn(xm)[0]) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(J)))
    rel = float(np.max(np.abs(fd - J) / denom)) if J.size else 0.0
    return GradCheckReport(name=name, max_rel_err=rel, n_params=x0.size, tol=tol)


class _SuiteContext:
    def __init__(self, seed, weights=None):
        # Wheel-lifted database: blended wheels are off-plane, keeping the
        # intra-instance co-planar loss away from its kink.
        meshes = make_car_database(12, seed=seed + 1000, wheel_lift_scale=0.04)
        self.space = build_shape_space(meshes, K=2, n_max=3, seed=seed)
        self.landmarks = default_landmarks(self.space.n_vertices)
        self.wheel_sets = synthetic_wheel_sets()
        self.camera = SceneGenConfig(image_width=1200, image_height=900, focal=1000.0).camera()
        self.weights = weights if weights is not None else LossWeights()

    def random_instance(self, rng) -> InstancePrediction:
        space = self.space
        probs = rng.dirichlet(np.full(space.n_clusters, 5.0))
        coeffs = [
            rng.normal(0.0, 0.6, m.n_components)
            * np.sqrt(np.maximum(m.eigenvalues, 1e-12))
            for m in space.clusters
        ]
        pose = Pose6DoF(
            np.array([rng.uniform(-6, 6), rng.uniform(0.8, 2.2), rng.uniform(8, 35)]),
            np.array(
                [
                    np.pi / 2 + rng.uniform(-0.3, 0.3),
                    rng.uniform(-np.pi, np.pi),
                    rng.uniform(-0.3, 0.3),
                ]
            ),
        )
        return InstancePrediction(pose, ShapeCode(probs, coeffs), rng.normal(0.0, 1.0, N_SUBTYPES))

    def random_observations(self, rng, pred: InstancePrediction, noise=3.0, p_visible=0.85):
        mesh = blend_shape(self.space, pred.shape_code)
        jittered = Pose6DoF(
            pred.pose.translation + rng.normal(0, 0.3, 3),
            pred.pose.rotation + rng.normal(0, 0.05, 3),
        )
        pix, _, in_front = project_points(mesh.vertices[self.landmarks], jittered, self.camera)
        obs = np.zeros((N_KEYPOINTS, 3))
        vis = in_front & (rng.random(N_KEYPOINTS) < p_visible)
        if not vis.any():
            vis = in_front
        obs[vis, :2] = pix[vis] + rng.normal(0, noise, (int(vis.sum()), 2))
        obs[vis, 2] = 1.0
        return obs


def _pack_pose_shape(pred):
    """Geometric parameters only; sub-type logits are held fixed.

    The losses checked through this packing have structurally zero logit
    gradients, which each check asserts directly instead of differencing.
    """
    return np.concatenate(
        [pred.pose.translation, pred.pose.rotation, *pred.shape_code.coefficients,
         pred.shape_code.cluster_probs]
    )


def _unpack_pose_shape(space, x, logits):
    t, rot = x[:3], x[3:6]
    at = 6
    coeffs = []
    for m in space.clusters:
        coeffs.append(x[at : at + m.n_components])
        at += m.n_components
    probs = x[at : at + space.n_clusters]
    return InstancePrediction(Pose6DoF(t, rot), ShapeCode(probs, coeffs), logits)


def _away_from_rot_kinks(rng):
    """Random (pred, gt) rotation pair with every axis delta off 0 and pi."""
    while True:
        pred = rng.uniform(-np.pi, np.pi, 3)
        gt = rng.uniform(-np.pi, np.pi, 3)
        d = np.abs(pred - gt)
        if np.all(np.minimum(np.abs(d - np.pi), np.minimum(d, 2 * np.pi - d)) > _ROT_MARGIN):
            return pred, gt


def _check_kpts(ctx, rng, tol):
    pred = ctx.random_instance(rng)
    obs = ctx.random_observations(rng, pred)
    logits = pred.subtype_logits

    def fn(x):
        p = _unpack_pose_shape(ctx.space, x, logits)
        v, g = loss_kpts(p, ctx.space, ctx.landmarks, obs, ctx.camera)
        assert not g.subtype_logits.any()
        return v, np.concatenate([g.translation, g.rotation, *g.coefficients, g.cluster_probs])

    return check_gradients(fn, _pack_pose_shape(pred), tol=tol, name="loss_kpts")


def _check_mesh(ctx, rng, tol):
    gt = blend_shape(ctx.space, ctx.random_instance(rng).shape_code)
    pred_verts = gt.vertices + rng.normal(0, 0.1, gt.vertices.shape)

    def fn(x):
        mesh = CanonicalMesh(x.reshape(-1, 3), ctx.space.faces)
        v, g = loss_mesh(mesh, gt)
        return v, g.reshape(-1)

    return check_gradients(fn, pred_verts.reshape(-1), tol=tol, name="loss_mesh")


def _check_trans(ctx, rng, tol):
    gt = rng.uniform(-10, 10, 3)
    pred = gt + rng.choice([-1.0, 1.0], 3) * rng.uniform(0.05, 2.0, 3)
    return check_gradients(
        lambda x: loss_trans(x, gt), pred, tol=tol, name="loss_trans"
    )


def _check_rot(ctx, rng, tol):
    pred, gt = _away_from_rot_kinks(rng)
    return check_gradients(lambda x: loss_rot(x, gt), pred, tol=tol, name="loss_rot")


def _check_cls(ctx, rng, tol):
    label = int(rng.integers(N_SUBTYPES))
    logits = rng.normal(0, 2.0, N_SUBTYPES)
    return check_gradients(
        lambda x: loss_cls(x, label), logits, tol=tol, name="loss_cls"
    )


def _check_coplanar_local(ctx, rng, tol):
    while True:
        pred = ctx.random_instance(rng)
        v, _ = loss_coplanar_local(pred, ctx.space, ctx.wheel_sets)
        if v > _PLANE_MARGIN:
            break
    logits = pred.subtype_logits

    def fn(x):
        p = _unpack_pose_shape(ctx.space, x, logits)
        v, g = loss_coplanar_local(p, ctx.space, ctx.wheel_sets)
        assert not g.subtype_logits.any()
        return v, np.concatenate([g.translation, g.rotation, *g.coefficients, g.cluster_probs])

    return check_gradients(fn, _pack_pose_shape(pred), tol=tol, name="loss_coplanar_local")


def _check_coplanar_global(ctx, rng, tol):
    while True:
        preds = [ctx.random_instance(rng) for _ in range(4)]
        sel_seed = int(rng.integers(1 << 30))
        v, _ = loss_coplanar_global(preds, ctx.space, seed=sel_seed)
        if v > _PLANE_MARGIN:
            break
    logits = [p.subtype_logits for p in preds]
    size = _pack_pose_shape(preds[0]).size

    def fn(x):
        parts = [
            _unpack_pose_shape(ctx.space, x[i * size : (i + 1) * size], logits[i])
            for i in range(4)
        ]
        v, grads = loss_coplanar_global(parts, ctx.space, seed=sel_seed)
        return v, np.concatenate(
            [np.concatenate([g.translation, g.rotation, *g.coefficients, g.cluster_probs])
             for g in grads]
        )

    x0 = np.concatenate([_pack_pose_shape(p) for p in preds])
    return check_gradients(fn, x0, tol=tol, name="loss_coplanar_global")


def _check_total(ctx, rng, tol):
    while True:
        preds = [ctx.random_instance(rng) for _ in range(4)]
        gt_meshes, instances = [], []
        ok = True
        for p in preds:
            gt_inst = ctx.random_instance(rng)
            d = np.abs(p.pose.rotation - gt_inst.pose.rotation)
            if np.any(np.minimum(np.abs(d - np.pi), np.minimum(d, 2 * np.pi - d)) < _ROT_MARGIN):
                ok = False
                break
            if np.any(np.abs(p.pose.translation - gt_inst.pose.translation) < 0.02):
                ok = False
                break
            # The intra-instance kink is per instance, not on the average.
            if loss_coplanar_local(p, ctx.space, ctx.wheel_sets)[0] < _PLANE_MARGIN:
                ok = False
                break
            obs = ctx.random_observations(rng, p)
            gt_meshes.append(blend_shape(ctx.space, gt_inst.shape_code))
            instances.append(
                InstanceAnnotation(
                    car_id="x", sub_type=int(rng.integers(N_SUBTYPES)),
                    pose=gt_inst.pose, keypoints=obs,
                )
            )
        if not ok:
            continue
        sel_seed = int(rng.integers(1 << 30))
        scene = SceneAnnotation(ctx.camera, (1200, 900), instances)
        v, _, report = loss_total(
            preds, scene, gt_meshes, ctx.space, ctx.landmarks, ctx.wheel_sets,
            weights=ctx.weights, seed=sel_seed,
        )
        if report.terms["glo"] > _PLANE_MARGIN:
            break
    size = pack_instance(preds[0]).size

    def fn(x):
        parts = [unpack_instance(ctx.space, x[i * size : (i + 1) * size]) for i in range(4)]
        v, grads, _ = loss_total(
            parts, scene, gt_meshes, ctx.space, ctx.landmarks, ctx.wheel_sets,
            weights=ctx.weights, seed=sel_seed,
        )
        return v, np.concatenate([g.pack() for g in grads])

    x0 = np.concatenate([pack_instance(p) for p in preds])
    # Each constituent term is fully differenced by its own family; here a
    # seeded coordinate sample verifies the weighted combination.
    coords = rng.choice(x0.size, size=min(48, x0.size), replace=False)
    return check_gradients(fn, x0, tol=tol, name="loss_total", coords=coords)


def _check_fitter_jacobian(ctx, rng, tol):
    cluster = int(rng.integers(ctx.space.n_clusters))
    pred = ctx.random_instance(rng)
    obs = ctx.random_observations(rng, pred)
    problem = _ClusterProblem(ctx.space, cluster, obs, ctx.camera, FitConfig().reg_weight)
    model = ctx.space.clusters[cluster]
    coeffs = rng.normal(0, 0.5, model.n_components) * np.sqrt(
        np.maximum(model.eigenvalues, 1e-12)
    )
    params = np.concatenate([pred.pose.translation, pred.pose.rotation, coeffs])

    def fn(x):
        return problem.residuals(x, ctx.landmarks, with_jacobian=True)

    return check_jacobian(fn, params, tol=tol, name="fitter_jacobian")


_FAMILIES = [
    ("loss_kpts", _check_kpts),
    ("loss_mesh", _check_mesh),
    ("loss_trans", _check_trans),
    ("loss_rot", _check_rot),
    ("loss_cls", _check_cls),
    ("loss_coplanar_local", _check_coplanar_local),
    ("loss_coplanar_global", _check_coplanar_global),
    ("loss_total", _check_total),
    ("fitter_jacobian", _check_fitter_jacobian),
]


def run_standard_suite(seed: int = 0, n_configs: int = 100, tol: float = 1e-4,
                       weights: LossWeights = None):
    """One aggregated report per gradient family (worst config counts).

    ``weights`` only affects the loss_total family; every individual term is
    always checked with its own gradient, so a custom weighting cannot mask
    a broken term.
    """
    ctx = _SuiteContext(seed, weights=weights)
    reports = []
    for fi, (name, check) in enumerate(_FAMILIES):
        rng = np.random.default_rng(seed * 1000 + fi)
        worst = GradCheckReport(name=name, max_rel_err=0.0, n_params=0, tol=tol)
        for _ in range(n_configs):
            rep = check(ctx, rng, tol)
            if rep.max_rel_err >= worst.max_rel_err:
                worst = GradCheckReport(
                    name=name, max_rel_err=rep.max_rel_err, n_params=rep.n_params, tol=tol
                )
        reports.append(worst)
    return reports
