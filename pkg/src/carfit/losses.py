"""Hybrid loss suite with analytic gradients.

Implements the keypoint reprojection loss, inter- and intra-instance
co-planar losses, mesh / translation / rotation regression losses, the
sub-type classification loss, and their weighted total. Every term returns
``(value, gradient)`` where the gradient is taken with respect to pose
parameters, per-cluster PCA coefficients, and cluster blend probabilities;
all gradients are hand-derived and checked against central finite
differences (see :mod:`carfit.gradcheck`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateTriple
from .geometry import (
    CameraIntrinsics,
    Pose6DoF,
    euler_to_matrix_derivatives,
)
from .shapespace import (
    N_KEYPOINTS,
    N_SUBTYPES,
    CanonicalMesh,
    ShapeCode,
    ShapeSpace,
    blend_center,
    blend_vertices,
    cluster_center_stats,
)

TWO_PI = 2.0 * math.pi


@dataclass
class LossWeights:
    """Weights of the total objective; defaults follow the reference setup."""

    loc: float = 5.0
    glo: float = 5.0
    kpts: float = 0.01
    mesh: float = 10.0
    trans: float = 0.5
    rot: float = 1.0
    cls: float = 0.5

    def as_dict(self):
        return {
            "loc": self.loc, "glo": self.glo, "kpts": self.kpts, "mesh": self.mesh,
            "trans": self.trans, "rot": self.rot, "cls": self.cls,
        }

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class Plane:
    """Plane a*x + b*y + c*z + d = 0."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        if self.a == 0.0 and self.b == 0.0 and self.c == 0.0:
            raise ValueError("plane normal must be non-zero")

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


@dataclass
class InstancePrediction:
    """Predicted state of one car: pose, shape code, sub-type logits."""

    pose: Pose6DoF
    shape_code: ShapeCode
    subtype_logits: np.ndarray = field(default_factory=lambda: np.zeros(N_SUBTYPES))

    def __post_init__(self):
        self.subtype_logits = np.asarray(self.subtype_logits, dtype=float).reshape(-1)


@dataclass
class InstanceGradient:
    """Gradient w.r.t. one instance's parameters; mirrors InstancePrediction."""

    translation: np.ndarray
    rotation: np.ndarray
    coefficients: list
    cluster_probs: np.ndarray
    subtype_logits: np.ndarray

    @classmethod
    def zeros(cls, space: ShapeSpace) -> "InstanceGradient":
        return cls(
            np.zeros(3),
            np.zeros(3),
            [np.zeros(m.n_components) for m in space.clusters],
            np.zeros(space.n_clusters),
            np.zeros(N_SUBTYPES),
        )

    def add_scaled(self, other: "InstanceGradient", w: float):
        self.translation += w * other.translation
        self.rotation += w * other.rotation
        for mine, theirs in zip(self.coefficients, other.coefficients):
            mine += w * theirs
        self.cluster_probs += w * other.cluster_probs
        self.subtype_logits += w * other.subtype_logits

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.translation, self.rotation, *self.coefficients,
             self.cluster_probs, self.subtype_logits]
        )

    def norm(self) -> float:
        return float(np.linalg.norm(self.pack()))


def pack_instance(pred: InstancePrediction) -> np.ndarray:
    """Flatten an instance to [T, rot, coeffs..., probs, logits] for checking."""
    return np.concatenate(
        [pred.pose.translation, pred.pose.rotation, *pred.shape_code.coefficients,
         pred.shape_code.cluster_probs, pred.subtype_logits]
    )


def unpack_instance(space: ShapeSpace, vec) -> InstancePrediction:
    vec = np.asarray(vec, dtype=float).reshape(-1)
    t, rot = vec[:3], vec[3:6]
    at = 6
    coeffs = []
    for m in space.clusters:
        coeffs.append(vec[at : at + m.n_components])
        at += m.n_components
    probs = vec[at : at + space.n_clusters]
    at += space.n_clusters
    logits = vec[at : at + N_SUBTYPES]
    return InstancePrediction(Pose6DoF(t, rot), ShapeCode(probs, coeffs), logits)


def as_keypoint_array(observations) -> np.ndarray:
    """Accept (66, 3) arrays or Keypoint2D lists; return (66, 3) floats."""
    if isinstance(observations, np.ndarray):
        return np.asarray(observations, dtype=float).reshape(N_KEYPOINTS, 3)
    rows = []
    for kp in observations:
        if hasattr(kp, "x"):
            rows.append((kp.x, kp.y, 1.0 if kp.visible else 0.0))
        else:
            rows.append(tuple(kp))
    arr = np.asarray(rows, dtype=float)
    if arr.shape != (N_KEYPOINTS, 3):
        raise ValueError(f"expected {N_KEYPOINTS} keypoints, got shape {arr.shape}")
    return arr


def _landmark_arrays(space: ShapeSpace, code: ShapeCode, landmarks):
    """Blended landmark vertices plus the pieces their gradient needs.

    Returns:
        verts: (L, 3) blended object-frame landmark vertices.
        recon: (K, L, 3) per-cluster reconstructions at the landmarks.
        basis: list of (L, 3, n_c) basis slices at the landmarks.
    """
    lm = np.asarray(landmarks, dtype=int)
    recon, basis = [], []
    verts = np.zeros((lm.shape[0], 3))
    for c, model in enumerate(space.clusters):
        flat = model.mean + model.basis @ code.coefficients[c]
        rc = flat.reshape(-1, 3)[lm]
        recon.append(rc)
        basis.append(model.basis.reshape(model.mean.size // 3, 3, model.n_components)[lm])
        verts += code.cluster_probs[c] * rc
    return verts, np.stack(recon), basis


def pixel_jacobians(cam_pts: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(camera point) for (M, 3) camera-frame points -> (M, 2, 3)."""
    x, y, z = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    J = np.zeros((cam_pts.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    return J


def loss_kpts(pred: InstancePrediction, space: ShapeSpace, landmarks, observations,
              cam: CameraIntrinsics):
    """Keypoint reprojection loss: sum of V_i * ||p_i - p_obs_i||^2.

    Landmarks that are invisible or behind the camera contribute zero value
    and zero gradient. The gradient chains through the pinhole projection,
    the Euler rotation, and the PCA blend.
    """
    obs = as_keypoint_array(observations)
    code = pred.shape_code
    verts, recon, basis = _landmark_arrays(space, code, landmarks)
    R, dRs = euler_to_matrix_derivatives(pred.pose.rotation)
    cam_pts = verts @ R.T + pred.pose.translation
    active = (obs[:, 2] > 0.5) & (cam_pts[:, 2] > 0.0)
    grad = InstanceGradient.zeros(space)
    if not active.any():
        return 0.0, grad

    X = cam_pts[active]
    z = X[:, 2]
    proj = np.stack([cam.fx * X[:, 0] / z + cam.px, cam.fy * X[:, 1] / z + cam.py], axis=1)
    r = proj - obs[active, :2]
    value = float(np.sum(r * r))

    gpix = 2.0 * r
    gx = np.empty_like(X)
    gx[:, 0] = cam.fx / z * gpix[:, 0]
    gx[:, 1] = cam.fy / z * gpix[:, 1]
    gx[:, 2] = -(cam.fx * X[:, 0] * gpix[:, 0] + cam.fy * X[:, 1] * gpix[:, 1]) / (z * z)

    va = verts[active]
    grad.translation = gx.sum(axis=0)
    for k in range(3):
        grad.rotation[k] = float(np.sum(gx * (va @ dRs[k].T)))
    dverts = gx @ R  # gradient w.r.t. object-frame landmark positions
    for c in range(space.n_clusters):
        grad.cluster_probs[c] = float(np.sum(dverts * recon[c][active]))
        grad.coefficients[c] = code.cluster_probs[c] * np.einsum(
            "mjn,mj->n", basis[c][active], dverts
        )
    return value, grad


def fit_plane(points) -> Plane:
    """Plane through three points; normal is the normalized cross product."""
    p = np.asarray(points, dtype=float).reshape(3, 3)
    e1, e2 = p[1] - p[0], p[2] - p[0]
    n = np.cross(e1, e2)
    scale = np.linalg.norm(e1) * np.linalg.norm(e2)
    norm = np.linalg.norm(n)
    if scale == 0.0 or norm <= 1e-9 * scale:
        raise DegenerateTriple("three points are collinear; no unique plane")
    n = n / norm
    return Plane(n[0], n[1], n[2], float(-n @ p[0]))


def point_plane_distance(plane: Plane, point) -> float:
    """|a*x + b*y + c*z + d| / sqrt(a^2 + b^2 + c^2)."""
    q = np.asarray(point, dtype=float).reshape(3)
    n = plane.normal
    return float(abs(n @ q + plane.d) / np.linalg.norm(n))


def _plane_distance_grads(q: np.ndarray):
    """Distance of q[3] to the plane through q[0..2], with d/dq.

    Works on the unnormalized plane (n = e1 x e2, g = n.(q3 - q0)); the
    reported value g/|n| is invariant to any rescaling of the coefficients.
    """
    e1, e2, w = q[1] - q[0], q[2] - q[0], q[3] - q[0]
    n = np.cross(e1, e2)
    h = np.linalg.norm(n)
    scale = np.linalg.norm(e1) * np.linalg.norm(e2)
    if scale == 0.0 or h <= 1e-9 * scale:
        raise DegenerateTriple("sampled centers are collinear")
    g = float(n @ w)
    f = g / h
    nhat = n / h
    dg = np.empty((4, 3))
    dg[1] = np.cross(e2, w)
    dg[2] = np.cross(w, e1)
    dg[3] = n
    dg[0] = -dg[1] - dg[2] - dg[3]
    dh = np.zeros((4, 3))
    dh[1] = np.cross(e2, nhat)
    dh[2] = np.cross(nhat, e1)
    dh[0] = -dh[1] - dh[2]
    df = dg / h - (f / h) * dh
    sign = 1.0 if f >= 0 else -1.0
    return abs(f), sign * df


class _CenterChain:
    """Posed mesh centroid of one instance plus its parameter chain rules."""

    def __init__(self, space: ShapeSpace, pred: InstancePrediction):
        self.space = space
        self.code = pred.shape_code
        self.R, self.dRs = euler_to_matrix_derivatives(pred.pose.rotation)
        self.cbar = blend_center(space, pred.shape_code)
        self.center = self.R @ self.cbar + pred.pose.translation

    def accumulate(self, grad: InstanceGradient, dcenter: np.ndarray, w: float = 1.0):
        """Add w * (d loss / d center = dcenter) chained into the parameters."""
        dq = w * dcenter
        grad.translation += dq
        for k in range(3):
            grad.rotation[k] += float(dq @ (self.dRs[k] @ self.cbar))
        dbar = self.R.T @ dq
        mean_centers, basis_centers = cluster_center_stats(self.space)
        for c in range(self.space.n_clusters):
            grad.coefficients[c] += self.code.cluster_probs[c] * (basis_centers[c].T @ dbar)
            grad.cluster_probs[c] += float(
                dbar @ (mean_centers[c] + basis_centers[c] @ self.code.coefficients[c])
            )


def loss_coplanar_global(preds, space: ShapeSpace, seed: int = 0, max_attempts: int = 10):
    """Inter-instance co-planar loss over one seeded quadruple of cars.

    Four instances are drawn uniformly without replacement; the plane is fit
    to the first three posed mesh centers and the value is the point-plane
    distance of the fourth. Fewer than four instances, or ten consecutive
    degenerate draws, yield zero. Gradients flow to all four sampled
    instances.
    """
    grads = [InstanceGradient.zeros(space) for _ in preds]
    if len(preds) < 4:
        return 0.0, grads
    rng = np.random.default_rng(seed)
    chains = [_CenterChain(space, p) for p in preds]
    centers = np.stack([c.center for c in chains])
    for _ in range(max_attempts):
        idx = rng.choice(len(preds), size=4, replace=False)
        try:
            value, dq = _plane_distance_grads(centers[idx])
        except DegenerateTriple:
            continue
        for j, i in enumerate(idx):
            chains[i].accumulate(grads[i], dq[j])
        return value, grads
    return 0.0, grads


def _region_stats(space: ShapeSpace, vertex_sets):
    """Centroid statistics of fixed vertex subsets, memoized on the space."""
    key = tuple(tuple(int(i) for i in s) for s in vertex_sets)
    cache = getattr(space, "_region_stats_cache", None)
    if cache is None:
        cache = space._region_stats_cache = {}
    if key not in cache:
        mean_c, basis_c = [], []
        for model in space.clusters:
            mean = model.mean.reshape(-1, 3)
            basis = model.basis.reshape(model.mean.size // 3, 3, model.n_components)
            mean_c.append(np.stack([mean[list(s)].mean(axis=0) for s in key]))
            basis_c.append([basis[list(s)].mean(axis=0) for s in key])
        cache[key] = (mean_c, basis_c)
    return cache[key]


class _RegionChain:
    """Centroids of vertex subsets on one posed blended mesh, with chains."""

    def __init__(self, space: ShapeSpace, pred: InstancePrediction, vertex_sets):
        self.space = space
        self.code = pred.shape_code
        self.R, self.dRs = euler_to_matrix_derivatives(pred.pose.rotation)
        self.translation = pred.pose.translation
        self.mean_c, self.basis_c = _region_stats(space, vertex_sets)
        self.recon_c = []
        self.ubar = np.zeros((len(vertex_sets), 3))
        for c in range(space.n_clusters):
            recon = self.mean_c[c] + np.stack(
                [b @ self.code.coefficients[c] for b in self.basis_c[c]]
            )
            self.recon_c.append(recon)
            self.ubar += self.code.cluster_probs[c] * recon
        self.points = self.ubar @ self.R.T + self.translation

    def accumulate(self, grad: InstanceGradient, m: int, dpoint: np.ndarray):
        grad.translation += dpoint
        for k in range(3):
            grad.rotation[k] += float(dpoint @ (self.dRs[k] @ self.ubar[m]))
        dbar = self.R.T @ dpoint
        for c in range(self.space.n_clusters):
            grad.coefficients[c] += self.code.cluster_probs[c] * (self.basis_c[c][m].T @ dbar)
            grad.cluster_probs[c] += float(dbar @ self.recon_c[c][m])


def loss_coplanar_local(pred: InstancePrediction, space: ShapeSpace, wheel_sets):
    """Intra-instance co-planar loss on the four wheel centroids.

    The plane is fit to the first three centroids (canonical order:
    front-left, front-right, rear-left) and the value is the distance of the
    fourth, exactly as in the inter-instance loss.
    """
    if len(wheel_sets) != 4 or any(len(s) == 0 for s in wheel_sets):
        raise ValueError("need four non-empty wheel vertex-index sets")
    chain = _RegionChain(space, pred, [np.asarray(s, dtype=int) for s in wheel_sets])
    value, dq = _plane_distance_grads(chain.points)
    grad = InstanceGradient.zeros(space)
    for m in range(4):
        chain.accumulate(grad, m, dq[m])
    return value, grad


def default_wheel_sets(mesh: CanonicalMesh, band: float = 0.1):
    """Derive wheel vertex sets from the lowest-z band, split into quadrants.

    Vertices within ``band`` of the z range above the minimum are grouped by
    the sign of (x, y) around their median; canonical order FL, FR, RL, RR
    (x forward, y left).
    """
    v = mesh.vertices
    zmin, zmax = v[:, 2].min(), v[:, 2].max()
    low = np.flatnonzero(v[:, 2] <= zmin + band * (zmax - zmin))
    mx, my = np.median(v[low, 0]), np.median(v[low, 1])
    quads = [
        low[(v[low, 0] > mx) & (v[low, 1] > my)],
        low[(v[low, 0] > mx) & (v[low, 1] <= my)],
        low[(v[low, 0] <= mx) & (v[low, 1] > my)],
        low[(v[low, 0] <= mx) & (v[low, 1] <= my)],
    ]
    if any(q.size == 0 for q in quads):
        raise ValueError("could not partition lowest-z vertices into four quadrants")
    return quads


def loss_mesh(pred_mesh: CanonicalMesh, gt_mesh: CanonicalMesh):
    """Mean squared vertex distance; gradient w.r.t. predicted vertices."""
    d = pred_mesh.vertices - gt_mesh.vertices
    m = d.shape[0]
    value = float(np.sum(d * d) / m)
    return value, 2.0 * d / m


def chain_vertex_grad(space: ShapeSpace, code: ShapeCode, dverts: np.ndarray):
    """Push an (N, 3) vertex gradient through the blend to code parameters.

    Returns:
        (dcoefficients, dcluster_probs) matching the code layout.
    """
    flat = np.asarray(dverts, dtype=float).reshape(-1)
    dcoeffs, dprobs = [], np.zeros(space.n_clusters)
    for c, model in enumerate(space.clusters):
        dcoeffs.append(code.cluster_probs[c] * (model.basis.T @ flat))
        dprobs[c] = float(flat @ (model.mean + model.basis @ code.coefficients[c]))
    return dcoeffs, dprobs


def loss_trans(pred, gt):
    """L1 translation loss summed over axes; sign subgradient (0 at ties)."""
    d = np.asarray(pred, dtype=float).reshape(3) - np.asarray(gt, dtype=float).reshape(3)
    return float(np.sum(np.abs(d))), np.sign(d)


def loss_rot(pred, gt):
    """Wrapped L1 rotation loss, summed over axes.

    Per axis, with delta = |r_pred - r_gt| for angles in [-pi, pi]: the
    contribution is delta when delta <= pi and 2*pi - delta otherwise, so
    each axis contributes at most pi.
    """
    p = np.asarray(pred, dtype=float).reshape(3)
    g = np.asarray(gt, dtype=float).reshape(3)
    raw = p - g
    a = np.abs(raw)
    wrap = a > math.pi
    value = float(np.sum(np.where(wrap, TWO_PI - a, a)))
    grad = np.where(wrap, -np.sign(raw), np.sign(raw))
    return value, grad


def loss_cls(logits, label: int):
    """Softmax cross-entropy over the 34 sub-types."""
    z = np.asarray(logits, dtype=float).reshape(-1)
    zmax = z.max()
    lse = zmax + math.log(np.sum(np.exp(z - zmax)))
    value = float(lse - z[label])
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return value, grad


@dataclass
class LossReport:
    """Per-term values of one total-loss evaluation, JSON-serializable."""

    terms: dict
    total: float
    gradient_norms: list

    def to_json(self) -> str:
        return json.dumps(
            {"terms": self.terms, "total": self.total, "gradient_norms": self.gradient_norms},
            sort_keys=True,
        )


def loss_total(preds, scene, gt_meshes, space: ShapeSpace, landmarks, wheel_sets,
               weights: LossWeights = None, seed: int = 0):
    """Weighted sum of all loss terms over one scene.

    Per-instance terms (keypoint, mesh, translation, rotation, sub-type,
    intra-instance co-planar) are averaged over instances so the default
    weights stay comparable across scenes of different density; the
    inter-instance co-planar term is evaluated once on a seeded quadruple.

    Args:
        preds: list of InstancePrediction, aligned with scene.instances.
        scene: SceneAnnotation providing camera, observed keypoints, and
            ground-truth poses / sub-types.
        gt_meshes: ground-truth object-frame meshes, aligned with preds.

    Returns:
        (value, gradients, report): total, per-instance InstanceGradient
        list, and a LossReport with the individual terms.
    """
    if weights is None:
        weights = LossWeights()
    n = len(preds)
    if n != len(scene.instances) or n != len(gt_meshes):
        raise ValueError("preds, scene.instances and gt_meshes must align")
    grads = [InstanceGradient.zeros(space) for _ in preds]
    terms = {k: 0.0 for k in ("loc", "glo", "kpts", "mesh", "trans", "rot", "cls")}

    for i, (pred, inst, gt_mesh) in enumerate(zip(preds, scene.instances, gt_meshes)):
        v, g = loss_kpts(pred, space, landmarks, inst.keypoints, scene.camera)
        terms["kpts"] += v / n
        grads[i].add_scaled(g, weights.kpts / n)

        pred_mesh = CanonicalMesh(
            blend_vertices(space, pred.shape_code), space.faces
        )
        v, dverts = loss_mesh(pred_mesh, gt_mesh)
        terms["mesh"] += v / n
        dcoeffs, dprobs = chain_vertex_grad(space, pred.shape_code, dverts)
        for c in range(space.n_clusters):
            grads[i].coefficients[c] += (weights.mesh / n) * dcoeffs[c]
        grads[i].cluster_probs += (weights.mesh / n) * dprobs

        v, g = loss_trans(pred.pose.translation, inst.pose.translation)
        terms["trans"] += v / n
        grads[i].translation += (weights.trans / n) * g

        v, g = loss_rot(pred.pose.rotation, inst.pose.rotation)
        terms["rot"] += v / n
        grads[i].rotation += (weights.rot / n) * g

        v, g = loss_cls(pred.subtype_logits, inst.sub_type)
        terms["cls"] += v / n
        grads[i].subtype_logits += (weights.cls / n) * g

        v, g = loss_coplanar_local(pred, space, wheel_sets)
        terms["loc"] += v / n
        grads[i].add_scaled(g, weights.loc / n)

    v, glo_grads = loss_coplanar_global(preds, space, seed=seed)
    terms["glo"] = v
    for i in range(n):
        grads[i].add_scaled(glo_grads[i], weights.glo)

    w = weights.as_dict()
    total = float(sum(w[k] * terms[k] for k in terms))
    report = LossReport(
        terms=dict(terms), total=total, gradient_norms=[g.norm() for g in grads]
    )
    return total, grads, report


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference gradient comparison."""

    name: str
    max_rel_err: float
    n_params: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def check_gradients(fn, x0, eps: float = 1e-6, tol: float = 1e-4,
                    name: str = "loss", coords=None) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    Args:
        fn: callable x -> (value, gradient) over a flat parameter vector.
        x0: evaluation point; must be away from non-smooth points of fn
            (abs-value kinks, wraparound boundaries, visibility switches).
        eps: base step; scaled per coordinate by max(1, |x_i|).
        coords: optional coordinate indices to difference (default: all).

    The error metric is |fd - g| / max(1, |fd|, |g|), reported as its max
    over the checked coordinates.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    _, g = fn(x0)
    g = np.asarray(g, dtype=float).reshape(-1)
    idx = np.arange(x0.size) if coords is None else np.asarray(coords, dtype=int)
    fd = np.empty(idx.size)
    for k, i in enumerate(idx):
        h = eps * max(1.0, abs(x0[i]))
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        fd[k] = (fn(xp)[0] - fn(xm)[0]) / (2.0 * h)
    ga = g[idx]
    denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(ga)))
    rel = float(np.max(np.abs(fd - ga) / denom)) if idx.size else 0.0
    return GradCheckReport(name=name, max_rel_err=rel, n_params=int(idx.size), tol=tol)
