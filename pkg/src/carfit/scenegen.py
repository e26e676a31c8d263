"""Deterministic synthetic car meshes and traffic scenes.

Provides the ground truth used by fitter recovery tests, loss-consistency
tests and metric oracle tests: a parametric box-car mesh family on a fixed
80-vertex topology, and a seeded scene generator that places instances on a
common ground plane and annotates exact keypoint projections.

Canonical object frame: x forward, y left, z up; wheel bottoms at z = 0.
Scene camera frame: x right, y down, z forward; the ground plane is
y = ground_height (positive, i.e. below the camera).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, Pose6DoF, euler_to_matrix, project_points
from .shapespace import (
    CanonicalMesh,
    N_KEYPOINTS,
    N_SUBTYPES,
    ShapeCode,
    ShapeSpace,
    blend_center,
    blend_shape,
    default_landmarks,
)

# Box corner order: index = 4*(x>0) + 2*(y>0) + (z>0).
_BOX_QUADS = [
    (0, 1, 3, 2),  # -x
    (4, 6, 7, 5),  # +x
    (0, 4, 5, 1),  # -y
    (2, 3, 7, 6),  # +y
    (0, 2, 6, 4),  # -z
    (1, 5, 7, 3),  # +z
]


def _box(center, size):
    cx, cy, cz = center
    dx, dy, dz = size
    verts = np.array(
        [
            [cx + sx * dx / 2.0, cy + sy * dy / 2.0, cz + sz * dz / 2.0]
            for sx in (-1.0, 1.0)
            for sy in (-1.0, 1.0)
            for sz in (-1.0, 1.0)
        ]
    )
    faces = []
    for a, b, c, d in _BOX_QUADS:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return verts, np.array(faces, dtype=np.int64)


@dataclass
class CarParams:
    """Shape parameters of one synthetic box car (meters)."""

    length: float = 4.6
    width: float = 1.8
    body_height: float = 0.7
    cabin_height: float = 0.55
    cabin_len_frac: float = 0.48
    cabin_offset_frac: float = 0.0
    wheel_radius: float = 0.33
    wheel_width: float = 0.22
    wheelbase_frac: float = 0.6
    track_frac: float = 0.86
    bumper_len: float = 0.16
    mirror_scale: float = 1.0
    # Per-wheel vertical offsets (FL, FR, RL, RR); nonzero values break the
    # exact wheel coplanarity that the default family guarantees.
    wheel_lift: tuple = (0.0, 0.0, 0.0, 0.0)


SYNTHETIC_VERTEX_COUNT = 80
SYNTHETIC_FACE_COUNT = 120

# Part layout: body, cabin, front bumper, rear bumper, FL, FR, RL, RR wheel,
# left mirror, right mirror. 8 vertices per part.
_WHEEL_PART_OFFSET = 4 * 8


def synthetic_wheel_sets():
    """Vertex index sets of the four wheels, canonical order FL, FR, RL, RR."""
    return [
        np.arange(_WHEEL_PART_OFFSET + 8 * i, _WHEEL_PART_OFFSET + 8 * (i + 1))
        for i in range(4)
    ]


def make_car_mesh(params: CarParams, car_id: str = "", sub_type: int = 0) -> CanonicalMesh:
    """Build one box car on the fixed 80-vertex / 120-face topology."""
    p = params
    zb = 0.8 * p.wheel_radius  # body underside
    cab_len = p.cabin_len_frac * p.length
    cab_cx = p.cabin_offset_frac * p.length
    wb = p.wheelbase_frac * p.length
    track = p.track_frac * p.width
    r = p.wheel_radius
    parts = [
        _box((0.0, 0.0, zb + p.body_height / 2.0), (p.length, p.width, p.body_height)),
        _box(
            (cab_cx, 0.0, zb + p.body_height + p.cabin_height / 2.0),
            (cab_len, 0.88 * p.width, p.cabin_height),
        ),
        _box(
            (p.length / 2.0 + p.bumper_len / 2.0, 0.0, zb + 0.35 * p.body_height),
            (p.bumper_len, 0.95 * p.width, 0.5 * p.body_height),
        ),
        _box(
            (-p.length / 2.0 - p.bumper_len / 2.0, 0.0, zb + 0.35 * p.body_height),
            (p.bumper_len, 0.95 * p.width, 0.5 * p.body_height),
        ),
    ]
    wheel_xy = [(wb / 2.0, track / 2.0), (wb / 2.0, -track / 2.0),
                (-wb / 2.0, track / 2.0), (-wb / 2.0, -track / 2.0)]
    for (wx, wy), lift in zip(wheel_xy, p.wheel_lift):
        parts.append(_box((wx, wy, r + lift), (1.9 * r, p.wheel_width, 2.0 * r)))
    mirror = (0.18 * p.mirror_scale, 0.16 * p.mirror_scale, 0.12 * p.mirror_scale)
    mz = zb + p.body_height + 0.45 * p.cabin_height
    mx = cab_cx + 0.4 * cab_len
    parts.append(_box((mx, p.width / 2.0 + 0.1, mz), mirror))
    parts.append(_box((mx, -p.width / 2.0 - 0.1, mz), mirror))

    verts, faces, at = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + at)
        at += v.shape[0]
    return CanonicalMesh(np.vstack(verts), np.vstack(faces), car_id=car_id, sub_type=sub_type)


# Base parameters of four loose vehicle families (compact, sedan, SUV, van);
# K-means separates the database along these.
_FAMILIES = [
    CarParams(length=3.7, width=1.66, body_height=0.62, cabin_height=0.52, wheel_radius=0.29),
    CarParams(length=4.6, width=1.82, body_height=0.68, cabin_height=0.50, wheel_radius=0.32),
    CarParams(length=4.9, width=1.92, body_height=0.85, cabin_height=0.62, wheel_radius=0.37),
    CarParams(length=5.3, width=1.98, body_height=1.05, cabin_height=0.72, wheel_radius=0.36,
              cabin_len_frac=0.62),
]


def make_car_database(n_cars: int = 24, seed: int = 0, n_families: int = 4,
                      wheel_lift_scale: float = 0.0):
    """Sample a synthetic mesh database (deterministic per seed).

    With wheel_lift_scale > 0 each car gets random per-wheel vertical
    offsets, producing a family whose blends have non-coplanar wheels (used
    to probe the intra-instance co-planar loss away from its kink).
    """
    rng = np.random.default_rng(seed)
    n_families = min(n_families, len(_FAMILIES))
    meshes = []
    for i in range(n_cars):
        base = _FAMILIES[i % n_families]
        params = replace(
            base,
            length=base.length * rng.uniform(0.94, 1.06),
            width=base.width * rng.uniform(0.95, 1.05),
            body_height=base.body_height * rng.uniform(0.93, 1.07),
            cabin_height=base.cabin_height * rng.uniform(0.92, 1.08),
            cabin_len_frac=base.cabin_len_frac * rng.uniform(0.92, 1.08),
            cabin_offset_frac=rng.uniform(-0.06, 0.06),
            wheel_radius=base.wheel_radius * rng.uniform(0.92, 1.08),
            wheel_width=rng.uniform(0.18, 0.26),
            wheelbase_frac=rng.uniform(0.56, 0.64),
            track_frac=rng.uniform(0.8, 0.92),
            bumper_len=rng.uniform(0.12, 0.2),
            mirror_scale=rng.uniform(0.85, 1.15),
            wheel_lift=tuple(wheel_lift_scale * rng.uniform(-1.0, 1.0, size=4)),
        )
        meshes.append(make_car_mesh(params, car_id=f"syn-{i:03d}", sub_type=i % N_SUBTYPES))
    return meshes


@dataclass
class InstanceAnnotation:
    """One annotated car instance of a scene."""

    car_id: str
    sub_type: int
    pose: Pose6DoF
    keypoints: np.ndarray  # (66, 3): x, y, visibility
    score: float | None = None
    shape_code: ShapeCode | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(N_KEYPOINTS, 3)


@dataclass
class SceneAnnotation:
    """Per-image camera plus instance annotations."""

    camera: CameraIntrinsics
    image_size: tuple  # (width, height) pixels
    instances: list = field(default_factory=list)


@dataclass
class SceneGenConfig:
    """Knobs of the synthetic scene generator (ApolloCar3D-like defaults)."""

    image_width: int = 3384
    image_height: int = 2710
    focal: float = 2300.0
    ground_height: float = 1.5     # camera is this far above the car centers
    height_jitter: float = 0.0     # sigma_h, meters
    min_depth: float = 5.0
    max_depth: float = 60.0
    tilt_jitter_deg: float = 2.0   # pitch/roll jitter bound
    coeff_clip: float = 2.0        # shape coeffs ~ truncated normal, +-clip*sqrt(eig)
    occlusion_rate: float = 0.0    # q
    pixel_noise: float = 0.0       # sigma_px

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal, self.focal, self.image_width / 2.0, self.image_height / 2.0
        )


def _truncated_normal(rng, clip):
    u = rng.normal()
    while abs(u) > clip:
        u = rng.normal()
    return u


def sample_shape_code(space: ShapeSpace, rng, clip: float = 2.0) -> ShapeCode:
    """One-hot cluster, coefficients from the truncated PCA prior."""
    cluster = int(rng.integers(space.n_clusters))
    probs = np.zeros(space.n_clusters)
    probs[cluster] = 1.0
    coeffs = []
    for model in space.clusters:
        c = np.array([_truncated_normal(rng, clip) * math.sqrt(ev) for ev in model.eigenvalues])
        coeffs.append(c)
    code = ShapeCode(probs, coeffs)
    # Zero the inactive clusters so the code and its blended mesh agree
    # regardless of how downstream consumers treat unused coefficients.
    for c in range(space.n_clusters):
        if c != cluster:
            code.coefficients[c][:] = 0.0
    return code


def generate_scene(space: ShapeSpace, n_cars: int, cfg: SceneGenConfig = SceneGenConfig(),
                   seed: int = 0, landmarks=None, scene_id: str = ""):
    """Generate one ground-truth scene plus its per-instance meshes.

    Car centers (mean of posed mesh vertices) land exactly on the plane
    y = ground_height when height_jitter is zero; keypoints are exact
    projections of the landmark vertices before optional pixel noise.
    Deterministic for a fixed seed.

    Returns:
        (SceneAnnotation, list[CanonicalMesh]) with meshes in object frame.
    """
    if n_cars < 1:
        raise ValueError("n_cars must be >= 1")
    rng = np.random.default_rng(seed)
    cam = cfg.camera()
    w, h = cfg.image_width, cfg.image_height
    if landmarks is None:
        landmarks = default_landmarks(space.n_vertices)
    landmarks = np.asarray(landmarks, dtype=int)

    tilt = math.radians(cfg.tilt_jitter_deg)
    phi_max = 0.8 * math.atan((w / 2.0) / cfg.focal)
    instances, meshes = [], []
    for i in range(n_cars):
        code = sample_shape_code(space, rng, cfg.coeff_clip)
        mesh = blend_shape(space, code)
        mesh.car_id = f"{scene_id}car-{i:02d}" if scene_id else f"car-{i:02d}"
        mesh.sub_type = int(rng.integers(N_SUBTYPES))

        rotation = np.array(
            [
                math.pi / 2.0 + rng.uniform(-tilt, tilt),
                rng.uniform(-math.pi, math.pi),
                rng.uniform(-tilt, tilt),
            ]
        )
        depth = rng.uniform(cfg.min_depth, cfg.max_depth)
        x = depth * math.tan(rng.uniform(-phi_max, phi_max))
        y = cfg.ground_height + (rng.normal(0.0, cfg.height_jitter) if cfg.height_jitter > 0 else 0.0)
        center = np.array([x, y, depth])
        # Solve for T so the posed mesh centroid sits exactly at `center`.
        R = euler_to_matrix(rotation)
        translation = center - R @ blend_center(space, code)
        pose = Pose6DoF(translation, rotation)

        pixels, _, in_front = project_points(mesh.vertices[landmarks], pose, cam)
        kpts = np.zeros((N_KEYPOINTS, 3))
        for k in range(N_KEYPOINTS):
            visible = bool(in_front[k])
            px, py = (pixels[k] if visible else (0.0, 0.0))
            if visible and not (0.0 <= px < w and 0.0 <= py < h):
                visible = False
            if visible and cfg.occlusion_rate > 0 and rng.random() < cfg.occlusion_rate:
                visible = False
            if visible and cfg.pixel_noise > 0:
                px += rng.normal(0.0, cfg.pixel_noise)
                py += rng.normal(0.0, cfg.pixel_noise)
                if not (0.0 <= px < w and 0.0 <= py < h):
                    visible = False
            kpts[k] = (px, py, 1.0 if visible else 0.0)
        instances.append(
            InstanceAnnotation(
                car_id=mesh.car_id,
                sub_type=mesh.sub_type,
                pose=pose,
                keypoints=kpts,
                shape_code=code,
            )
        )
        meshes.append(mesh)
    return SceneAnnotation(cam, (w, h), instances), meshes
