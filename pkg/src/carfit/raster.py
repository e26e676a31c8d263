"""Minimal software rasterizer: binary masks of posed meshes.

Triangles are projected through the pinhole model (clipped against a near
plane first), then scan-converted with a top-left fill rule. Binary masks
need no z-buffer. Used for the multi-view IoU inside the 3D detection
metric and for qualitative overlays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import CameraIntrinsics, Pose6DoF, matrix_to_euler
from .shapespace import CanonicalMesh


ZNEAR = 0.01  # meters


@dataclass
class RasterConfig:
    width: int = 480
    height: int = 360
    views: int = 100
    radius_scale: float = 2.5   # camera distance / bounding-sphere radius
    focal_scale: float = 0.9    # virtual focal length / min(width, height)

    def size(self):
        return (self.width, self.height)


@dataclass
class MaskImage:
    """Row-major boolean pixel grid."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(self.height, self.width)

    def count(self) -> int:
        return int(self.bits.sum())


@njit(cache=True)
def _fill_triangles(grid, xs, ys):
    """Scan-convert triangles (pixel centers at +0.5) with a top-left rule."""
    h, w = grid.shape
    for t in range(xs.shape[0]):
        x0, x1, x2 = xs[t, 0], xs[t, 1], xs[t, 2]
        y0, y1, y2 = ys[t, 0], ys[t, 1], ys[t, 2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
        lo_x = min(x0, min(x1, x2))
        hi_x = max(x0, max(x1, x2))
        lo_y = min(y0, min(y1, y2))
        hi_y = max(y0, max(y1, y2))
        ix0 = max(int(math.ceil(lo_x - 0.5)), 0)
        ix1 = min(int(math.floor(hi_x - 0.5)), w - 1)
        iy0 = max(int(math.ceil(lo_y - 0.5)), 0)
        iy1 = min(int(math.floor(hi_y - 0.5)), h - 1)
        if ix0 > ix1 or iy0 > iy1:
            continue
        for py in range(iy0, iy1 + 1):
            cy = py + 0.5
            for px in range(ix0, ix1 + 1):
                cx = px + 0.5
                e0 = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
                e1 = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1)
                e2 = (x0 - x2) * (cy - y2) - (y0 - y2) * (cx - x2)
                ok0 = e0 > 0.0 or (e0 == 0.0 and (y1 - y0 < 0.0 or (y1 == y0 and x1 - x0 > 0.0)))
                ok1 = e1 > 0.0 or (e1 == 0.0 and (y2 - y1 < 0.0 or (y2 == y1 and x2 - x1 > 0.0)))
                ok2 = e2 > 0.0 or (e2 == 0.0 and (y0 - y2 < 0.0 or (y0 == y2 and x0 - x2 > 0.0)))
                if ok0 and ok1 and ok2:
                    grid[py, px] = 1
    return grid


def _clip_znear(pts, znear):
    """Sutherland-Hodgman clip of one triangle against z >= znear."""
    out = []
    for i in range(3):
        a, b = pts[i], pts[(i + 1) % 3]
        a_in, b_in = a[2] >= znear, b[2] >= znear
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (znear - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return out


def render_mask(mesh: CanonicalMesh, pose: Pose6DoF, cam: CameraIntrinsics, size) -> MaskImage:
    """Binary silhouette of a posed mesh.

    Triangles crossing the near plane (depth 0.01 m) are clipped against it;
    triangles entirely behind it are dropped. Pixels are set when covered by
    any triangle.
    """
    w, h = int(size[0]), int(size[1])
    if w <= 0 or h <= 0:
        raise ValueError(f"mask size must be positive, got {w}x{h}")
    znear = ZNEAR
    grid = np.zeros((h, w), dtype=np.uint8)
    cam_pts = pose.transform(mesh.vertices)
    z = cam_pts[:, 2]
    inside = z >= znear
    faces = mesh.faces
    n_in = inside[faces].sum(axis=1)

    tri_list = []
    full = faces[n_in == 3]
    if full.size:
        zz = cam_pts[:, 2]
        safe = np.where(inside, zz, 1.0)
        u = cam.fx * cam_pts[:, 0] / safe + cam.px
        v = cam.fy * cam_pts[:, 1] / safe + cam.py
        pix = np.stack([u, v], axis=1)
        tri_list.append(pix[full])
    for f in faces[(n_in > 0) & (n_in < 3)]:
        poly = _clip_znear([cam_pts[f[0]], cam_pts[f[1]], cam_pts[f[2]]], znear)
        if len(poly) < 3:
            continue
        pix = np.array(
            [[cam.fx * p[0] / p[2] + cam.px, cam.fy * p[1] / p[2] + cam.py] for p in poly]
        )
        for k in range(1, len(poly) - 1):
            tri_list.append(pix[[0, k, k + 1]][None, :, :])
    if tri_list:
        tris = np.concatenate(tri_list, axis=0)
        _fill_triangles(grid, np.ascontiguousarray(tris[:, :, 0]),
                        np.ascontiguousarray(tris[:, :, 1]))
    return MaskImage(w, h, grid)


def mask_iou(a: MaskImage, b: MaskImage) -> float:
    """Intersection over union of two masks; 1.0 when both are empty."""
    if a.bits.shape != b.bits.shape:
        raise ValueError("mask sizes differ")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a.bits, b.bits).sum()
    return float(inter / union)


@dataclass
class ViewCamera:
    """Virtual look-at camera: world->view rotation and world position."""

    rotation: np.ndarray  # (3, 3)
    position: np.ndarray  # (3,)

    def mesh_pose(self, pose: Pose6DoF) -> Pose6DoF:
        """Compose an object pose (object->world) into this view's frame."""
        R = self.rotation @ pose.matrix
        t = self.rotation @ (pose.translation - self.position)
        return Pose6DoF(t, matrix_to_euler(R))


def _grid_shape(views):
    n_el = max(1, int(math.floor(math.sqrt(views))))
    while views % n_el:
        n_el -= 1
    return views // n_el, n_el


def view_cameras(center, radius: float, views: int = 100) -> list:
    """Deterministic azimuth x elevation sphere of look-at cameras.

    100 views form a 10x10 grid; other counts factor as evenly as possible.
    Elevations span +-75 degrees (avoiding the poles of the look-at frame),
    azimuths wrap the full circle. World frame is y-down, matching the scene
    camera convention.
    """
    center = np.asarray(center, dtype=float).reshape(3)
    n_az, n_el = _grid_shape(views)
    azimuths = np.linspace(0.0, 2.0 * math.pi, n_az, endpoint=False)
    if n_el == 1:
        elevations = np.array([0.0])
    else:
        elevations = np.linspace(math.radians(-75.0), math.radians(75.0), n_el)
    down = np.array([0.0, 1.0, 0.0])
    cams = []
    for el in elevations:
        for az in azimuths:
            direction = np.array(
                [math.cos(el) * math.cos(az), -math.sin(el), math.cos(el) * math.sin(az)]
            )
            pos = center + radius * direction
            zax = center - pos
            zax = zax / np.linalg.norm(zax)
            yax = down - (down @ zax) * zax
            yax = yax / np.linalg.norm(yax)
            xax = np.cross(yax, zax)
            cams.append(ViewCamera(np.stack([xax, yax, zax]), pos))
    return cams


def multiview_iou(pred_mesh: CanonicalMesh, pred_pose: Pose6DoF,
                  gt_mesh: CanonicalMesh, gt_pose: Pose6DoF,
                  cfg: RasterConfig = None) -> float:
    """Mean mask IoU over a deterministic sphere of virtual views.

    The view sphere is centered on the joint bounding sphere of both posed
    meshes (making the measure symmetric under swapping prediction and
    ground truth) at radius_scale times its radius.
    """
    if cfg is None:
        cfg = RasterConfig()
    pred_pts = pred_pose.transform(pred_mesh.vertices)
    gt_pts = gt_pose.transform(gt_mesh.vertices)
    center = 0.5 * (pred_pts.mean(axis=0) + gt_pts.mean(axis=0))
    radius = max(
        float(np.max(np.linalg.norm(pred_pts - center, axis=1))),
        float(np.max(np.linalg.norm(gt_pts - center, axis=1))),
        0.1,
    )
    f = cfg.focal_scale * min(cfg.width, cfg.height)
    vcam = CameraIntrinsics(f, f, cfg.width / 2.0, cfg.height / 2.0)
    total = 0.0
    cams = view_cameras(center, cfg.radius_scale * radius, cfg.views)
    for vc in cams:
        mp = render_mask(pred_mesh, vc.mesh_pose(pred_pose), vcam, cfg.size())
        mg = render_mask(gt_mesh, vc.mesh_pose(gt_pose), vcam, cfg.size())
        total += mask_iou(mp, mg)
    return total / len(cams)


def write_pgm(mask: MaskImage, path):
    """Binary PGM (P5), 0 background / 255 foreground."""
    data = np.where(mask.bits, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_ppm(rgb: np.ndarray, path):
    """Binary PPM (P6) from an (h, w, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())
