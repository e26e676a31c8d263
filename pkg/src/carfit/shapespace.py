"""Divide-and-conquer PCA shape representation for fixed-topology car meshes.

A database of meshes sharing one topology is partitioned with seeded K-means
on flattened vertex coordinates; each cluster gets its own mean and truncated
PCA basis. A shape is encoded as cluster membership probabilities plus
per-cluster PCA coefficients, and decoded by blending the per-cluster
reconstructions with those probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyCluster, SimplexViolation, TopologyMismatch
from .geometry import project_points

# Canonical production topology (ApolloCar3D-converted meshes).
CANONICAL_VERTEX_COUNT = 1352
CANONICAL_FACE_COUNT = 2700

N_KEYPOINTS = 66
N_SUBTYPES = 34

SIMPLEX_ATOL = 1e-4


@dataclass
class CanonicalMesh:
    """Fixed-topology triangle mesh of one vehicle.

    Vertices are meters in the canonical object frame: x forward, y left,
    z up (wheels at lowest z).
    """

    vertices: np.ndarray
    faces: np.ndarray
    car_id: str = ""
    sub_type: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(f"face indices out of range for mesh {self.car_id!r}")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def flat(self) -> np.ndarray:
        return self.vertices.reshape(-1)


@dataclass
class ClusterModel:
    """Mean + truncated PCA basis of one mesh cluster (flattened vertices)."""

    member_ids: list
    mean: np.ndarray            # (3N,)
    basis: np.ndarray           # (3N, n), orthonormal columns
    eigenvalues: np.ndarray     # (n,), non-increasing

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.basis = np.asarray(self.basis, dtype=float).reshape(self.mean.shape[0], -1)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float).reshape(-1)

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


@dataclass
class ShapeSpace:
    """K cluster models over one shared face topology."""

    clusters: list
    faces: np.ndarray

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_vertices(self) -> int:
        return self.clusters[0].mean.shape[0] // 3

    def component_counts(self):
        return [c.n_components for c in self.clusters]

    def zero_code(self, cluster: int | None = None) -> "ShapeCode":
        """All-zero coefficients; uniform probs, or one-hot if cluster given."""
        K = self.n_clusters
        probs = np.full(K, 1.0 / K)
        if cluster is not None:
            probs = np.zeros(K)
            probs[cluster] = 1.0
        return ShapeCode(probs, [np.zeros(c.n_components) for c in self.clusters])


@dataclass
class ShapeCode:
    """Encoded shape: cluster probabilities + per-cluster PCA coefficients."""

    cluster_probs: np.ndarray
    coefficients: list

    def __post_init__(self):
        self.cluster_probs = np.asarray(self.cluster_probs, dtype=float).reshape(-1)
        self.coefficients = [np.asarray(c, dtype=float).reshape(-1) for c in self.coefficients]

    def copy(self) -> "ShapeCode":
        return ShapeCode(self.cluster_probs.copy(), [c.copy() for c in self.coefficients])


def _check_simplex(probs, atol=SIMPLEX_ATOL):
    probs = np.asarray(probs, dtype=float)
    if probs.min() < -atol or abs(probs.sum() - 1.0) > atol:
        raise SimplexViolation(
            f"cluster probabilities must be a simplex point (sum={probs.sum():.6f}, "
            f"min={probs.min():.6f})"
        )


def check_shared_topology(meshes):
    """Raise TopologyMismatch unless all meshes share counts and face lists."""
    if not meshes:
        raise ValueError("empty mesh list")
    ref = meshes[0]
    for m in meshes[1:]:
        if m.n_vertices != ref.n_vertices or not np.array_equal(m.faces, ref.faces):
            raise TopologyMismatch(
                f"mesh {m.car_id!r} does not share the canonical topology of {ref.car_id!r}"
            )


def _kmeans_pp_init(X, K, rng):
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            centers[k] = X[rng.integers(n)]
        else:
            centers[k] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def _kmeans_once(X, K, rng, max_iters, tol):
    """One seeded Lloyd run; returns labels or None on an empty cluster."""
    centers = _kmeans_pp_init(X, K, rng)
    labels = np.zeros(X.shape[0], dtype=int)
    for _ in range(max_iters):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        new_centers = np.empty_like(centers)
        for k in range(K):
            members = X[labels == k]
            if members.shape[0] == 0:
                return None
            new_centers[k] = members.mean(axis=0)
        movement = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if movement < tol:
            break
    return labels


def seeded_kmeans(X, K, seed, max_iters=100, tol=1e-9, max_reseeds=10):
    """Deterministic K-means with k-means++ init.

    Empty clusters trigger a re-seed (up to max_reseeds fresh inits) before
    giving up with EmptyCluster.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] < K:
        raise ValueError(f"need at least K={K} samples, got {X.shape[0]}")
    for attempt in range(max_reseeds):
        rng = np.random.default_rng(seed + attempt)
        labels = _kmeans_once(X, K, rng, max_iters, tol)
        if labels is not None:
            return labels
    raise EmptyCluster(f"K-means produced an empty cluster in {max_reseeds} seeded attempts")


def _svd_flip(Vt):
    # Fix the SVD sign ambiguity: largest-|.| entry of each component positive.
    signs = np.sign(Vt[np.arange(Vt.shape[0]), np.argmax(np.abs(Vt), axis=1)])
    signs[signs == 0] = 1.0
    return Vt * signs[:, None]


def _fit_cluster(flat, ids, n_max):
    mean = flat.mean(axis=0)
    centered = flat - mean
    n = min(n_max, flat.shape[0] - 1)
    if n <= 0:
        return ClusterModel(ids, mean, np.zeros((flat.shape[1], 0)), np.zeros(0))
    _, S, Vt = np.linalg.svd(centered, full_matrices=False)
    Vt = _svd_flip(Vt[:n])
    eigenvalues = (S[:n] ** 2) / (flat.shape[0] - 1)
    return ClusterModel(ids, mean, Vt.T, eigenvalues)


def build_shape_space(meshes, K=4, n_max=10, seed=0) -> ShapeSpace:
    """Cluster a mesh database and fit one PCA model per cluster.

    K-means runs on raw flattened vertex coordinates (meshes share a
    canonical frame, so no alignment step). Each cluster keeps its mean and
    the top-n right singular vectors of the mean-centered member matrix,
    with n <= min(n_max, cluster size - 1). Deterministic given the seed.
    """
    check_shared_topology(meshes)
    flat = np.stack([m.flat() for m in meshes])
    labels = seeded_kmeans(flat, K, seed)
    clusters = []
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        ids = [meshes[i].car_id for i in idx]
        clusters.append(_fit_cluster(flat[idx], ids, n_max))
    # Stable cluster order: by first member position in the input list.
    firsts = [np.flatnonzero(labels == k)[0] for k in range(K)]
    order = np.argsort(firsts)
    return ShapeSpace([clusters[k] for k in order], meshes[0].faces)


def reconstruct_in_cluster(space: ShapeSpace, cluster: int, coeffs) -> CanonicalMesh:
    """Decode PCA coefficients inside one cluster: mean + basis @ coeffs."""
    model = space.clusters[cluster]
    coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
    if coeffs.shape[0] != model.n_components:
        raise ValueError(
            f"cluster {cluster} expects {model.n_components} coefficients, got {coeffs.shape[0]}"
        )
    flat = model.mean + model.basis @ coeffs
    return CanonicalMesh(flat.reshape(-1, 3), space.faces, car_id=f"cluster{cluster}")


def blend_vertices(space: ShapeSpace, code: ShapeCode) -> np.ndarray:
    """Probability-weighted sum of per-cluster reconstructions, as (N, 3)."""
    _check_simplex(code.cluster_probs)
    flat = np.zeros(space.clusters[0].mean.shape[0])
    for c, model in enumerate(space.clusters):
        w = code.cluster_probs[c]
        flat += w * (model.mean + model.basis @ code.coefficients[c])
    return flat.reshape(-1, 3)


def blend_shape(space: ShapeSpace, code: ShapeCode) -> CanonicalMesh:
    """Decode a full ShapeCode into a mesh on the shared topology."""
    return CanonicalMesh(blend_vertices(space, code), space.faces, car_id="blend")


def shape_error(pred: CanonicalMesh, gt: CanonicalMesh) -> float:
    """Mean over vertices of squared Euclidean vertex distance."""
    if pred.n_vertices != gt.n_vertices:
        raise TopologyMismatch(
            f"vertex counts differ: {pred.n_vertices} vs {gt.n_vertices}"
        )
    d = pred.vertices - gt.vertices
    return float(np.mean(np.sum(d * d, axis=1)))


def cluster_center_stats(space: ShapeSpace):
    """Per-cluster centroid statistics, cached on the space.

    Returns:
        (mean_centers, basis_centers): mean_centers is (K, 3) — the vertex
        centroid of each cluster mean; basis_centers[c] is (3, n_c) — each
        basis column averaged over vertices, i.e. d centroid / d coefficient.
    """
    cached = getattr(space, "_center_stats", None)
    if cached is not None:
        return cached
    mean_centers = np.stack([m.mean.reshape(-1, 3).mean(axis=0) for m in space.clusters])
    basis_centers = [
        m.basis.reshape(m.mean.size // 3, 3, m.n_components).mean(axis=0)
        for m in space.clusters
    ]
    space._center_stats = (mean_centers, basis_centers)
    return space._center_stats


def blend_center(space: ShapeSpace, code: ShapeCode) -> np.ndarray:
    """Object-frame centroid of the blended mesh, (3,).

    Computed from the cached cluster centroid statistics; scene generation
    and the inter-instance co-planar loss share this exact code path.
    """
    mean_centers, basis_centers = cluster_center_stats(space)
    center = np.zeros(3)
    for c in range(space.n_clusters):
        center += code.cluster_probs[c] * (
            mean_centers[c] + basis_centers[c] @ code.coefficients[c]
        )
    return center


def fit_code(space: ShapeSpace, target: CanonicalMesh, temperature: float = 1.0) -> ShapeCode:
    """Encode a mesh: per-cluster basis projection + softmax cluster scores.

    Coefficients are the orthogonal projection of the centered target onto
    each cluster basis. Cluster probabilities are a softmax of the negative
    per-cluster reconstruction error (total squared residual of the
    flattened vertex vector) with the given temperature; temperature 0
    selects the best cluster hard (one-hot).
    """
    if target.vertices.shape[0] != space.n_vertices:
        raise TopologyMismatch(
            f"target has {target.vertices.shape[0]} vertices, space expects {space.n_vertices}"
        )
    x = target.flat()
    coeffs, errors = [], []
    for model in space.clusters:
        c = model.basis.T @ (x - model.mean)
        resid = x - model.mean - model.basis @ c
        coeffs.append(c)
        errors.append(float(resid @ resid))
    errors = np.array(errors)
    if temperature == 0.0:
        probs = np.zeros(space.n_clusters)
        probs[int(np.argmin(errors))] = 1.0
    else:
        z = -errors / temperature
        z -= z.max()
        e = np.exp(z)
        probs = e / e.sum()
    return ShapeCode(probs, coeffs)


def retrieval_baseline(meshes, target: CanonicalMesh, exclude_self: bool = True) -> CanonicalMesh:
    """Nearest-database-mesh baseline under shape_error.

    With exclude_self, a database entry sharing the target's car_id is
    skipped (held-out evaluation).
    """
    best, best_err = None, np.inf
    for m in meshes:
        if exclude_self and m.car_id == target.car_id:
            continue
        err = shape_error(m, target)
        if err < best_err:
            best, best_err = m, err
    if best is None:
        raise ValueError("no candidate meshes to retrieve from")
    return best


def pack_code(space: ShapeSpace, code: ShapeCode) -> np.ndarray:
    """Flatten a ShapeCode to [probs, coeffs_0, ..., coeffs_{K-1}]."""
    return np.concatenate([code.cluster_probs] + list(code.coefficients))


def unpack_code(space: ShapeSpace, vec) -> ShapeCode:
    vec = np.asarray(vec, dtype=float).reshape(-1)
    K = space.n_clusters
    probs = vec[:K]
    coeffs, at = [], K
    for model in space.clusters:
        coeffs.append(vec[at : at + model.n_components])
        at += model.n_components
    if at != vec.shape[0]:
        raise ValueError(f"packed code has length {vec.shape[0]}, expected {at}")
    return ShapeCode(probs, coeffs)


def select_semantic_vertices(gt_meshes, annotations, min_votes: int = 5):
    """Vote per keypoint slot for the mesh vertex whose projection sits nearest.

    For every annotated instance the matching ground-truth mesh is posed and
    projected; each visible 2D keypoint votes for its nearest projected
    vertex. Each of the 66 slots is resolved to the vertex index with the
    most votes (ties: lowest index). Slots with fewer than min_votes total
    votes are left unresolved (-1).

    Args:
        gt_meshes: CanonicalMesh list; matched to instances by car_id.
        annotations: SceneAnnotation list with ground-truth poses/keypoints.
        min_votes: minimum votes for a slot to count as resolved.

    Returns:
        (indices, vote_counts): (66,) int arrays; unresolved slots hold -1.
    """
    by_id = {m.car_id: m for m in gt_meshes}
    votes = [dict() for _ in range(N_KEYPOINTS)]
    for scene in annotations:
        for inst in scene.instances:
            mesh = by_id.get(inst.car_id)
            if mesh is None:
                continue
            pixels, _, in_front = project_points(mesh.vertices, inst.pose, scene.camera)
            valid = np.flatnonzero(in_front)
            if valid.size == 0:
                continue
            for slot in range(N_KEYPOINTS):
                x, y, v = inst.keypoints[slot]
                if v < 0.5:
                    continue
                d2 = (pixels[valid, 0] - x) ** 2 + (pixels[valid, 1] - y) ** 2
                winner = int(valid[np.argmin(d2)])
                votes[slot][winner] = votes[slot].get(winner, 0) + 1
    indices = np.full(N_KEYPOINTS, -1, dtype=int)
    counts = np.zeros(N_KEYPOINTS, dtype=int)
    for slot in range(N_KEYPOINTS):
        total = sum(votes[slot].values())
        counts[slot] = total
        if total >= min_votes:
            best = max(votes[slot].items(), key=lambda kv: (kv[1], -kv[0]))
            indices[slot] = best[0]
    return indices, counts


def default_landmarks(n_vertices: int) -> np.ndarray:
    """Shipped fallback landmark table: 66 evenly spread vertex indices."""
    if n_vertices < N_KEYPOINTS:
        raise ValueError(f"need >= {N_KEYPOINTS} vertices, got {n_vertices}")
    return np.round(np.linspace(0, n_vertices - 1, N_KEYPOINTS)).astype(int)


def resolve_landmarks(indices, n_vertices: int) -> np.ndarray:
    """Fill unresolved (-1) slots from the default landmark table."""
    indices = np.asarray(indices, dtype=int).copy()
    fallback = default_landmarks(n_vertices)
    missing = indices < 0
    indices[missing] = fallback[missing]
    return indices
