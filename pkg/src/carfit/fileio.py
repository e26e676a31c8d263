"""File formats: OBJ meshes, mesh-database index, shape-space and scene JSON.

All JSON is written deterministically (sorted keys) and atomically
(temp file + rename). Schemas carry a ``schema_version`` field.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose6DoF
from .scenegen import InstanceAnnotation, SceneAnnotation
from .shapespace import CanonicalMesh, ClusterModel, ShapeCode, ShapeSpace

SCHEMA_VERSION = 1


def write_json_atomic(obj, path):
    """Serialize to JSON deterministically and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(obj, f, sort_keys=True, indent=1)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_obj(path, car_id: str = None, sub_type: int = 0) -> CanonicalMesh:
    """Read an OBJ file (v / f records, triangles only)."""
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                verts.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in tokens[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not verts:
        raise ValueError(f"{path}: no vertices found")
    if car_id is None:
        car_id = Path(path).stem
    return CanonicalMesh(np.array(verts), np.array(faces), car_id=car_id, sub_type=sub_type)


def save_obj(mesh: CanonicalMesh, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# {mesh.car_id}\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for a, b, c in mesh.faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_mesh_database(mesh_dir):
    """Load a directory of OBJ files described by an index.json.

    The index maps car_id -> {"file": name, "sub_type": int, "cluster":
    optional int}. Meshes are returned sorted by car_id.
    """
    mesh_dir = Path(mesh_dir)
    index_path = mesh_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"mesh database index not found: {index_path}")
    with open(index_path) as f:
        index = json.load(f)
    meshes = []
    for car_id in sorted(index):
        entry = index[car_id]
        meshes.append(
            load_obj(mesh_dir / entry["file"], car_id=car_id,
                     sub_type=int(entry.get("sub_type", 0)))
        )
    return meshes


def save_mesh_database(meshes, mesh_dir):
    mesh_dir = Path(mesh_dir)
    mesh_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for m in meshes:
        name = f"{m.car_id}.obj"
        save_obj(m, mesh_dir / name)
        index[m.car_id] = {"file": name, "sub_type": int(m.sub_type)}
    write_json_atomic(index, mesh_dir / "index.json")


def shapespace_to_dict(space: ShapeSpace) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "topology": space.faces.tolist(),
        "clusters": [
            {
                "member_ids": list(c.member_ids),
                "mean": c.mean.tolist(),
                "basis": c.basis.tolist(),
                "eigenvalues": c.eigenvalues.tolist(),
            }
            for c in space.clusters
        ],
    }


def shapespace_from_dict(data: dict) -> ShapeSpace:
    clusters = [
        ClusterModel(
            member_ids=list(c["member_ids"]),
            mean=np.array(c["mean"]),
            basis=np.array(c["basis"]).reshape(len(c["mean"]), -1),
            eigenvalues=np.array(c["eigenvalues"]),
        )
        for c in data["clusters"]
    ]
    return ShapeSpace(clusters, np.array(data["topology"], dtype=np.int64))


def save_shapespace(space: ShapeSpace, path):
    write_json_atomic(shapespace_to_dict(space), path)


def load_shapespace(path) -> ShapeSpace:
    with open(path) as f:
        return shapespace_from_dict(json.load(f))


def _code_to_dict(code: ShapeCode):
    return {
        "cluster_probs": code.cluster_probs.tolist(),
        "coefficients": [c.tolist() for c in code.coefficients],
    }


def _code_from_dict(data) -> ShapeCode:
    return ShapeCode(np.array(data["cluster_probs"]),
                     [np.array(c) for c in data["coefficients"]])


def instance_to_dict(inst: InstanceAnnotation) -> dict:
    out = {
        "car_id": inst.car_id,
        "sub_type": int(inst.sub_type),
        "pose": {
            "translation": inst.pose.translation.tolist(),
            "rotation": inst.pose.rotation.tolist(),
        },
        "keypoints": inst.keypoints.tolist(),
    }
    if inst.score is not None:
        out["score"] = float(inst.score)
    if inst.shape_code is not None:
        out["shape_code"] = _code_to_dict(inst.shape_code)
    return out


def instance_from_dict(data: dict) -> InstanceAnnotation:
    allowed = {"car_id", "sub_type", "pose", "keypoints", "score", "shape_code"}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown instance keys: {sorted(unknown)}")
    return InstanceAnnotation(
        car_id=data["car_id"],
        sub_type=int(data["sub_type"]),
        pose=Pose6DoF(np.array(data["pose"]["translation"]),
                      np.array(data["pose"]["rotation"])),
        keypoints=np.array(data["keypoints"]),
        score=float(data["score"]) if "score" in data else None,
        shape_code=_code_from_dict(data["shape_code"]) if "shape_code" in data else None,
    )


def scene_to_dict(scene: SceneAnnotation) -> dict:
    return {
        "camera": {
            "fx": scene.camera.fx, "fy": scene.camera.fy,
            "px": scene.camera.px, "py": scene.camera.py,
        },
        "image_size": list(scene.image_size),
        "instances": [instance_to_dict(i) for i in scene.instances],
    }


def scene_from_dict(data: dict) -> SceneAnnotation:
    cam = data["camera"]
    return SceneAnnotation(
        camera=CameraIntrinsics(cam["fx"], cam["fy"], cam["px"], cam["py"]),
        image_size=tuple(data["image_size"]),
        instances=[instance_from_dict(d) for d in data["instances"]],
    )


def save_scenes(scenes, path):
    write_json_atomic(
        {"schema_version": SCHEMA_VERSION, "scenes": [scene_to_dict(s) for s in scenes]},
        path,
    )


def load_scenes(path):
    with open(path) as f:
        data = json.load(f)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema_version: {version!r}")
    return [scene_from_dict(s) for s in data["scenes"]]
