"""Command-line surface: build-shapespace, synth, fit, eval, render, gradcheck.

Every command is deterministic given its --seed, writes machine-readable
outputs atomically, and drops a manifest (inputs, config hash, seed,
library version) next to them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import CarfitError, TooFewKeypoints
from .fileio import (
    load_mesh_database,
    load_scenes,
    load_shapespace,
    save_mesh_database,
    save_scenes,
    save_shapespace,
    write_json_atomic,
)
from .fitter import FitConfig, fit_instance
from .gradcheck import run_standard_suite
from .geometry import CameraIntrinsics
from .losses import LossWeights
from .metrics import A3DPCriteria, match_and_score
from .raster import RasterConfig, render_mask, write_pgm, write_ppm
from .scenegen import SceneGenConfig, generate_scene, make_car_database
from .shapespace import blend_shape, build_shape_space, default_landmarks

_PALETTE = [
    (230, 60, 60), (60, 160, 230), (80, 200, 100), (240, 180, 50),
    (180, 90, 220), (90, 220, 210), (240, 120, 180), (150, 150, 90),
]


def _config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_manifest(out_path, command, args_dict, inputs):
    config = {k: v for k, v in args_dict.items() if k != "func"}
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "inputs": inputs,
        "seed": config.get("seed"),
        "version": __version__,
    }
    write_json_atomic(manifest, Path(str(out_path) + ".manifest.json"))


def _parse_size(text):
    w, h = text.lower().split("x")
    return int(w), int(h)


def _load_weights(path) -> LossWeights:
    with open(path) as f:
        data = json.load(f)
    allowed = set(LossWeights().as_dict())
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
    return LossWeights(**data)


def _load_criteria(path) -> A3DPCriteria:
    with open(path) as f:
        data = json.load(f)
    unknown = set(data) - {"mode", "thresholds"}
    if unknown:
        raise ValueError(f"unknown criteria keys: {sorted(unknown)}")
    return A3DPCriteria(thresholds=data.get("thresholds"), mode=data.get("mode", "absolute"))


def cmd_build_shapespace(args):
    meshes = load_mesh_database(args.mesh_dir)
    space = build_shape_space(meshes, K=args.clusters, n_max=args.n_max, seed=args.seed)
    save_shapespace(space, args.out)
    print(f"shape space: {space.n_clusters} clusters over {len(meshes)} meshes")
    for c, model in enumerate(space.clusters):
        ev = model.eigenvalues
        total = float(ev.sum()) if ev.size else 0.0
        explained = " ".join(f"{v / total:.3f}" for v in ev) if total > 0 else "-"
        print(f"  cluster {c}: size={len(model.member_ids)} n={model.n_components} "
              f"explained-variance {explained}")
    _write_manifest(args.out, "build-shapespace", vars(args), [str(args.mesh_dir)])
    return 0


def _scene_config(args) -> SceneGenConfig:
    w, h = _parse_size(args.image_size)
    return SceneGenConfig(
        image_width=w, image_height=h, focal=args.focal,
        height_jitter=args.height_jitter, occlusion_rate=args.occlusion,
        pixel_noise=args.noise_px,
    )


def cmd_synth(args):
    if args.shapespace:
        space = load_shapespace(args.shapespace)
        inputs = [args.shapespace]
    else:
        meshes = make_car_database(24, seed=args.seed)
        space = build_shape_space(meshes, K=4, n_max=10, seed=args.seed)
        inputs = []
        if args.mesh_dir:
            save_mesh_database(meshes, args.mesh_dir)
    cfg = _scene_config(args)
    scenes = []
    for s in range(args.scenes):
        scene, _ = generate_scene(space, args.cars, cfg, seed=args.seed + s,
                                  scene_id=f"s{s:03d}-")
        scenes.append(scene)
    save_scenes(scenes, args.out)
    n = sum(len(s.instances) for s in scenes)
    print(f"wrote {len(scenes)} scenes, {n} instances -> {args.out}")
    _write_manifest(args.out, "synth", vars(args), inputs)
    return 0


def cmd_fit(args):
    space = load_shapespace(args.shapespace)
    scenes = load_scenes(args.annotations)
    landmarks = default_landmarks(space.n_vertices)
    cfg = FitConfig(min_visible=args.min_visible)
    results = []
    skipped = 0
    for scene in scenes:
        fitted = []
        for inst in scene.instances:
            try:
                res = fit_instance(inst.keypoints, scene.camera, space, landmarks, cfg)
            except TooFewKeypoints:
                skipped += 1
                continue
            pred = replace(
                inst,
                pose=res.pose,
                shape_code=res.shape_code,
                score=1.0 / (1.0 + res.final_cost),
            )
            fitted.append((pred, res))
        results.append((scene, fitted))

    out_scenes = []
    report = []
    for scene, fitted in results:
        out_scene = replace(scene, instances=[p for p, _ in fitted])
        out_scenes.append(out_scene)
        report.append(
            [
                {
                    "car_id": p.car_id,
                    "final_cost": r.final_cost,
                    "objective": r.objective,
                    "iters": r.iters,
                    "converged": r.converged,
                    "cluster_chosen": r.cluster_chosen,
                }
                for p, r in fitted
            ]
        )
    save_scenes(out_scenes, args.out)
    write_json_atomic(report, Path(str(args.out) + ".fitreport.json"))
    n = sum(len(f) for _, f in results)
    print(f"fitted {n} instances ({skipped} skipped: too few keypoints) -> {args.out}")
    _write_manifest(args.out, "fit", vars(args), [args.annotations, args.shapespace])
    return 0


def cmd_eval(args):
    preds = load_scenes(args.preds)
    gts = load_scenes(args.gts)
    if args.criteria:
        criteria = _load_criteria(args.criteria)
    else:
        criteria = A3DPCriteria(mode="relative" if args.mode == "rel" else "absolute")
    space = load_shapespace(args.shapespace) if args.shapespace else None
    w, h = _parse_size(args.render_size)
    raster_cfg = RasterConfig(width=w, height=h, views=args.views)
    report = match_and_score(preds, gts, criteria, space, raster_cfg)
    write_json_atomic(report.to_dict(), args.out)
    csv_path = Path(str(args.out) + ".csv")
    lines = ["index,trans_thresh,rot_thresh,iou_thresh,ap"]
    for i, ((t, r, s), ap) in enumerate(zip(criteria.thresholds, report.ap_per_threshold)):
        lines.append(f"{i},{t:.6g},{r:.6g},{s:.6g},{ap:.6g}")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text("\n".join(lines) + "\n")
    print(f"mean AP {report.mean_ap:.4f}  c-l {report.c_l:.4f}  c-s {report.c_s:.4f}")
    _write_manifest(args.out, "eval", vars(args),
                    [args.preds, args.gts] + ([args.shapespace] if args.shapespace else []))
    return 0


def cmd_render(args):
    space = load_shapespace(args.shapespace)
    scenes = load_scenes(args.preds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rw, rh = _parse_size(args.render_size)
    for s, scene in enumerate(scenes):
        w, h = scene.image_size
        cam = scene.camera
        scaled = CameraIntrinsics(
            cam.fx * rw / w, cam.fy * rh / h, cam.px * rw / w, cam.py * rh / h
        )
        overlay = np.full((rh, rw, 3), 32, dtype=np.uint8)
        for i, inst in enumerate(scene.instances):
            if inst.shape_code is None:
                continue
            mesh = blend_shape(space, inst.shape_code)
            mask = render_mask(mesh, inst.pose, scaled, (rw, rh))
            write_pgm(mask, out_dir / f"scene{s:03d}_inst{i:02d}.pgm")
            overlay[mask.bits] = _PALETTE[i % len(_PALETTE)]
        write_ppm(overlay, out_dir / f"scene{s:03d}_overlay.ppm")
    print(f"wrote masks and overlays for {len(scenes)} scenes -> {out_dir}")
    _write_manifest(out_dir / "render", "render", vars(args), [args.preds, args.shapespace])
    return 0


def cmd_gradcheck(args):
    weights = _load_weights(args.weights) if args.weights else None
    reports = run_standard_suite(seed=args.seed, n_configs=args.configs, weights=weights)
    failures = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:24s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g} {status}")
        failures += 0 if r.passed else 1
    if args.out:
        write_json_atomic(
            [{"name": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol,
              "passed": r.passed} for r in reports],
            args.out,
        )
        _write_manifest(args.out, "gradcheck", vars(args), [])
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carfit",
        description="Vehicle pose and shape toolkit: PCA shape spaces, keypoint "
                    "fitting, scene-aware losses, and 3D detection metrics.",
    )
    parser.add_argument("--version", action="version", version=f"carfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-shapespace", help="cluster a mesh database and fit PCA models")
    p.add_argument("--mesh-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_shapespace)

    p = sub.add_parser("synth", help="generate deterministic synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--cars", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapespace", default=None,
                   help="shape space JSON; omitted -> built-in synthetic database")
    p.add_argument("--mesh-dir", default=None,
                   help="also dump the synthetic mesh database here")
    p.add_argument("--image-size", default="3384x2710")
    p.add_argument("--focal", type=float, default=2300.0)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--height-jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit pose and shape to annotated keypoints")
    p.add_argument("--annotations", required=True)
    p.add_argument("--shapespace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-visible", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="A3DP evaluation of predictions vs ground truth")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--criteria", default=None, help="criteria JSON override")
    p.add_argument("--mode", choices=("abs", "rel"), default="abs")
    p.add_argument("--shapespace", default=None, help="needed for shape IoU gating")
    p.add_argument("--views", type=int, default=100)
    p.add_argument("--render-size", default="480x360")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render instance masks and scene overlays")
    p.add_argument("--preds", required=True)
    p.add_argument("--shapespace", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--render-size", default="480x360")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--weights", default=None, help="loss weights JSON for the total check")
    p.add_argument("--out", default=None, help="optional report JSON path")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CarfitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
