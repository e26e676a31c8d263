"""3D instance average precision (absolute / relative) and viewpoint metrics.

A prediction matches an unmatched ground-truth instance of its scene when
its translation distance, rotation geodesic distance, and multi-view mask
IoU all pass one criterion triple; matching is greedy in descending score
order, and AP uses all-point interpolation of the precision-recall curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import rotation_geodesic_distance
from .raster import RasterConfig, multiview_iou
from .shapespace import ShapeSpace, blend_shape


def default_thresholds(mode: str = "absolute"):
    """Ten loose-to-strict criterion triples (translation, rotation, IoU).

    Translation: 2.8 -> 0.1 m (absolute) or 0.10 -> 0.01 of the ground-truth
    range (relative); rotation: pi/6 -> pi/60 rad; shape IoU: 0.5 -> 0.95.
    All linearly spaced.
    """
    if mode == "absolute":
        trans = np.linspace(2.8, 0.1, 10)
    elif mode == "relative":
        trans = np.linspace(0.10, 0.01, 10)
    else:
        raise ValueError(f"mode must be 'absolute' or 'relative', got {mode!r}")
    rot = np.linspace(math.pi / 6.0, math.pi / 60.0, 10)
    iou = np.linspace(0.5, 0.95, 10)
    return [(float(t), float(r), float(s)) for t, r, s in zip(trans, rot, iou)]


@dataclass
class A3DPCriteria:
    """Threshold schedule, ordered loose -> strict."""

    thresholds: list = None
    mode: str = "absolute"

    def __post_init__(self):
        if self.thresholds is None:
            self.thresholds = default_thresholds(self.mode)
        self.thresholds = [tuple(float(x) for x in t) for t in self.thresholds]
        trans = [t[0] for t in self.thresholds]
        rot = [t[1] for t in self.thresholds]
        iou = [t[2] for t in self.thresholds]
        if any(a < b for a, b in zip(trans, trans[1:])):
            raise ValueError("translation thresholds must be non-increasing (loose->strict)")
        if any(a < b for a, b in zip(rot, rot[1:])):
            raise ValueError("rotation thresholds must be non-increasing (loose->strict)")
        if any(a > b for a, b in zip(iou, iou[1:])):
            raise ValueError("shape IoU thresholds must be non-decreasing (loose->strict)")
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self):
        return {"mode": self.mode, "thresholds": [list(t) for t in self.thresholds]}


@dataclass
class EvalReport:
    mean_ap: float
    ap_per_threshold: list
    c_l: float
    c_s: float
    trans_err_mean: float
    rot_err_mean: float
    n_predictions: int = 0
    n_ground_truth: int = 0
    criteria: dict = field(default_factory=dict)

    def to_dict(self):
        def _clean(x):
            return None if (isinstance(x, float) and math.isnan(x)) else x

        return {
            "mean_ap": self.mean_ap,
            "ap_per_threshold": list(self.ap_per_threshold),
            "c_l": self.c_l,
            "c_s": self.c_s,
            "trans_err_mean": _clean(self.trans_err_mean),
            "rot_err_mean": _clean(self.rot_err_mean),
            "n_predictions": self.n_predictions,
            "n_ground_truth": self.n_ground_truth,
            "criteria": self.criteria,
        }


def average_precision(tp_flags, n_gt: int, scores=None) -> float:
    """All-point interpolated AP from descending-score TP/FP flags.

    The precision-recall curve is parameterized by the score threshold, so
    predictions with tied scores enter as one group; this makes the value
    independent of their relative order. Without scores every prediction is
    its own group (equivalent for distinct scores).
    """
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        return 1.0 if tp_flags.size == 0 else 0.0
    if tp_flags.size == 0:
        return 0.0
    n = tp_flags.size
    if scores is None:
        ends = np.arange(n)
    else:
        scores = np.asarray(scores, dtype=float)
        ends = np.flatnonzero(np.diff(scores) != 0.0)
        ends = np.append(ends, n - 1)
    ctp = np.cumsum(tp_flags)
    recall = ctp[ends] / n_gt
    precision = ctp[ends] / (ends + 1.0)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev = 0.0
    for r, p in zip(recall, envelope):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


class _PairMetrics:
    """Distance matrices per scene; mask IoU evaluated lazily and memoized."""

    def __init__(self, pred_scenes, gt_scenes, mode, space, raster_cfg):
        self.mode = mode
        self.space = space
        self.raster_cfg = raster_cfg or RasterConfig()
        self.trans = []
        self.rot = []
        self._iou_cache = {}
        self._meshes = {}
        self.pred_scenes = pred_scenes
        self.gt_scenes = gt_scenes
        for preds, gts in zip(pred_scenes, gt_scenes):
            t = np.full((len(preds.instances), len(gts.instances)), np.inf)
            r = np.full_like(t, np.inf)
            for i, p in enumerate(preds.instances):
                for j, g in enumerate(gts.instances):
                    d = float(np.linalg.norm(p.pose.translation - g.pose.translation))
                    if mode == "relative":
                        t[i, j] = d / max(float(np.linalg.norm(g.pose.translation)), 1e-12)
                    else:
                        t[i, j] = d
                    r[i, j] = rotation_geodesic_distance(p.pose.rotation, g.pose.rotation)
            self.trans.append(t)
            self.rot.append(r)

    def _mesh(self, scene_kind, s, i):
        key = (scene_kind, s, i)
        if key not in self._meshes:
            scenes = self.pred_scenes if scene_kind == "pred" else self.gt_scenes
            inst = scenes[s].instances[i]
            if inst.shape_code is None:
                raise ValueError(
                    "instance lacks a shape_code; meshes are required for IoU gating"
                )
            if self.space is None:
                raise ValueError("a ShapeSpace is required for IoU gating")
            self._meshes[key] = blend_shape(self.space, inst.shape_code)
        return self._meshes[key]

    def iou(self, s, i, j) -> float:
        key = (s, i, j)
        if key not in self._iou_cache:
            pm = self._mesh("pred", s, i)
            gm = self._mesh("gt", s, j)
            self._iou_cache[key] = multiview_iou(
                pm,
                self.pred_scenes[s].instances[i].pose,
                gm,
                self.gt_scenes[s].instances[j].pose,
                self.raster_cfg,
            )
        return self._iou_cache[key]


def _sorted_predictions(pred_scenes):
    order = []
    for s, scene in enumerate(pred_scenes):
        for i, inst in enumerate(scene.instances):
            if inst.score is None:
                raise ValueError("predictions must carry confidence scores")
            order.append((s, i, float(inst.score)))
    order.sort(key=lambda rec: (-rec[2], rec[0], rec[1]))
    return order


def _greedy_tp_flags(order, pairs, thresholds, n_gts_per_scene):
    """TP flags in score order for one criterion triple."""
    tt, rt, it = thresholds
    matched = [set() for _ in n_gts_per_scene]
    tp = np.zeros(len(order), dtype=bool)
    matches = []
    for rank, (s, i, _) in enumerate(order):
        tmat, rmat = pairs.trans[s], pairs.rot[s]
        cands = [
            j
            for j in range(tmat.shape[1])
            if j not in matched[s] and tmat[i, j] <= tt and rmat[i, j] <= rt
        ]
        # Nearest ground truth first; a candidate passing the IoU gate wins.
        cands.sort(key=lambda j: (tmat[i, j], j))
        for j in cands:
            if it <= 0.0 or pairs.iou(s, i, j) >= it:
                matched[s].add(j)
                tp[rank] = True
                matches.append((s, i, j))
                break
    return tp, matches


def match_and_score(pred_scenes, gt_scenes, criteria: A3DPCriteria = None,
                    space: ShapeSpace = None, raster_cfg: RasterConfig = None) -> EvalReport:
    """A3DP evaluation of predictions against ground truth, scene by scene.

    Predictions are pooled across scenes and matched greedily in descending
    score order under each criterion triple; mean AP, the loosest (c-l) and
    strictest (c-s) AP, and the matched translation/rotation error means at
    the loosest criterion are reported. An IoU threshold of 0 disables mesh
    rendering for that criterion.
    """
    if criteria is None:
        criteria = A3DPCriteria()
    if len(pred_scenes) != len(gt_scenes):
        raise ValueError("prediction and ground-truth scene lists must align")
    pairs = _PairMetrics(pred_scenes, gt_scenes, criteria.mode, space, raster_cfg)
    order = _sorted_predictions(pred_scenes)
    n_gts = [len(s.instances) for s in gt_scenes]
    n_gt_total = int(sum(n_gts))

    scores = np.array([rec[2] for rec in order])
    aps = []
    loosest_matches = None
    for k, triple in enumerate(criteria.thresholds):
        tp, matches = _greedy_tp_flags(order, pairs, triple, n_gts)
        if k == 0:
            loosest_matches = matches
        aps.append(average_precision(tp, n_gt_total, scores=scores))

    if loosest_matches:
        terr = float(
            np.mean(
                [
                    np.linalg.norm(
                        pred_scenes[s].instances[i].pose.translation
                        - gt_scenes[s].instances[j].pose.translation
                    )
                    for s, i, j in loosest_matches
                ]
            )
        )
        rerr = float(np.mean([pairs.rot[s][i, j] for s, i, j in loosest_matches]))
    else:
        terr = rerr = float("nan")

    return EvalReport(
        mean_ap=float(np.mean(aps)),
        ap_per_threshold=[float(a) for a in aps],
        c_l=float(aps[0]),
        c_s=float(aps[-1]),
        trans_err_mean=terr,
        rot_err_mean=rerr,
        n_predictions=len(order),
        n_ground_truth=n_gt_total,
        criteria=criteria.to_dict(),
    )


def viewpoint_metrics(pred_rots, gt_rots):
    """Viewpoint accuracy at pi/6 and median angular error in degrees.

    Accuracy is the fraction of instances whose rotation geodesic distance
    is below pi/6; the median uses the mean-of-middle-two convention for
    even counts (numpy median).
    """
    pred_rots = np.asarray(pred_rots, dtype=float).reshape(-1, 3)
    gt_rots = np.asarray(gt_rots, dtype=float).reshape(-1, 3)
    if pred_rots.shape != gt_rots.shape or pred_rots.shape[0] == 0:
        raise ValueError("need equal, non-empty rotation sets")
    errs = np.array(
        [rotation_geodesic_distance(p, g) for p, g in zip(pred_rots, gt_rots)]
    )
    acc = float(np.mean(errs < math.pi / 6.0))
    med = float(np.degrees(np.median(errs)))
    return acc, med
