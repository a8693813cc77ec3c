"""Evaluation drivers: plane occlusion, depth extraction and temporal stability."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .geometry import PlaneSpec, render_plane_depth
from .inference import (DEFAULT_PLANES, BinarySearchConfig, ImplicitPredictor, ThresholdTable, as_predictor,
                        binary_search_depth, rollout_temporal)
from .metrics import (NAN, MetricReport, UndefinedMetricError, aggregate_plane_ious, depth_metrics,
                      gt_occlusion, mean_metrics, occlusion_iou, temporal_score)
from .nn import ImplicitModel, RegressionModel
from .geometry import DepthMap


def _tau_for(thresholds, depth: float) -> float:
    if thresholds is None:
        return 0.5
    if isinstance(thresholds, ThresholdTable):
        return float(thresholds.lookup(depth))
    return float(thresholds)


def _aggregate(per_plane: dict, key: str) -> float:
    try:
        return aggregate_plane_ious({d: [r[key] for r in rows] for d, rows in per_plane.items()})
    except UndefinedMetricError:
        return NAN


def evaluate_occlusion(model, sequences, planes=DEFAULT_PLANES, thresholds=None,
                       frame_stride: int = 1) -> dict:
    """IoU scores for frontoparallel planes; per-frame means, then per-plane means."""
    predictor = as_predictor(model)
    per_plane = {float(d): [] for d in planes}
    for seq in sequences:
        for frame in seq.frames[::frame_stride]:
            for d in planes:
                dv = render_plane_depth(PlaneSpec(float(d)), frame.pose, seq.intrinsics)
                mask = predictor.predict(frame, dv)
                y_pred = mask.binary(_tau_for(thresholds, d))
                r = occlusion_iou(y_pred, gt_occlusion(frame.depth_gt, dv), dv, frame.depth_gt, mask.coverage)
                per_plane[float(d)].append(vars(r))
    keys = ("iou_plus", "iou_minus", "iou_all", "iou_surface", "iou_boundary")
    summary = {k: _aggregate(per_plane, k) for k in keys}
    planes_out = {}
    for d, rows in per_plane.items():
        planes_out[str(d)] = {}
        for k in keys:
            vals = [r[k] for r in rows if not math.isnan(r[k])]
            planes_out[str(d)][k] = float(np.mean(vals)) if vals else None
    return {"summary": summary, "planes": planes_out}


def evaluate_depth(model, sequences, config: Optional[BinarySearchConfig] = None, thresholds=0.5,
                   frame_stride: int = 1) -> dict:
    rows = []
    for seq in sequences:
        for frame in seq.frames[::frame_stride]:
            if isinstance(model, RegressionModel):
                pred = DepthMap(model.predict_depth(frame.rgb))
            else:
                pred = binary_search_depth(model, frame.rgb, config, thresholds)
            rows.append(depth_metrics(pred, frame.depth_gt))
    return mean_metrics(rows)


def temporal_plane(frame, percentile: float = 75.0) -> PlaneSpec:
    """World-fixed plane facing the camera at the given percentile of its ground-truth depth."""
    d = float(np.percentile(frame.depth_gt.values[frame.depth_gt.valid], percentile))
    return PlaneSpec.fixed_in_world(frame.pose, d)


def evaluate_temporal(model: ImplicitModel, sequences, sub_length: int = 15, warmup: int = 2,
                      thresholds=None, use_temporal: bool = True, max_points: int = 1024,
                      seed: int = 0) -> dict:
    """Mean flicker score and IoU over fixed-length sub-sequences.

    Each sub-sequence gets a vertical plane fixed in the world in front of its
    first camera; the first ``warmup`` frames are rolled out but not scored.
    """
    scores, ious = [], {"iou_all": [], "iou_surface": [], "iou_boundary": []}
    for seq in sequences:
        K = seq.intrinsics
        for start in range(0, len(seq.frames) - sub_length + 1, sub_length):
            frames = seq.frames[start : start + sub_length]
            plane = temporal_plane(frames[0])
            tau = _tau_for(thresholds, plane.distance)
            masks = rollout_temporal(model, frames, plane, K, use_temporal=use_temporal)
            s = temporal_score(masks, frames, K, tau, warmup, max_points, seed)
            if not math.isnan(s):
                scores.append(s)
            for frame, mask in list(zip(frames, masks))[warmup:]:
                dv = render_plane_depth(plane, frame.pose, K)
                r = occlusion_iou(mask.binary(tau), gt_occlusion(frame.depth_gt, dv), dv, frame.depth_gt,
                                  mask.coverage)
                for k in ious:
                    val = getattr(r, k)
                    if not math.isnan(val):
                        ious[k].append(val)
    out = {"temporal_score": float(np.mean(scores)) if scores else NAN, "subsequences": len(scores)}
    out.update({k: float(np.mean(v)) if v else NAN for k, v in ious.items()})
    return out


def report_from(occlusion: Optional[dict] = None, depth: Optional[dict] = None,
                temporal: Optional[dict] = None) -> MetricReport:
    rep = MetricReport()
    if occlusion:
        for k in ("iou_all", "iou_surface", "iou_boundary"):
            setattr(rep, k, occlusion["summary"][k])
    if depth:
        for k, v in depth.items():
            setattr(rep, k, v)
    if temporal:
        rep.temporal_score = temporal["temporal_score"]
    return rep
