"""Occlusion IoU, depth error and temporal flicker metrics.

Undefined metrics (empty evaluation region, empty union, no trackable
points) are reported as NaN and skipped by the aggregators.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, DepthMap

NAN = float("nan")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class OcclusionIoU:
    iou_plus: float
    iou_minus: float
    iou_all: float
    iou_surface: float
    iou_boundary: float


def _iou(pred: np.ndarray, gt: np.ndarray, region: np.ndarray) -> float:
    union = np.count_nonzero((pred | gt) & region)
    if union == 0:
        return NAN
    return 100.0 * np.count_nonzero(pred & gt & region) / union


def harmonic_mean(a: float, b: float) -> float:
    if math.isnan(a) or math.isnan(b):
        return NAN
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def iou_pair(y_pred: np.ndarray, y_gt: np.ndarray, region: np.ndarray) -> tuple[float, float, float]:
    """(IoU on visible-virtual pixels, IoU on occluded pixels, harmonic mean)."""
    plus = _iou(~y_pred, ~y_gt, region)
    minus = _iou(y_pred, y_gt, region)
    return plus, minus, harmonic_mean(plus, minus)


def boundary_band(y_gt: np.ndarray, region: np.ndarray, radius: int = 7) -> np.ndarray:
    """Pixels within ``radius`` (Chebyshev) of a ground-truth mask boundary.

    A boundary pixel is a region pixel with a 4-neighbour in the region that
    has the other label.
    """
    edge = np.zeros_like(y_gt, dtype=bool)
    diff_v = (y_gt[1:] != y_gt[:-1]) & region[1:] & region[:-1]
    diff_h = (y_gt[:, 1:] != y_gt[:, :-1]) & region[:, 1:] & region[:, :-1]
    edge[1:] |= diff_v
    edge[:-1] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    if radius > 0 and edge.any():
        edge = ndimage.binary_dilation(edge, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))
    return edge & region


def surface_band(d_virtual: np.ndarray, d_real: np.ndarray, region: np.ndarray, rel: float = 0.05) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        near = np.abs(d_virtual - d_real) <= rel * d_real
    return near & region


def occlusion_iou(y_pred: np.ndarray, y_gt: np.ndarray, d_virtual: DepthMap, d_real: DepthMap,
                  coverage: Optional[np.ndarray] = None, boundary_px: int = 7,
                  surface_rel: float = 0.05) -> OcclusionIoU:
    """IoU scores for a predicted occlusion mask (True = real surface occludes the virtual one)."""
    y_pred = np.asarray(y_pred, dtype=bool)
    y_gt = np.asarray(y_gt, dtype=bool)
    if y_pred.shape != y_gt.shape:
        raise ValueError(f"mask shapes differ: {y_pred.shape} vs {y_gt.shape}")
    region = d_virtual.valid & d_real.valid
    if coverage is not None:
        region &= coverage
    if not region.any():
        return OcclusionIoU(NAN, NAN, NAN, NAN, NAN)
    plus, minus, all_ = iou_pair(y_pred, y_gt, region)
    surf = iou_pair(y_pred, y_gt, surface_band(d_virtual.values, d_real.values, region, surface_rel))[2]
    bnd = iou_pair(y_pred, y_gt, boundary_band(y_gt, region, boundary_px))[2]
    return OcclusionIoU(plus, minus, all_, surf, bnd)


def gt_occlusion(d_real: DepthMap, d_virtual: DepthMap) -> np.ndarray:
    """Ground-truth mask: the real surface is strictly closer than the virtual one."""
    return d_real.valid & d_virtual.valid & (d_real.values < d_virtual.values)


def aggregate_plane_ious(per_plane: Mapping[float, Iterable[float]]) -> float:
    """Mean over frames within each plane, then mean over planes; NaN entries skipped."""
    plane_means = []
    for values in per_plane.values():
        vals = [v for v in values if not math.isnan(v)]
        if vals:
            plane_means.append(sum(vals) / len(vals))
    if not plane_means:
        raise UndefinedMetricError("no defined IoU values to aggregate")
    return sum(plane_means) / len(plane_means)


DEPTH_METRIC_NAMES = ("abs_diff", "abs_rel", "sq_rel", "rmse", "log_rmse", "a5", "a10", "a25")


def depth_metrics(pred: DepthMap, gt: DepthMap) -> dict:
    """Standard depth errors over pixels valid in both maps; δ scores are percentages."""
    mask = pred.valid & gt.valid
    if not mask.any():
        return {k: NAN for k in DEPTH_METRIC_NAMES}
    d = pred.values[mask]
    g = gt.values[mask]
    diff = d - g
    ratio = np.maximum(d / g, g / d)
    return {
        "abs_diff": float(np.mean(np.abs(diff))),
        "abs_rel": float(np.mean(np.abs(diff) / g)),
        "sq_rel": float(np.mean(diff ** 2 / g)),
        "rmse": float(np.sqrt(np.mean(diff ** 2))),
        "log_rmse": float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        "a5": float(100.0 * np.mean(ratio < 1.05)),
        "a10": float(100.0 * np.mean(ratio < 1.10)),
        "a25": float(100.0 * np.mean(ratio < 1.25)),
    }


def mean_metrics(rows: Iterable[dict]) -> dict:
    rows = list(rows)
    if not rows:
        return {}
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if not math.isnan(r[key])]
        out[key] = float(np.mean(vals)) if vals else NAN
    return out


def sample_surface_points(depth: DepthMap, pose, K: CameraIntrinsics, max_points: int = 1024,
                          seed: int = 0) -> np.ndarray:
    """World points on the ground-truth surface seen by one frame."""
    vs, us = np.nonzero(depth.valid)
    rng = np.random.default_rng(seed)
    if len(us) > max_points:
        pick = np.sort(rng.choice(len(us), size=max_points, replace=False))
        vs, us = vs[pick], us[pick]
    z = depth.values[vs, us]
    cam = np.stack([(us - K.cx) / K.fx * z, (vs - K.cy) / K.fy * z, z], axis=-1)
    return pose.transform(cam)


def visibility_tracks(masks, poses, K: CameraIntrinsics, points: np.ndarray, tau: float) -> np.ndarray:
    """Per frame and point: 1/0 visibility decision, or -1 where the point is not observable.

    A point is observable when it projects in front of the camera, inside the
    image and onto mask coverage; the mask is read at the nearest pixel.
    """
    out = np.full((len(masks), len(points)), -1, dtype=np.int8)
    for t, (mask, pose) in enumerate(zip(masks, poses)):
        cam = pose.inverse().transform(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(K.fx * cam[:, 0] / z + K.cx)
            v = np.rint(K.fy * cam[:, 1] / z + K.cy)
        ok = (z > 0) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
        ui = np.where(ok, u, 0).astype(int)
        vi = np.where(ok, v, 0).astype(int)
        ok &= mask.coverage[vi, ui]
        decision = (mask.values[vi, ui] > tau).astype(np.int8)
        out[t] = np.where(ok, decision, -1)
    return out


def flicker_score(tracks: np.ndarray) -> float:
    """1000 x mean over points of (visibility flips) / (observations - 1).

    ``tracks`` is (T, P) with -1 marking missing observations; flips are
    counted between consecutive observations of the same point.
    """
    rates = []
    for col in np.asarray(tracks).T:
        obs = col[col >= 0]
        if len(obs) < 2:
            continue
        rates.append(np.count_nonzero(obs[1:] != obs[:-1]) / (len(obs) - 1))
    if not rates:
        return NAN
    return 1000.0 * float(np.mean(rates))


def temporal_score(masks, frames, K: CameraIntrinsics, tau: float = 0.5, warmup: int = 2,
                   max_points: int = 1024, seed: int = 0) -> float:
    """Flicker of per-point visibility decisions across a (sub-)sequence of masks.

    Points are sampled on the ground-truth surface of ``frames[0]``; the first
    ``warmup`` frames are not scored.
    """
    if len(masks) != len(frames):
        raise ValueError("need one mask per frame")
    if len(frames) < warmup + 2:
        raise ValueError(f"need at least {warmup + 2} frames, got {len(frames)}")
    points = sample_surface_points(frames[0].depth_gt, frames[0].pose, K, max_points, seed)
    tracks = visibility_tracks(masks[warmup:], [f.pose for f in frames[warmup:]], K, points, tau)
    return flicker_score(tracks)


@dataclass
class MetricReport:
    iou_all: float = NAN
    iou_surface: float = NAN
    iou_boundary: float = NAN
    abs_diff: float = NAN
    abs_rel: float = NAN
    sq_rel: float = NAN
    rmse: float = NAN
    log_rmse: float = NAN
    a5: float = NAN
    a10: float = NAN
    a25: float = NAN
    temporal_score: float = NAN

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


TABLE_COLUMNS = (("IoU All", "iou_all", "{:.2f}"), ("IoU Surface", "iou_surface", "{:.2f}"),
                 ("IoU Boundary", "iou_boundary", "{:.2f}"), ("Abs Rel", "abs_rel", "{:.4f}"),
                 ("Sq Rel", "sq_rel", "{:.4f}"), ("RMSE", "rmse", "{:.4f}"), ("d<1.05", "a5", "{:.2f}"),
                 ("Temporal", "temporal_score", "{:.1f}"))


def format_table(reports: Mapping[str, MetricReport]) -> str:
    """Aligned text table; columns with no values in any row are dropped."""
    cols = [c for c in TABLE_COLUMNS
            if any(not math.isnan(getattr(r, c[1])) for r in reports.values())]
    header = ["Method"] + [c[0] for c in cols]
    rows = [header]
    for name, rep in reports.items():
        row = [name]
        for _, key, fmt in cols:
            val = getattr(rep, key)
            row.append("-" if math.isnan(val) else fmt.format(val))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
