"""Mask prediction, compositing, threshold selection, temporal rollout and depth extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence as Seq

import numpy as np

from .geometry import (CameraIntrinsics, DepthMap, PlaneSpec, Pose, bilinear_sample_many,
                       render_plane_depth, warp_locations)
from .metrics import gt_occlusion, iou_pair
from .nn import FeatureMap, ImplicitModel, RegressionModel, ShapeError

log = logging.getLogger(__name__)

TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
DEFAULT_PLANES = tuple(round(0.5 * i, 1) for i in range(1, 11))


@dataclass
class CompositingMask:
    """Per-pixel probability that the real scene is shown over the virtual content."""

    values: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        if self.values.shape != self.coverage.shape:
            raise ShapeError("mask values and coverage differ in shape")

    def binary(self, tau: float = 0.5) -> np.ndarray:
        return self.coverage & (self.values > tau)


@dataclass
class ThresholdTable:
    taus: dict = field(default_factory=dict)
    default: float = 0.5

    def __post_init__(self):
        self.taus = {float(k): float(v) for k, v in self.taus.items()}
        for tau in list(self.taus.values()) + [self.default]:
            if not 0.0 < tau < 1.0:
                raise ValueError(f"threshold {tau} outside (0, 1)")

    def lookup(self, depth):
        """Threshold of the nearest depth bin (scalar or array input)."""
        if not self.taus:
            return np.full(np.shape(depth), self.default) if np.ndim(depth) else self.default
        bins = np.array(sorted(self.taus))
        vals = np.array([self.taus[b] for b in bins])
        idx = np.abs(np.asarray(depth, dtype=float)[..., None] - bins).argmin(axis=-1)
        out = vals[idx]
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {str(k): v for k, v in sorted(self.taus.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        return cls({float(k): v for k, v in d.items()})


@dataclass
class BinarySearchConfig:
    steps: int = 12
    d_min: float = 0.5
    d_max: float = 8.0
    spacing: str = "linear"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("binary search needs at least one step")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.spacing not in ("linear", "inverse"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    @property
    def granularity(self) -> float:
        return (self.d_max - self.d_min) / 2 ** self.steps


def _as_tau(tau, depth):
    if isinstance(tau, ThresholdTable):
        return tau.lookup(depth)
    return tau


def warped_previous(prev_mask: CompositingMask, d_virtual: DepthMap, coverage: np.ndarray,
                    pose_t: Pose, pose_prev: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Previous mask values pulled to the current pixel grid; -1 where unavailable."""
    v, u = np.nonzero(coverage)
    out = np.full(len(u), -1.0)
    up, vp, ok = warp_locations(u.astype(float), v.astype(float), d_virtual.values[v, u], pose_t, pose_prev, K)
    up, vp = np.where(ok, up, -1.0), np.where(ok, vp, -1.0)
    vals = bilinear_sample_many(np.where(prev_mask.coverage, prev_mask.values, 0.0), up, vp, -1.0)
    covered = bilinear_sample_many(prev_mask.coverage.astype(float), up, vp, 0.0)
    usable = ok & (covered >= 1.0 - 1e-9)
    out[usable] = vals[usable]
    return out


def predict_mask(model: ImplicitModel, rgb: np.ndarray, d_virtual: DepthMap,
                 prev_mask: Optional[CompositingMask] = None, pose_t: Optional[Pose] = None,
                 pose_prev: Optional[Pose] = None, K: Optional[CameraIntrinsics] = None,
                 features: Optional[FeatureMap] = None, context=None) -> CompositingMask:
    """Occlusion mask for one frame at the resolution of ``d_virtual``.

    Without a previous mask (or for a model trained without temporal input)
    every query gets the start-of-sequence value -1.
    """
    rgb = np.asarray(rgb)
    if rgb.shape[:2] != d_virtual.shape:
        raise ShapeError(f"image {rgb.shape[:2]} and virtual depth {d_virtual.shape} differ in size")
    if features is None:
        features = model.encode(rgb, context)
    coverage = d_virtual.valid
    v, u = np.nonzero(coverage)
    if prev_mask is not None and model.config.temporal:
        if pose_t is None or pose_prev is None or K is None:
            raise ValueError("temporal prediction needs both poses and intrinsics")
        prev = warped_previous(prev_mask, d_virtual, coverage, pose_t, pose_prev, K)
    else:
        prev = np.full(len(u), -1.0)
    values = np.zeros(d_virtual.shape)
    if len(u):
        feats = features.sample(np.zeros(len(u), dtype=np.int64), u, v)
        values[v, u] = model.head(feats, d_virtual.values[v, u], prev).data
    return CompositingMask(values, coverage)


def composite(real: np.ndarray, virtual: np.ndarray, mask: CompositingMask) -> np.ndarray:
    """Blend ``C * real + (1 - C) * virtual`` on coverage; real image elsewhere."""
    real = np.asarray(real)
    virtual = np.asarray(virtual)
    c = mask.values[..., None] if real.ndim == 3 else mask.values
    cov = mask.coverage[..., None] if real.ndim == 3 else mask.coverage
    blend = c * real + (1.0 - c) * virtual
    # exact at C in {0, 1} and where both images agree, free of rounding
    blend = np.where(c == 1.0, real, np.where(c == 0.0, virtual, np.where(real == virtual, real, blend)))
    return np.where(cov, blend, real)


def blended_mask(d_pred_real: DepthMap, d_virtual: DepthMap, band: float = 0.2) -> CompositingMask:
    """Soft mask from a depth prediction, centred on equal depths.

    Reaches 1 (real shown) once the real surface is ``band / 2`` in front of
    the virtual one and 0 once it is ``band / 2`` behind.
    """
    if band <= 0:
        raise ValueError("blend band must be positive")
    c = np.clip((d_virtual.values - d_pred_real.values) / band + 0.5, 0.0, 1.0)
    coverage = d_virtual.valid & d_pred_real.valid
    return CompositingMask(np.where(coverage, c, 0.0), coverage)


def binary_search(classify: Callable[[np.ndarray], np.ndarray], shape, config: BinarySearchConfig,
                  tau=0.5) -> np.ndarray:
    """Per-pixel interval halving on a monotone in-front/behind classifier.

    ``classify(depths)`` returns the probability that the real surface is in
    front of each queried depth. A probability above the threshold means the
    surface lies nearer than the query, so the upper bound moves down.
    """
    if config.spacing == "linear":
        lo = np.full(shape, config.d_min)
        hi = np.full(shape, config.d_max)
    else:
        # search in inverse depth: lo/hi hold 1/d, so nearer is larger
        lo = np.full(shape, 1.0 / config.d_min)
        hi = np.full(shape, 1.0 / config.d_max)
    for _ in range(config.steps):
        mid = 0.5 * (lo + hi)
        depth = mid if config.spacing == "linear" else 1.0 / mid
        nearer = classify(depth) > _as_tau(tau, depth)
        hi = np.where(nearer, mid, hi)
        lo = np.where(nearer, lo, mid)
    mid = 0.5 * (lo + hi)
    return mid if config.spacing == "linear" else 1.0 / mid


def binary_search_depth(model: ImplicitModel, rgb: np.ndarray, config: Optional[BinarySearchConfig] = None,
                        tau=0.5, context=None) -> DepthMap:
    """Depth map from the occlusion classifier; the encoder runs once."""
    config = config or BinarySearchConfig()
    rgb = np.asarray(rgb)
    h, w = rgb.shape[:2]
    features = model.encode(rgb, context)
    v, u = np.mgrid[0:h, 0:w]
    feats = features.sample(np.zeros(h * w, dtype=np.int64), u.ravel(), v.ravel())
    sentinel = np.full(h * w, -1.0)

    def classify(depth):
        return model.head(feats, depth.ravel(), sentinel).data.reshape(h, w)

    return DepthMap(binary_search(classify, (h, w), config, tau))


class ImplicitPredictor:
    """Adapter giving models a common ``predict(frame, d_virtual)`` interface with per-frame feature caching."""

    def __init__(self, model: ImplicitModel):
        self.model = model
        self._key = None
        self._features = None

    def features(self, rgb):
        key = id(rgb)
        if key != self._key:
            self._features = self.model.encode(rgb)
            self._key = key
        return self._features

    def predict(self, frame, d_virtual: DepthMap) -> CompositingMask:
        return predict_mask(self.model, frame.rgb, d_virtual, features=self.features(frame.rgb))


class RegressionPredictor:
    """Hard occlusion from predicted depth: real shown where it is nearer than the virtual depth."""

    def __init__(self, model: RegressionModel):
        self.model = model
        self._key = None
        self._depth = None

    def depth(self, rgb) -> np.ndarray:
        if id(rgb) != self._key:
            self._depth = self.model.predict_depth(rgb)
            self._key = id(rgb)
        return self._depth

    def predict(self, frame, d_virtual: DepthMap) -> CompositingMask:
        d = self.depth(frame.rgb)
        vals = (d < d_virtual.values).astype(np.float64)
        return CompositingMask(np.where(d_virtual.valid, vals, 0.0), d_virtual.valid)


def as_predictor(model):
    if hasattr(model, "predict"):
        return model
    if isinstance(model, ImplicitModel):
        return ImplicitPredictor(model)
    if isinstance(model, RegressionModel):
        return RegressionPredictor(model)
    raise TypeError(f"cannot make a mask predictor from {type(model).__name__}")


def select_thresholds(model, sequences, plane_depths=DEFAULT_PLANES, grid=TAU_GRID,
                      frame_stride: int = 1) -> ThresholdTable:
    """Per-plane threshold maximising mean IoU All on validation frames.

    Ties go to the threshold closest to 0.5.
    """
    if not sequences:
        log.warning("empty validation set: using tau = 0.5 for every plane")
        return ThresholdTable({float(d): 0.5 for d in plane_depths})
    predictor = as_predictor(model)
    scores = {float(d): {t: [] for t in grid} for d in plane_depths}
    for seq in sequences:
        for frame in seq.frames[::frame_stride]:
            for d in plane_depths:
                dv = render_plane_depth(PlaneSpec(float(d)), frame.pose, seq.intrinsics)
                mask = predictor.predict(frame, dv)
                y_gt = gt_occlusion(frame.depth_gt, dv)
                region = dv.valid & frame.depth_gt.valid
                for t in grid:
                    scores[float(d)][t].append(iou_pair(mask.binary(t), y_gt, region)[2])
    order = sorted(grid, key=lambda t: (abs(t - 0.5), t))
    taus = {}
    for d, per_tau in scores.items():
        best, best_score = 0.5, -math.inf
        for t in order:
            vals = [x for x in per_tau[t] if not math.isnan(x)]
            if not vals:
                continue
            score = sum(vals) / len(vals)
            if score > best_score:
                best, best_score = t, score
        taus[d] = best
    return ThresholdTable(taus)


def rollout_temporal(model: ImplicitModel, frames: Seq, plane: PlaneSpec, K: CameraIntrinsics,
                     use_temporal: bool = True) -> list[CompositingMask]:
    """Masks for consecutive frames, each conditioned on the warped previous mask."""
    masks = []
    prev = None
    for i, frame in enumerate(frames):
        dv = render_plane_depth(plane, frame.pose, K)
        mask = predict_mask(model, frame.rgb, dv,
                            prev_mask=prev if use_temporal else None,
                            pose_t=frame.pose, pose_prev=frames[i - 1].pose if i else None, K=K)
        masks.append(mask)
        prev = mask
    return masks
