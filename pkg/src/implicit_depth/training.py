"""Query sampling and training loops for the implicit occlusion model and the regression baseline."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import sobel_edge_mask
from .nn import (EncoderConfig, ImplicitModel, ModelConfig, QueryBatch, RegressionModel, adam_step,
                 copy_encoder, implicit_loss, load_checkpoint, regression_loss, save_checkpoint, zero_grad)

log = logging.getLogger(__name__)

MIN_GAUSSIAN_DEPTH = 0.05


class SamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    q: float = 0.25
    gaussian_variance: float = 0.05
    p1: float = 0.25
    p2: float = 0.25
    prev_noise: float = 0.3
    temporal: bool = True
    lambda_reg: float = 0.5
    edge_percentile: float = 0.95
    lr: float = 1e-3
    lr_drops: tuple = (0.6, 0.85)
    lr_drop_factor: float = 0.1
    steps: int = 4000
    images_per_step: int = 4
    samples_per_image: int = 128
    seed: int = 0
    feature_channels: int = 32
    encoder_channels: tuple = (16, 32, 32)
    encoder_strides: tuple = (2, 2, 1, 1)
    encoder_dilations: tuple = (1, 1, 2, 4)
    context_frames: int = 0
    hidden: int = 128
    warm_start: Optional[str] = None
    checkpoint: Optional[str] = None
    log_every: int = 0

    def __post_init__(self):
        self.lr_drops = tuple(self.lr_drops)
        self.encoder_channels = tuple(self.encoder_channels)
        self.encoder_strides = tuple(self.encoder_strides)
        self.encoder_dilations = tuple(self.encoder_dilations)
        for name in ("q", "p1", "p2"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if self.gaussian_variance <= 0:
            raise ValueError("gaussian_variance must be positive")
        if self.steps < 1 or self.images_per_step < 1 or self.samples_per_image < 1:
            raise ValueError("steps, images_per_step and samples_per_image must be >= 1")

    def model_config(self, kind: str) -> ModelConfig:
        enc = EncoderConfig(channels=self.encoder_channels + (self.feature_channels,),
                            strides=self.encoder_strides,
                            dilations=self.encoder_dilations, context_frames=self.context_frames)
        return ModelConfig(kind=kind, encoder=enc, hidden=self.hidden, seed=self.seed, temporal=self.temporal)

    def lr_at(self, step: int) -> float:
        drops = sum(step >= int(f * self.steps) for f in self.lr_drops)
        return self.lr * self.lr_drop_factor ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lr_drops", "encoder_channels", "encoder_strides", "encoder_dilations"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class QuerySample:
    frame_index: int
    u: float
    v: float
    d_virtual: float
    label: int
    pseudo_prev: float
    is_edge: bool


class FrameData:
    """Per-frame quantities the sampler needs, computed once."""

    def __init__(self, frame, edge_percentile: float = 0.95):
        depth = frame.depth_gt
        self.frame = frame
        self.rows, self.cols = np.nonzero(depth.valid)
        if len(self.rows) == 0:
            raise SamplingError(f"frame {frame.timestamp} has no valid depth")
        self.depth_values = depth.values[self.rows, self.cols]
        self.d_min = float(self.depth_values.min())
        self.d_max = float(self.depth_values.max())
        self.edges = sobel_edge_mask(depth, edge_percentile)
        self.gt = depth.filled(np.nan)


def sample_virtual_depths(real_depth: np.ndarray, d_min: float, d_max: float, rng, q: float,
                          variance: float):
    """Mixture of near-surface Gaussians (probability q) and uniform depths on [d_min, d_max].

    Returns (depths, from_gaussian).
    """
    n = len(real_depth)
    gaussian = rng.random(n) < q
    depth = rng.uniform(d_min, d_max, size=n)
    std = math.sqrt(variance)
    idx = np.flatnonzero(gaussian)
    draws = real_depth[idx] + rng.normal(0.0, std, size=len(idx))
    bad = draws <= MIN_GAUSSIAN_DEPTH
    while bad.any():
        draws[bad] = real_depth[idx[bad]] + rng.normal(0.0, std, size=int(bad.sum()))
        bad = draws <= MIN_GAUSSIAN_DEPTH
    depth[idx] = draws
    return depth, gaussian


def corrupt_previous(y, rng, p1: float = 0.25, p2: float = 0.25, noise: float = 0.3) -> np.ndarray:
    """Pseudo previous prediction from binary labels.

    Labels are softened to ``|y - u|`` with ``u ~ U[0, noise]``, flipped to
    ``1 - value`` with probability p1, and replaced by the start-of-sequence
    sentinel -1 with probability p2.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    sentinel = rng.random(n) < p2
    soft = np.abs(y.reshape(-1) - rng.uniform(0.0, noise, size=n)) if noise > 0 else y.reshape(-1).copy()
    flip = rng.random(n) < p1
    soft = np.where(flip, 1.0 - soft, soft)
    return np.where(sentinel, -1.0, soft).reshape(y.shape)


def sample_queries(data: FrameData, rng, n: int, config: TrainConfig) -> dict:
    pick = rng.integers(0, len(data.rows), size=n)
    rows, cols = data.rows[pick], data.cols[pick]
    real = data.depth_values[pick]
    depth, gaussian = sample_virtual_depths(real, data.d_min, data.d_max, rng, config.q,
                                            config.gaussian_variance)
    label = (depth >= real).astype(np.float64)   # ties count as behind
    if config.temporal:
        prev = corrupt_previous(label, rng, config.p1, config.p2, config.prev_noise)
    else:
        prev = np.full(n, -1.0)
    return {"u": cols.astype(np.float64), "v": rows.astype(np.float64), "depth": depth, "label": label,
            "prev": prev, "is_edge": data.edges[rows, cols], "gaussian": gaussian}


def sample_query(frame, rng, config: Optional[TrainConfig] = None, frame_index: int = 0) -> QuerySample:
    config = config or TrainConfig()
    s = sample_queries(FrameData(frame, config.edge_percentile), rng, 1, config)
    return QuerySample(frame_index, float(s["u"][0]), float(s["v"][0]), float(s["depth"][0]),
                       int(s["label"][0]), float(s["prev"][0]), bool(s["is_edge"][0]))


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)


class _Sampler:
    def __init__(self, dataset, config: TrainConfig):
        if not dataset:
            raise TrainingError("training needs at least one sequence")
        self.config = config
        self.index = []
        self.data = []
        for si, seq in enumerate(dataset):
            for fi, frame in enumerate(seq.frames):
                self.index.append((si, fi))
                self.data.append(FrameData(frame, config.edge_percentile))
        self.dataset = dataset

    def context(self, si, fi):
        n = self.config.context_frames
        if not n:
            return None
        frames = self.dataset[si].frames
        return np.concatenate([frames[max(fi - k, 0)].rgb for k in range(1, n + 1)], axis=-1)

    def batch(self, rng, with_queries: bool = True) -> QueryBatch:
        cfg = self.config
        picks = rng.integers(0, len(self.data), size=cfg.images_per_step)
        images = np.stack([self.data[i].frame.rgb for i in picks])
        ctx = None
        if cfg.context_frames:
            ctx = np.stack([self.context(*self.index[i]) for i in picks])
        gt = np.stack([self.data[i].gt for i in picks])
        parts = [sample_queries(self.data[i], rng, cfg.samples_per_image, cfg) for i in picks]
        cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
        bidx = np.repeat(np.arange(len(picks)), cfg.samples_per_image)
        return QueryBatch(images, bidx, cat["u"], cat["v"], cat["depth"], cat["prev"], cat["label"],
                          cat["is_edge"], context=ctx, gt_depth=gt)


def _check_finite(value: float, step: int):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step}")


def _maybe_warm_start(model, config: TrainConfig):
    if config.warm_start:
        copy_encoder(load_checkpoint(config.warm_start, dtype=np.float32), model)


def train_implicit(dataset, config: Optional[TrainConfig] = None) -> TrainResult:
    config = config or TrainConfig()
    model = ImplicitModel(config.model_config("implicit"), dtype=np.float32)
    _maybe_warm_start(model, config)
    sampler = _Sampler(dataset, config)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    history = []
    for step in range(config.steps):
        batch = sampler.batch(rng)
        total, bce, reg = implicit_loss(model, batch, config.lambda_reg)
        _check_finite(float(total.data), step)
        zero_grad(params)
        total.backward()
        adam_step(params, config.lr_at(step))
        history.append({"step": step, "bce": float(bce.data), "reg": float(reg.data), "total": float(total.data)})
        if config.log_every and step % config.log_every == 0:
            log.info("implicit step %d: bce %.4f reg %.4f", step, history[-1]["bce"], history[-1]["reg"])
    if config.checkpoint:
        save_checkpoint(model, config.checkpoint)
    return TrainResult(model, history)


def train_regression(dataset, config: Optional[TrainConfig] = None) -> TrainResult:
    config = config or TrainConfig()
    model = RegressionModel(config.model_config("regression"), dtype=np.float32)
    _maybe_warm_start(model, config)
    sampler = _Sampler(dataset, config)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    history = []
    for step in range(config.steps):
        batch = sampler.batch(rng)
        loss = regression_loss(model, batch)
        _check_finite(float(loss.data), step)
        zero_grad(params)
        loss.backward()
        adam_step(params, config.lr_at(step))
        history.append({"step": step, "bce": 0.0, "reg": 0.0, "total": float(loss.data)})
        if config.log_every and step % config.log_every == 0:
            log.info("regression step %d: log-L1 %.4f", step, history[-1]["total"])
    if config.checkpoint:
        save_checkpoint(model, config.checkpoint)
    return TrainResult(model, history)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "bce", "reg", "total"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: (row[k] if k == "step" else repr(float(row[k]))) for k in writer.fieldnames})
