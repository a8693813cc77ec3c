"""Models, losses, optimiser and checkpoints built on :mod:`implicit_depth.autograd`."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_DEPTH_MIN = float(np.log(0.25))
LOG_DEPTH_MAX = float(np.log(10.0))
BCE_EPS = 1e-7
CHECKPOINT_MAGIC = b"IMPD"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class OptimizationError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Parameter(Tensor):
    """A trainable array with its Adam moments."""

    def __init__(self, data, name=""):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


@dataclass
class EncoderConfig:
    channels: tuple = (16, 32, 32, 32)
    strides: tuple = (2, 2, 1, 1)
    dilations: Optional[tuple] = (1, 1, 2, 4)     # None means undilated
    context_frames: int = 0
    coord_channels: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if self.dilations is None:
            self.dilations = (1,) * len(self.strides)
        self.dilations = tuple(int(d) for d in self.dilations)
        if not len(self.channels) == len(self.strides) == len(self.dilations):
            raise ValueError("encoder channels, strides and dilations must have equal length")
        if min(self.dilations) < 1:
            raise ValueError("dilations must be >= 1")
        if self.stride not in (1, 2, 4):
            raise ValueError(f"total encoder stride must be 1, 2 or 4, got {self.stride}")
        if self.channels[-1] < 1:
            raise ValueError("feature channels K must be >= 1")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def in_channels(self) -> int:
        return 3 * (1 + self.context_frames) + (2 if self.coord_channels else 0)


@dataclass
class ModelConfig:
    kind: str = "implicit"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden: int = 128
    seed: int = 0
    temporal: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        d["encoder"]["strides"] = list(self.encoder.strides)
        d["encoder"]["dilations"] = list(self.encoder.dilations)
        return d


@dataclass
class FeatureMap:
    """Encoder output, channels-last: ``data`` has shape (N, h, w, K)."""

    data: Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_feature_coords(self, u, v):
        """Map full-resolution pixel coordinates onto this map's grid."""
        off = (self.stride - 1) / 2.0
        return (np.asarray(u) - off) / self.stride, (np.asarray(v) - off) / self.stride

    def sample(self, batch_index, u, v) -> Tensor:
        fu, fv = self.to_feature_coords(u, v)
        return ag.bilinear_gather(self.data, batch_index, fu, fv)


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Encoder:
    """Stack of 3x3 convolutions with ELU, producing a K-channel feature map."""

    def __init__(self, config: EncoderConfig, rng, dtype=np.float64, prefix="encoder"):
        self.config = config
        self.layers = []
        cin = config.in_channels
        for i, (cout, stride, dil) in enumerate(zip(config.channels, config.strides, config.dilations)):
            fan_in = 9 * cin
            w = Parameter(_uniform_init(rng, (3, 3, cin, cout), fan_in, dtype), f"{prefix}.conv{i}.weight")
            b = Parameter(_uniform_init(rng, (cout,), fan_in, dtype), f"{prefix}.conv{i}.bias")
            self.layers.append((w, b, stride, dil))
            cin = cout

    def parameters(self) -> list[Parameter]:
        return [p for w, b, _, _ in self.layers for p in (w, b)]

    def prepare_input(self, images: np.ndarray, context: Optional[np.ndarray] = None) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected (N, H, W, 3) images, got {images.shape}")
        n, h, w, _ = images.shape
        s = self.config.stride
        if h % s or w % s:
            raise ShapeError(f"image size {h}x{w} is not divisible by encoder stride {s}")
        parts = [images - 0.5]
        if self.config.context_frames:
            if context is None:
                context = np.repeat(images, self.config.context_frames, axis=-1)
            context = np.asarray(context)
            if context.ndim == 3:
                context = context[None]
            if context.shape != (n, h, w, 3 * self.config.context_frames):
                raise ShapeError(f"context frames have shape {context.shape}")
            parts.append(context - 0.5)
        if self.config.coord_channels:
            yy, xx = np.mgrid[0:h, 0:w]
            coords = np.stack([xx / max(w - 1, 1) - 0.5, yy / max(h - 1, 1) - 0.5], axis=-1)
            parts.append(np.broadcast_to(coords, (n, h, w, 2)))
        dtype = self.layers[0][0].dtype
        return np.concatenate(parts, axis=-1).astype(dtype)

    def __call__(self, images, context=None) -> FeatureMap:
        x = Tensor(self.prepare_input(images, context), requires_grad=False)
        for w, b, stride, dil in self.layers:
            x = ag.elu(ag.conv2d(x, w, b, stride=stride, padding=dil, dilation=dil))
        return FeatureMap(x, self.config.stride)


class MLPHead:
    """(K + 2) -> hidden -> hidden -> 1 with ELU; returns logits."""

    def __init__(self, in_features: int, hidden: int, rng, dtype=np.float64):
        self.in_features = in_features
        dims = [in_features, hidden, hidden, 1]
        self.layers = []
        for i in range(3):
            w = Parameter(_uniform_init(rng, (dims[i], dims[i + 1]), dims[i], dtype), f"mlp.fc{i}.weight")
            b = Parameter(_uniform_init(rng, (dims[i + 1],), dims[i], dtype), f"mlp.fc{i}.bias")
            self.layers.append((w, b))

    def parameters(self) -> list[Parameter]:
        return [p for w, b in self.layers for p in (w, b)]

    def logits(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"MLP expects {self.in_features} inputs, got {x.shape[-1]}")
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < 2:
                x = ag.elu(x)
        return ag.reshape(x, (-1,))


class ImplicitModel:
    """Feature encoder plus a per-pixel MLP conditioned on virtual depth and a previous mask value."""

    def __init__(self, config: Optional[ModelConfig] = None, dtype=np.float64):
        self.config = config or ModelConfig()
        self.config.kind = "implicit"
        rng = np.random.default_rng(self.config.seed)
        self.encoder = Encoder(self.config.encoder, rng, dtype)
        k = self.config.encoder.feature_channels
        self.mlp = MLPHead(k + 2, self.config.hidden, rng, dtype)

    @property
    def feature_channels(self) -> int:
        return self.config.encoder.feature_channels

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.mlp.parameters()

    def encode(self, images, context=None) -> FeatureMap:
        return self.encoder(images, context)

    def head(self, features: Tensor, depth, prev) -> Tensor:
        """Occlusion probability for each row of ``features``."""
        dt = features.dtype
        extra = np.stack([np.asarray(depth, dtype=dt).reshape(-1), np.asarray(prev, dtype=dt).reshape(-1)], axis=1)
        x = ag.concat([features, Tensor(extra, requires_grad=False)], axis=1)
        return ag.sigmoid(self.mlp.logits(x))


class RegressionModel:
    """Same encoder with a 1-channel convolutional log-depth head bounded to [0.25, 10] m."""

    def __init__(self, config: Optional[ModelConfig] = None, dtype=np.float64):
        self.config = config or ModelConfig(kind="regression")
        self.config.kind = "regression"
        rng = np.random.default_rng(self.config.seed)
        self.encoder = Encoder(self.config.encoder, rng, dtype)
        k = self.config.encoder.feature_channels
        self.head_weight = Parameter(_uniform_init(rng, (3, 3, k, 1), 9 * k, dtype), "depth_head.weight")
        self.head_bias = Parameter(np.zeros(1, dtype=dtype), "depth_head.bias")

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + [self.head_weight, self.head_bias]

    def log_depth_map(self, images, context=None) -> FeatureMap:
        feats = self.encoder(images, context)
        pre = ag.conv2d(feats.data, self.head_weight, self.head_bias, stride=1, padding=1)
        logd = ag.sigmoid(pre) * (LOG_DEPTH_MAX - LOG_DEPTH_MIN) + LOG_DEPTH_MIN
        return FeatureMap(logd, feats.stride)

    def predict_depth(self, image, context=None) -> np.ndarray:
        """Full-resolution depth map (H, W) for a single image."""
        image = np.asarray(image)
        h, w = image.shape[:2]
        logd = self.log_depth_map(image, context)
        v, u = np.mgrid[0:h, 0:w]
        vals = logd.sample(np.zeros(h * w, dtype=np.int64), u.ravel(), v.ravel()).data
        return np.exp(vals.reshape(h, w))


def build_model(config: ModelConfig, dtype=np.float64):
    if config.kind == "implicit":
        return ImplicitModel(config, dtype)
    if config.kind == "regression":
        return RegressionModel(config, dtype)
    raise ValueError(f"unknown model kind {config.kind!r}")


def encode_features(model, images, context=None) -> FeatureMap:
    return model.encoder(images, context)


def mlp_forward(model: ImplicitModel, feature, d_virtual: float, prev: float) -> float:
    feature = np.asarray(feature, dtype=model.mlp.layers[0][0].dtype).reshape(1, -1)
    if feature.shape[1] != model.feature_channels:
        raise ShapeError(f"feature has length {feature.shape[1]}, model expects {model.feature_channels}")
    return float(model.head(Tensor(feature, requires_grad=False), [d_virtual], [prev]).data[0])


def bce_loss(c, y) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    c = ag.clip(ag.as_tensor(c), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y, dtype=c.dtype)
    per = -(ag.log(c) * y + ag.log(1.0 - c) * (1.0 - y))
    return ag.tmean(per)


def edge_regularizer(c) -> Tensor:
    """Penalty that is 1 when every prediction is 0.5 and 0 when all are binary."""
    c = ag.as_tensor(c)
    n = c.data.size
    if n == 0:
        return Tensor(0.0, requires_grad=False)
    return ag.tsum(0.5 - ag.tabs(c - 0.5)) * (2.0 / n)


@dataclass
class QueryBatch:
    """Images plus per-query supervision for one optimisation step."""

    images: np.ndarray          # (N, H, W, 3)
    batch_index: np.ndarray     # (B,) image each query belongs to
    u: np.ndarray               # (B,) full-resolution pixel column
    v: np.ndarray               # (B,)
    depth: np.ndarray           # (B,) virtual depth queried
    prev: np.ndarray            # (B,) pseudo previous mask value or -1
    label: np.ndarray           # (B,) 1 if the virtual depth lies behind the real surface
    is_edge: np.ndarray         # (B,) bool
    context: Optional[np.ndarray] = None
    gt_depth: Optional[np.ndarray] = None   # (N, H, W), NaN where invalid

    def __len__(self):
        return len(self.batch_index)


def implicit_loss(model: ImplicitModel, batch: QueryBatch, lambda_reg: float = 0.5):
    """Returns (total, bce, reg) tensors."""
    feats = model.encode(batch.images, batch.context)
    c = model.head(feats.sample(batch.batch_index, batch.u, batch.v), batch.depth, batch.prev)
    bce = bce_loss(c, batch.label)
    edge = np.flatnonzero(batch.is_edge)
    if lambda_reg > 0 and edge.size:
        reg = edge_regularizer(ag.take_rows(c, edge))
        total = bce + reg * lambda_reg
    else:
        reg = Tensor(0.0, requires_grad=False)
        total = bce
    return total, bce, reg


def regression_loss(model: RegressionModel, batch: QueryBatch):
    """Mean |log d_pred - log d_gt| over valid full-resolution pixels."""
    if batch.gt_depth is None:
        raise ValueError("regression loss needs ground-truth depth in the batch")
    logd = model.log_depth_map(batch.images, batch.context)
    gt = np.asarray(batch.gt_depth)
    n, h, w = gt.shape
    bi, vv, uu = np.nonzero(np.isfinite(gt) & (gt > 0))
    pred = logd.sample(bi, uu, vv)
    target = np.log(gt[bi, vv, uu]).astype(pred.dtype)[:, None]
    return ag.tmean(ag.tabs(pred - target))


def adam_step(parameters: Sequence[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    for p in parameters:
        if p.grad is None:
            p.zero_grad()
        if not np.all(np.isfinite(p.grad)):
            raise OptimizationError(f"non-finite gradient in parameter {p.name!r}")
    for p in parameters:
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * p.grad * p.grad
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        p.zero_grad()


def zero_grad(parameters: Sequence[Parameter]):
    for p in parameters:
        p.zero_grad()


def model_loss(model, batch: QueryBatch, lambda_reg: float = 0.5) -> Tensor:
    if isinstance(model, ImplicitModel):
        return implicit_loss(model, batch, lambda_reg)[0]
    return regression_loss(model, batch)


def gradient_check(model, batch: QueryBatch, n_coords: int = 64, eps: float = 1e-4,
                   seed: int = 0, lambda_reg: float = 0.5, corrupt=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``corrupt`` may be a callable ``(name, grad) -> grad`` applied to the
    analytic gradients before comparison (used to test the checker itself).
    """
    params = model.parameters()
    zero_grad(params)
    model_loss(model, batch, lambda_reg).backward()
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grad(params)
    if corrupt is not None:
        analytic = {name: corrupt(name, g) for name, g in analytic.items()}

    rng = np.random.default_rng(seed)
    per_param = max(1, int(np.ceil(n_coords / len(params))))
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(model_loss(model, batch, lambda_reg).data)
            flat[idx] = orig - eps
            down = float(model_loss(model, batch, lambda_reg).data)
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[p.name].reshape(-1)[idx])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def copy_encoder(src, dst):
    """Warm start: copy encoder weights between models of equal encoder config."""
    for a, b in zip(src.encoder.parameters(), dst.encoder.parameters()):
        if a.shape != b.shape:
            raise ShapeError(f"encoder parameter {a.name} has shape {a.shape}, expected {b.shape}")
        b.data[...] = a.data


def save_checkpoint(model, path) -> None:
    header = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(raw[12 : 12 + hlen].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    model = build_model(config, dtype)
    offset = 12 + hlen
    for p in model.parameters():
        nbytes = p.data.size * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {p.name}")
        p.data[...] = np.frombuffer(raw, dtype="<f4", count=p.data.size, offset=offset).reshape(p.shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
