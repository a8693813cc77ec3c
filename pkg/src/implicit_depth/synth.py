"""Procedural indoor scenes: cuboids and spheres in a box room, ray cast analytically."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, GeometryError, Pose
from .io import FormatError, read_depth, read_rgb, write_depth, write_rgb

log = logging.getLogger(__name__)

LIGHT_DIRECTION = np.array([0.5, -0.6, 0.62]) / np.linalg.norm([0.5, -0.6, 0.62])
AMBIENT = 0.35
NOISE_AMPLITUDE = 0.02
MAX_STEP_TRANSLATION = 0.05
MAX_STEP_ROTATION_DEG = 2.0


class ConfigError(ValueError):
    pass


class PlacementError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    room_size: tuple = (6.5, 5.0, 2.8)
    n_primitives: tuple = (3, 6)
    size_range: tuple = (0.3, 1.0)
    sphere_probability: float = 0.35
    width: int = 96
    height: int = 64
    hfov_deg: float = 62.0

    def validate(self):
        lo, hi = self.n_primitives
        if lo < 1 or hi < lo:
            raise ConfigError(f"primitive count range {self.n_primitives} must satisfy 1 <= min <= max")
        smin, smax = self.size_range
        if not 0 < smin <= smax:
            raise ConfigError(f"size range {self.size_range} is invalid")
        if any(r <= 0 for r in self.room_size):
            raise ConfigError("room size must be positive")
        if smax >= min(self.room_size) - 1.0:
            raise ConfigError(f"primitives up to {smax} m do not fit a {self.room_size} room with camera clearance")
        if not 0 <= self.sphere_probability <= 1:
            raise ConfigError("sphere probability must lie in [0, 1]")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg)


@dataclass
class Primitive:
    kind: str                    # "cuboid" or "sphere"
    center: list
    size: list                   # cuboid: full extents (x, y, z); sphere: [radius]
    yaw: float
    albedo: list

    def contains(self, point, margin: float = 0.0) -> bool:
        local = np.asarray(point) - np.asarray(self.center)
        if self.kind == "sphere":
            return float(np.linalg.norm(local)) < self.size[0] + margin
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        lx = c * local[0] + s * local[1]
        ly = -s * local[0] + c * local[1]
        half = np.asarray(self.size) / 2 + margin
        return bool(abs(lx) < half[0] and abs(ly) < half[1] and abs(local[2]) < half[2])


@dataclass
class SceneDescription:
    seed: int
    room: list                   # (Lx, Ly, Lz); room spans [0, L] on each axis
    primitives: list
    wall_albedo: list            # 6 rows: -x, +x, -y, +y, floor, ceiling

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        if not self.primitives:
            raise ConfigError("a scene needs at least one primitive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDescription":
        return cls(**d)


@dataclass
class Frame:
    rgb: np.ndarray
    depth_gt: DepthMap
    pose: Pose
    timestamp: int

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth_gt.shape or self.rgb.shape[2:] != (3,):
            raise FormatError(f"rgb shape {self.rgb.shape} does not match depth {self.depth_gt.shape}")


@dataclass
class Sequence:
    frames: list
    intrinsics: CameraIntrinsics
    scene: Optional[SceneDescription] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise FormatError("a sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> SceneDescription:
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    room = np.asarray(config.room_size, dtype=float)
    n = int(rng.integers(config.n_primitives[0], config.n_primitives[1] + 1))
    prims = []
    for _ in range(n):
        albedo = rng.uniform(0.15, 0.95, size=3).round(6).tolist()
        if rng.random() < config.sphere_probability:
            r = float(rng.uniform(*config.size_range)) / 2
            z = r if rng.random() < 0.7 else float(rng.uniform(r, room[2] - r))
            xy = rng.uniform(r + 0.05, room[:2] - r - 0.05)
            prims.append(Primitive("sphere", [float(xy[0]), float(xy[1]), z], [r], 0.0, albedo))
        else:
            size = rng.uniform(config.size_range[0], config.size_range[1], size=3)
            size[2] = rng.uniform(config.size_range[0], min(2 * config.size_range[1], room[2] - 0.2))
            yaw = float(rng.uniform(0, np.pi))
            reach = float(np.hypot(size[0], size[1])) / 2
            xy = rng.uniform(reach + 0.05, room[:2] - reach - 0.05)
            prims.append(Primitive("cuboid", [float(xy[0]), float(xy[1]), float(size[2] / 2)],
                                   size.round(6).tolist(), round(yaw, 6), albedo))
    walls = rng.uniform(0.3, 0.9, size=(6, 3)).round(6).tolist()
    return SceneDescription(int(seed), room.tolist(), prims, walls)


def _intersect_room(o, d, room):
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d > 0, room, 0.0)
        t_axes = (bound - o) / d
    t_axes = np.where(d == 0, np.inf, t_axes)
    axis = np.argmin(t_axes, axis=-1)
    t = np.take_along_axis(t_axes, axis[:, None], axis=-1)[:, 0]
    sign = np.take_along_axis(d, axis[:, None], axis=-1)[:, 0] > 0
    normal = np.zeros_like(d)
    normal[np.arange(len(d)), axis] = np.where(sign, -1.0, 1.0)
    # wall index: -x, +x, -y, +y, floor, ceiling
    wall = 2 * axis + sign.astype(int)
    return t, normal, wall


def _intersect_sphere(o, d, prim: Primitive):
    c = np.asarray(prim.center)
    r = prim.size[0]
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * (d @ oc)
    cc = oc @ oc - r * r
    disc = b * b - 4 * a * cc
    t = np.full(len(d), np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t[hit & (t0 > 0)] = t0[hit & (t0 > 0)]
    with np.errstate(invalid="ignore"):
        normal = (o + t[:, None] * d - c) / r
    return t, normal


def _intersect_cuboid(o, d, prim: Primitive):
    c, s = np.cos(prim.yaw), np.sin(prim.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])   # local -> world
    lo = (o - np.asarray(prim.center)) @ rot
    ld = d @ rot
    half = np.asarray(prim.size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    # a ray parallel to a slab either always or never lies within it
    parallel = ld == 0
    inside = np.abs(lo) <= half
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.inf, t2)
    tnear_axes = np.minimum(t1, t2)
    tfar = np.min(np.maximum(t1, t2), axis=-1)
    axis = np.argmax(tnear_axes, axis=-1)
    tnear = np.take_along_axis(tnear_axes, axis[:, None], axis=-1)[:, 0]
    hit = (tnear <= tfar) & (tnear > 0)
    t = np.where(hit, tnear, np.inf)
    n_local = np.zeros_like(d)
    dir_sign = np.take_along_axis(ld, axis[:, None], axis=-1)[:, 0]
    n_local[np.arange(len(d)), axis] = np.where(dir_sign > 0, -1.0, 1.0)
    return t, n_local @ rot.T


def cast_rays(scene: SceneDescription, origin, directions):
    """Nearest hit along ``origin + t * directions``.

    Returns (t, normal, albedo); ``t`` is in units of the direction vectors.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float)
    room = np.asarray(scene.room)
    t, normal, wall = _intersect_room(o, d, room)
    albedo = np.asarray(scene.wall_albedo)[wall]
    for prim in scene.primitives:
        if prim.kind == "sphere":
            tp, np_ = _intersect_sphere(o, d, prim)
        else:
            tp, np_ = _intersect_cuboid(o, d, prim)
        closer = tp < t
        t = np.where(closer, tp, t)
        normal[closer] = np_[closer]
        albedo[closer] = prim.albedo
    return t, normal, albedo


def check_placement(scene: SceneDescription, position, margin: float = 0.0) -> None:
    p = np.asarray(position, dtype=float)
    room = np.asarray(scene.room)
    if np.any(p <= margin) or np.any(p >= room - margin):
        raise PlacementError(f"camera at {p.round(3).tolist()} is outside the room")
    for i, prim in enumerate(scene.primitives):
        if prim.contains(p, margin):
            raise PlacementError(f"camera at {p.round(3).tolist()} is inside primitive {i}")


def render_frame(scene: SceneDescription, pose: Pose, K: CameraIntrinsics,
                 noise_seed: Optional[int] = None, timestamp: int = 0) -> Frame:
    check_placement(scene, pose.translation)
    rays_cam = K.camera_rays().reshape(-1, 3)
    rays = rays_cam @ pose.rotation.T
    t, normal, albedo = cast_rays(scene, pose.translation, rays)
    h, w = K.shape
    # camera-space rays have unit z, so the hit parameter is the z-depth
    depth = t.reshape(h, w).astype(np.float32).astype(np.float64)
    shade = AMBIENT + (1 - AMBIENT) * np.maximum(0.0, normal @ LIGHT_DIRECTION)
    rgb = (albedo * shade[:, None]).reshape(h, w, 3)
    seed = scene.seed if noise_seed is None else noise_seed
    rng = np.random.default_rng([int(seed), int(timestamp), 7])
    rgb = rgb + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=rgb.shape)
    rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    return Frame(rgb, DepthMap(depth, np.isfinite(depth) & (depth > 0)), pose, timestamp)


def _pose_from_angles(position, yaw, pitch) -> Pose:
    forward = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    return Pose.look_at(position, np.asarray(position) + forward)


def sample_trajectory(scene: SceneDescription, seed: int, n_frames: int,
                      clearance: float = 0.35, max_retries: int = 200) -> list[Pose]:
    """Smooth random walk with per-frame translation <= 5 cm and rotation <= 2 degrees."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    rng = np.random.default_rng([int(seed), 99])
    room = np.asarray(scene.room)

    def ok(p):
        try:
            check_placement(scene, p, clearance)
        except PlacementError:
            return False
        return True

    for _ in range(max_retries):
        pos = np.array([rng.uniform(clearance, room[0] - clearance),
                        rng.uniform(clearance, room[1] - clearance),
                        rng.uniform(1.1, min(1.7, room[2] - clearance))])
        if ok(pos):
            break
    else:
        raise GenerationError("could not place the initial camera")
    yaw = float(rng.uniform(-np.pi, np.pi))
    pitch = float(rng.uniform(np.radians(-25), np.radians(-8)))
    vel = rng.normal(0, 0.02, size=3)
    yaw_rate = pitch_rate = 0.0
    max_rate = np.radians(MAX_STEP_ROTATION_DEG) / 2 * 0.99
    poses = [_pose_from_angles(pos, yaw, pitch)]
    while len(poses) < n_frames:
        for _ in range(max_retries):
            vel = 0.8 * vel + rng.normal(0, 0.012, size=3)
            vel[2] *= 0.5
            speed = np.linalg.norm(vel)
            if speed > MAX_STEP_TRANSLATION * 0.99:
                vel *= MAX_STEP_TRANSLATION * 0.99 / speed
            elif speed < 0.01:
                vel = vel / max(speed, 1e-9) * 0.01
            yaw_rate = float(np.clip(0.8 * yaw_rate + rng.normal(0, np.radians(0.4)), -max_rate, max_rate))
            pitch_rate = float(np.clip(0.8 * pitch_rate + rng.normal(0, np.radians(0.2)), -max_rate, max_rate))
            new_pitch = pitch + pitch_rate
            if not np.radians(-35) < new_pitch < np.radians(5):
                pitch_rate = -pitch_rate
                new_pitch = pitch + pitch_rate
            if ok(pos + vel):
                pos = pos + vel
                yaw += yaw_rate
                pitch = new_pitch
                break
            vel = -vel + rng.normal(0, 0.01, size=3)
        else:
            raise GenerationError(f"trajectory left the free space at frame {len(poses)}")
        poses.append(_pose_from_angles(pos, yaw, pitch))
    return poses


def generate_sequence(scene: SceneDescription, trajectory_seed: int, n_frames: int,
                      K: CameraIntrinsics) -> Sequence:
    if n_frames < 2:
        raise ConfigError("a sequence needs at least 2 frames")
    poses = sample_trajectory(scene, trajectory_seed, n_frames)
    frames = [render_frame(scene, pose, K, noise_seed=scene.seed * 1000 + trajectory_seed, timestamp=i)
              for i, pose in enumerate(poses)]
    return Sequence(frames, K, scene)


def generate_dataset(seed: int, n_scenes: int, n_frames: int,
                     config: Optional[SceneConfig] = None) -> list[Sequence]:
    """One sequence per scene; scene ``i`` uses seed ``seed * 10007 + i``."""
    config = config or SceneConfig()
    K = config.intrinsics()
    out = []
    for i in range(n_scenes):
        scene_seed = seed * 10007 + i
        out.append(generate_sequence(generate_scene(scene_seed, config), scene_seed, n_frames, K))
    return out


MANIFEST = "manifest.json"


def save_sequence(seq: Sequence, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(seq.frames):
        rgb_name, depth_name = f"rgb_{i:05d}.png", f"depth_{i:05d}.bin"
        write_rgb(directory / rgb_name, frame.rgb)
        write_depth(directory / depth_name, frame.depth_gt)
        entries.append({"timestamp": int(frame.timestamp), "pose": frame.pose.matrix.reshape(-1).tolist(),
                        "rgb": rgb_name, "depth": depth_name})
    manifest = {"version": 1, "intrinsics": seq.intrinsics.to_dict(), "frame_count": len(entries),
                "frames": entries}
    if seq.scene is not None:
        manifest["scene"] = json.loads(seq.scene.to_json())
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_sequence(directory) -> Sequence:
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: manifest missing") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from exc
    try:
        K = CameraIntrinsics(**manifest["intrinsics"])
        entries = manifest["frames"]
        count = manifest["frame_count"]
    except (KeyError, TypeError, GeometryError) as exc:
        raise FormatError(f"{path}: invalid manifest ({exc})") from exc
    if count != len(entries):
        raise FormatError(f"{path}: frame_count {count} does not match {len(entries)} frame entries")
    frames = []
    for entry in entries:
        depth_path = directory / entry["depth"]
        depth = read_depth(depth_path, allow_nan=False)
        if depth.shape != K.shape:
            raise FormatError(f"{depth_path}: size {depth.shape} does not match intrinsics {K.shape}")
        if not depth.valid.any():
            raise FormatError(f"{depth_path}: no valid depth")
        rgb_path = directory / entry["rgb"]
        rgb = read_rgb(rgb_path)
        if rgb.shape[:2] != K.shape:
            raise FormatError(f"{rgb_path}: size {rgb.shape[:2]} does not match intrinsics {K.shape}")
        try:
            pose = Pose.from_matrix(entry["pose"])
        except (ValueError, GeometryError) as exc:
            raise FormatError(f"{path}: invalid pose for {entry['depth']} ({exc})") from exc
        frames.append(Frame(rgb, depth, pose, int(entry["timestamp"])))
    scene = SceneDescription.from_dict(manifest["scene"]) if "scene" in manifest else None
    return Sequence(frames, K, scene)


def load_dataset(root) -> list[Sequence]:
    """Load one sequence directory, or every sequence directory below ``root``."""
    root = Path(root)
    if (root / MANIFEST).exists():
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if (p / MANIFEST).exists())
    if not dirs:
        raise FormatError(f"{root}: no sequence manifests found")
    return [load_sequence(p) for p in dirs]
