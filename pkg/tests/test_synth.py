import json

import numpy as np
import pytest

from implicit_depth.geometry import CameraIntrinsics, DepthMap, Pose
from implicit_depth.io import FormatError, read_depth, write_depth
from implicit_depth.synth import (MAX_STEP_ROTATION_DEG, MAX_STEP_TRANSLATION, ConfigError, PlacementError,
                                  Primitive, SceneConfig, SceneDescription, cast_rays, generate_dataset,
                                  generate_scene, generate_sequence, load_sequence, render_frame,
                                  save_sequence)

K_ODD = CameraIntrinsics.from_fov(33, 21, 60.0)   # odd size: the centre pixel lies on the optical axis


def box_room(primitives):
    return SceneDescription(0, [4.0, 4.0, 4.0], primitives, [[0.5, 0.5, 0.5]] * 6)


def far_sphere():
    return Primitive("sphere", [0.3, 0.3, 0.3], [0.1], 0.0, [0.5, 0.5, 0.5])


class TestGenerateScene:
    def test_deterministic(self):
        assert generate_scene(5).to_json() == generate_scene(5).to_json()

    def test_seed_sensitivity(self):
        assert generate_scene(1).primitives != generate_scene(2).primitives

    def test_zero_primitives_rejected(self):
        with pytest.raises(ConfigError):
            generate_scene(0, SceneConfig(n_primitives=(0, 0)))

    def test_oversized_primitives_rejected(self):
        with pytest.raises(ConfigError):
            generate_scene(0, SceneConfig(size_range=(0.5, 10.0)))

    @pytest.mark.parametrize("seed", range(5))
    def test_invariants(self, seed):
        scene = generate_scene(seed)
        room = np.array(scene.room)
        assert len(scene.primitives) >= 1
        for p in scene.primitives:
            assert np.all(np.array(p.albedo) >= 0) and np.all(np.array(p.albedo) <= 1)
            c = np.array(p.center)
            reach = p.size[0] if p.kind == "sphere" else np.hypot(p.size[0], p.size[1]) / 2
            assert np.all(c[:2] - reach >= 0) and np.all(c[:2] + reach <= room[:2])


class TestRenderFrame:
    def test_wall_depth(self):
        scene = box_room([far_sphere()])
        pose = Pose.look_at([2.0, 2.0, 2.0], [4.0, 2.0, 2.0])
        frame = render_frame(scene, pose, K_ODD)
        np.testing.assert_allclose(frame.depth_gt.values, 2.0, atol=1e-6)
        assert frame.depth_gt.valid.all()

    def test_cuboid_near_face(self):
        cube = Primitive("cuboid", [3.5, 2.0, 2.0], [1.0, 1.0, 1.0], 0.0, [0.8, 0.2, 0.2])
        scene = box_room([cube])
        pose = Pose.look_at([0.5, 2.0, 2.0], [1.5, 2.0, 2.0])
        frame = render_frame(scene, pose, K_ODD)
        assert frame.depth_gt.values[10, 16] == pytest.approx(2.5, abs=1e-6)

    def test_rotated_cuboid_matches_analytic_intersection(self):
        # a 45 degree yawed cube presents an edge at the centre: distance = centre - half diagonal
        cube = Primitive("cuboid", [3.0, 2.0, 2.0], [1.0, 1.0, 1.0], np.pi / 4, [0.5, 0.5, 0.5])
        t, _, _ = cast_rays(box_room([cube]), np.array([0.5, 2.0, 2.0]), np.array([[1.0, 0.0, 0.0]]))
        assert t[0] == pytest.approx(2.5 - np.sqrt(0.5), abs=1e-9)

    def test_sphere_probe_rays(self, rng):
        sphere = Primitive("sphere", [3.0, 2.0, 2.0], [0.6], 0.0, [0.5, 0.5, 0.5])
        scene = box_room([sphere])
        origin = np.array([0.5, 2.0, 2.0])
        dirs = np.column_stack([np.ones(50), rng.uniform(-0.2, 0.2, 50), rng.uniform(-0.2, 0.2, 50)])
        t, _, _ = cast_rays(scene, origin, dirs)
        for ti, d in zip(t, dirs):
            # solve |o + t d - c|^2 = r^2 independently
            oc = origin - np.array(sphere.center)
            roots = np.roots([d @ d, 2 * d @ oc, oc @ oc - 0.36])
            real = roots[np.isreal(roots)].real
            expected = real[real > 0].min() if len(real) else None
            if expected is not None:
                assert ti == pytest.approx(expected, abs=1e-5)

    def test_deterministic(self):
        scene = generate_scene(3)
        pose = generate_sequence(scene, 3, 2, K_ODD).frames[0].pose
        a = render_frame(scene, pose, K_ODD, timestamp=4)
        b = render_frame(scene, pose, K_ODD, timestamp=4)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth_gt.values, b.depth_gt.values)

    def test_rgb_range_and_noise(self):
        scene = box_room([far_sphere()])
        pose = Pose.look_at([2.0, 2.0, 2.0], [4.0, 2.0, 2.0])
        rgb = render_frame(scene, pose, K_ODD).rgb
        assert rgb.min() >= 0 and rgb.max() <= 1
        # a flat wall under directional light: pixel spread comes from noise only
        assert rgb.std(axis=(0, 1)).max() <= 0.02

    def test_camera_inside_primitive(self):
        cube = Primitive("cuboid", [2.0, 2.0, 2.0], [1.0, 1.0, 1.0], 0.0, [0.5, 0.5, 0.5])
        with pytest.raises(PlacementError):
            render_frame(box_room([cube]), Pose.look_at([2.0, 2.0, 2.0], [3.0, 2.0, 2.0]), K_ODD)


class TestSequence:
    def test_minimum_length(self):
        seq = generate_sequence(generate_scene(0), 0, 2, K_ODD)
        assert len(seq) == 2
        assert not np.allclose(seq[0].pose.matrix, seq[1].pose.matrix)

    def test_too_short(self):
        with pytest.raises(ConfigError):
            generate_sequence(generate_scene(0), 0, 1, K_ODD)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_motion_bounds(self, seed):
        seq = generate_sequence(generate_scene(seed), seed, 30, K_ODD)
        for a, b in zip(seq.frames, seq.frames[1:]):
            assert np.linalg.norm(b.pose.translation - a.pose.translation) <= MAX_STEP_TRANSLATION
            rel = a.pose.rotation.T @ b.pose.rotation
            angle = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
            assert angle <= MAX_STEP_ROTATION_DEG
            assert b.depth_gt.valid.all()

    def test_deterministic(self):
        a = generate_dataset(4, 1, 5)[0]
        b = generate_dataset(4, 1, 5)[0]
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.rgb, fb.rgb)
            np.testing.assert_array_equal(fa.pose.matrix, fb.pose.matrix)


class TestPersistence:
    @pytest.fixture
    def saved(self, tmp_path):
        seq = generate_dataset(1, 1, 3)[0]
        save_sequence(seq, tmp_path / "s")
        return seq, tmp_path / "s"

    def test_round_trip(self, saved):
        seq, path = saved
        loaded = load_sequence(path)
        assert loaded.intrinsics == seq.intrinsics
        assert loaded.scene.to_json() == seq.scene.to_json()
        for a, b in zip(seq.frames, loaded.frames):
            np.testing.assert_array_equal(a.depth_gt.values, b.depth_gt.values)
            np.testing.assert_array_equal(a.pose.matrix, b.pose.matrix)
            np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-12)
            assert a.timestamp == b.timestamp

    def test_wrong_frame_count(self, saved):
        _, path = saved
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["frame_count"] = 5
        (path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="frame_count"):
            load_sequence(path)

    def test_nan_depth(self, saved):
        _, path = saved
        depth = read_depth(path / "depth_00001.bin")
        vals = depth.values.copy()
        vals[3, 3] = np.nan
        write_depth(path / "depth_00001.bin", DepthMap(vals))
        with pytest.raises(FormatError, match="depth_00001"):
            load_sequence(path)

    def test_dimension_mismatch(self, saved):
        _, path = saved
        write_depth(path / "depth_00000.bin", DepthMap.constant(1.0, (4, 4)))
        with pytest.raises(FormatError, match="depth_00000"):
            load_sequence(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError, match="manifest"):
            load_sequence(tmp_path)

    def test_corrupt_manifest(self, saved):
        _, path = saved
        (path / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError, match="manifest"):
            load_sequence(path)
