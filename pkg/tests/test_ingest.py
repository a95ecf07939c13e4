import numpy as np
import pytest

from limfuse.ingest import (ParseError, analytic_render, exact_gpr_oracle,
                            fibonacci_sphere, load_color_png, load_depth_png,
                            load_ply, load_poses, make_synthetic_scene,
                            read_kv_config, save_color_png, save_depth_png,
                            save_ply, unproject, look_at, SCENE_OFFSET)
from limfuse.kernel import KernelParams, matern_72
from limfuse.surface import Camera, Mesh, raycast_render


class TestUnproject:
    def test_flat_depth_center_pixel(self):
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
        depth = np.full((480, 640), 2.0, dtype=np.float32)
        frame = unproject(depth, cam)
        # pixel (row 240, col 320) maps to the optical axis
        target = np.array([0.0, 0.0, 2.0])
        dist = np.linalg.norm(frame.points - target, axis=1)
        assert dist.min() < 1e-9
        assert len(frame) == 480 * 640

    def test_millimeter_depth(self):
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
        depth = np.full((480, 640), 2000, dtype=np.uint16)
        frame = unproject(depth, cam)
        assert frame.points[:, 2].max() == pytest.approx(2.0)

    def test_all_zero_depth_empty_frame(self):
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
        frame = unproject(np.zeros((480, 640), dtype=np.uint16), cam)
        assert len(frame) == 0

    def test_ambiguous_dtype_needs_flag(self):
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
        depth = np.full((480, 640), 2, dtype=np.int32)
        with pytest.raises(ValueError, match="ambiguous"):
            unproject(depth, cam)
        frame = unproject(depth, cam, depth_unit="m")
        assert frame.points[:, 2].max() == pytest.approx(2.0)

    def test_channel_size_mismatch(self):
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
        depth = np.full((480, 640), 2.0, dtype=np.float32)
        with pytest.raises(ValueError):
            unproject(depth, cam, properties={"color": np.zeros((100, 100, 3), np.uint8)})

    def test_uint8_channels_scaled(self):
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)
        depth = np.full((480, 640), 1.0, dtype=np.float32)
        color = np.full((480, 640, 3), 255, dtype=np.uint8)
        frame = unproject(depth, cam, properties={"color": color})
        assert np.allclose(frame.properties["color"], 1.0)

    def test_render_unproject_round_trip(self):
        # plane quad at z=2, identity camera; raycast then back-project
        verts = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0],
                          [1.0, 1.0, 2.0], [-1.0, 1.0, 2.0]])
        mesh = Mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
        cam = Camera(300.0, 300.0, 160.0, 120.0, 320, 240)
        depth, _ = raycast_render(mesh, None, cam)
        frame = unproject(depth.astype(np.float32), cam)
        assert len(frame) > 0
        assert np.abs(frame.points[:, 2] - 2.0).max() < 1e-3


class TestSyntheticScenes:
    def test_sphere_exact_radius(self):
        scene = make_synthetic_scene("sphere", density=500, noise_std=0.0)
        pts = np.vstack([f.points for f in scene.frames])
        assert np.abs(np.linalg.norm(pts - SCENE_OFFSET, axis=1) - 1.0).max() < 1e-9

    def test_deterministic_bytes(self):
        a = make_synthetic_scene("room", density=300, noise_std=0.002, seed=4)
        b = make_synthetic_scene("room", density=300, noise_std=0.002, seed=4)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.points, fb.points)
            assert np.array_equal(fa.properties["color"], fb.properties["color"])

    def test_room_sdf_sign_consistency(self):
        scene = make_synthetic_scene("room", density=300)
        center = SCENE_OFFSET + np.array([0.0, 0.0, 1.25])
        assert scene.sdf(center)[0] > 0                       # free space inside
        assert scene.sdf(center + np.array([5.0, 0.0, 0.0]))[0] < 0   # beyond walls
        assert scene.sdf(SCENE_OFFSET + np.array([1.0, 0.55, 0.45]))[0] < 0  # in object
        pts = np.vstack([f.points for f in scene.frames])
        assert np.abs(scene.sdf(pts)).max() < 1e-6

    def test_sample_surface_on_boundary(self):
        scene = make_synthetic_scene("room", density=300)
        samples = scene.sample_surface(5000, seed=3)
        assert np.abs(scene.sdf(samples)).max() < 1e-6

    def test_box_normals_face_outward(self):
        scene = make_synthetic_scene("box", density=400)
        frame = scene.frames[0]
        stepped = frame.points + 0.01 * frame.normals
        assert np.all(scene.sdf(stepped) > 0)

    def test_analytic_render_depth(self):
        scene = make_synthetic_scene("sphere", density=200)
        depth, color = analytic_render(scene)
        hit = depth > 0
        assert hit.any()
        cam = scene.camera
        us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
        dirs = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy,
                         np.ones_like(us, float)], -1).reshape(-1, 3) @ cam.pose[:3, :3].T
        pts = cam.position + depth.reshape(-1, 1) * dirs
        err = scene.sdf(pts[hit.ravel()])
        assert np.abs(err).max() < 1e-9

    def test_unknown_scene(self):
        with pytest.raises(ValueError):
            make_synthetic_scene("torus")


class TestExactGprOracle:
    def test_single_point_closed_form(self):
        params = KernelParams(1.0, 0.5)
        x = np.array([[0.1, 0.2, 0.3]])
        y = np.array([2.0])
        noise = 0.1
        got = exact_gpr_oracle(x, y, x, params, noise)
        k0 = matern_72(0.0, params)
        assert got[0, 0] == pytest.approx(2.0 * k0 / (k0 + noise**2), rel=1e-12)

    def test_interpolates_with_small_noise(self, rng):
        params = KernelParams(1.0, 0.5)
        x = rng.uniform(-0.5, 0.5, (40, 3)) * np.array([1, 1, 1])
        # enforce separation so the system stays well-conditioned
        keep = [0]
        for i in range(1, 40):
            if np.linalg.norm(x[i] - x[keep], axis=1).min() > 0.12:
                keep.append(i)
        x = x[keep]
        y = rng.normal(size=len(x))
        got = exact_gpr_oracle(x, y, x, params, 1e-5)
        assert np.abs(got[:, 0] - y).max() / np.abs(y).max() < 1e-4

    def test_large_noise_shrinks_to_zero(self, rng):
        params = KernelParams(1.0, 0.5)
        x = rng.uniform(-0.5, 0.5, (30, 3))
        y = rng.normal(size=30)
        got = exact_gpr_oracle(x, y, x, params, 1e4)
        assert np.abs(got).max() < 1e-4

    def test_size_cap(self, rng):
        with pytest.raises(ValueError):
            exact_gpr_oracle(np.zeros((5001, 3)), np.zeros(5001), np.zeros((1, 3)),
                             KernelParams(), 0.1)


class TestPly:
    def test_binary_round_trip_bit_exact(self, tmp_path, rng):
        verts = rng.normal(size=(50, 3)).astype(np.float32)
        tris = rng.integers(0, 50, (30, 3)).astype(np.int32)
        normals = rng.normal(size=(50, 3)).astype(np.float32)
        colors = rng.integers(0, 256, (50, 3)).astype(np.uint8)
        path = tmp_path / "m.ply"
        save_ply(path, verts, tris, normals=normals, colors=colors, binary=True)
        got = load_ply(path)
        assert np.array_equal(got.vertices, verts)
        assert np.array_equal(got.triangles, tris.astype(np.int64))
        assert np.array_equal(got.normals, normals)
        assert np.array_equal(got.colors, colors)

    def test_ascii_round_trip(self, tmp_path, rng):
        verts = rng.normal(size=(20, 3)).astype(np.float32)
        tris = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int32)
        path = tmp_path / "m.ply"
        save_ply(path, verts, tris, binary=False)
        got = load_ply(path)
        assert np.abs(got.vertices - verts).max() < 1e-6
        assert np.array_equal(got.triangles, tris.astype(np.int64))

    def test_float_colors_clamped_at_export(self, tmp_path):
        verts = np.zeros((2, 3), np.float32)
        colors = np.array([[1.5, -0.2, 0.5], [0.0, 1.0, 0.25]])
        path = tmp_path / "c.ply"
        save_ply(path, verts, colors=colors)
        got = load_ply(path)
        assert got.colors[0].tolist() == [255, 0, 128]
        assert got.colors[1].tolist() == [0, 255, 64]

    def test_truncated_binary(self, tmp_path, rng):
        verts = rng.normal(size=(50, 3)).astype(np.float32)
        path = tmp_path / "m.ply"
        save_ply(path, verts)
        data = path.read_bytes()
        path.write_bytes(data[:-40])
        with pytest.raises(ParseError, match="truncated"):
            load_ply(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("ply\nformat ascii 1.0\nelement weird 3\nend_header\n")
        with pytest.raises(ParseError, match="weird"):
            load_ply(path)

    def test_not_ply(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("obj\nend_header\n")
        with pytest.raises(ParseError):
            load_ply(path)


class TestPoses:
    def test_matrix_lines(self, tmp_path):
        pose = np.arange(16, dtype=float).reshape(4, 4)
        path = tmp_path / "poses.txt"
        path.write_text(" ".join(str(v) for v in pose.ravel()) + "\n")
        got = load_poses(path)
        assert np.array_equal(got[0], pose)

    def test_tum_lines(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("# timestamp tx ty tz qx qy qz qw\n"
                        "0.0 1.0 2.0 3.0 0.0 0.0 0.7071067811865476 0.7071067811865476\n")
        got = load_poses(path)
        rot = got[0][:3, :3]
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(got[0][:3, 3], [1.0, 2.0, 3.0])
        assert np.allclose(rot @ np.array([1.0, 0, 0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_bad_token_count(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(ParseError, match="poses.txt:1"):
            load_poses(path)


class TestImages:
    def test_depth_png_round_trip(self, tmp_path, rng):
        depth = rng.uniform(0, 5.0, (24, 32))
        path = tmp_path / "d.png"
        save_depth_png(path, depth)
        back = load_depth_png(path)
        assert back.dtype == np.uint16
        assert np.abs(back / 1000.0 - depth).max() < 0.5e-3 + 1e-9

    def test_color_png_round_trip(self, tmp_path, rng):
        img = rng.random((16, 20, 3))
        path = tmp_path / "c.png"
        save_color_png(path, img)
        back = load_color_png(path)
        assert back.shape == (16, 20, 3)
        assert np.abs(back / 255.0 - img).max() < 0.5 / 255 + 1e-9


class TestKvConfig:
    def test_parse(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nscene=room\ndensity = 2500\n\nseed=3 # inline\n")
        got = read_kv_config(path)
        assert got == {"scene": "room", "density": "2500", "seed": "3"}

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("oops\n")
        with pytest.raises(ParseError, match="c.cfg:1"):
            read_kv_config(path)


class TestLookAt:
    def test_rigid_and_forward(self):
        pose = look_at((1.0, 2.0, 3.0), (0.0, 0.0, 0.0))
        rot = pose[:3, :3]
        assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0)
        forward = rot[:, 2]
        want = -np.array([1.0, 2.0, 3.0]) / np.linalg.norm([1.0, 2.0, 3.0])
        assert np.allclose(forward, want)
