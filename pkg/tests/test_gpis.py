import numpy as np
import pytest

from limfuse.encoder import EmptyVoxelError, EncodingConfig
from limfuse.gpis import (GpisConfig, OrientedPoints, build_derivative_design,
                          encode_surface_derivative, encode_surface_sample,
                          estimate_normals, extend_samples)
from limfuse.ingest import fibonacci_sphere
from limfuse.kernel import posi_encode, posi_encode_deriv


def plane_patch(rng, n=60, half=0.4):
    pts = rng.uniform(-half, half, (n, 3))
    pts[:, 2] = 0.0
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return OrientedPoints(pts, normals)


class TestEstimateNormals:
    def test_plane(self, rng):
        pts = rng.uniform(-1, 1, (500, 3))
        pts[:, 2] = 0.0
        normals = estimate_normals(pts, k=16, viewpoint=(0, 0, 1))
        angles = np.degrees(np.arccos(np.clip(normals[:, 2], -1, 1)))
        assert angles.max() < 1.0

    def test_sphere_from_outside(self):
        # Viewpoint at (0, 0, 3) sees the cap above the z = 1/3 horizon;
        # stay clearly above it so the orientation flip is unambiguous.
        pts = fibonacci_sphere(2000)
        normals = estimate_normals(pts, k=16, viewpoint=(0, 0, 3))
        visible = pts[:, 2] > 0.45
        cos = np.einsum("nd,nd->n", normals[visible], pts[visible])
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5.0

    def test_too_few_points(self, rng):
        with pytest.raises(ValueError):
            estimate_normals(rng.normal(size=(10, 3)), k=16)

    def test_degenerate_neighborhood_flagged(self):
        pts = np.zeros((20, 3))
        normals, degenerate = estimate_normals(pts, k=16, viewpoint=(0, 0, 2),
                                               return_degenerate=True)
        assert degenerate.all()
        assert np.allclose(normals, [0, 0, 1])


class TestExtendSamples:
    def test_single_point_rule(self):
        op = OrientedPoints(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
        x_ext, y_ext = extend_samples(op, 0.1)
        got = {(tuple(np.round(p, 12)), round(v, 12)) for p, v in zip(x_ext, y_ext)}
        assert got == {((0.0, 0.0, 0.0), 0.0),
                       ((0.0, 0.0, 0.1), 0.1),
                       ((0.0, 0.0, -0.1), -0.1)}

    def test_row_count_and_zero_level(self, rng):
        op = plane_patch(rng, n=33)
        x_ext, y_ext = extend_samples(op, 0.07)
        assert x_ext.shape == (99, 3)
        assert y_ext.shape == (99,)
        assert np.array_equal(y_ext[:33], np.zeros(33))

    def test_sphere_offset_radii(self):
        pts = fibonacci_sphere(200)
        op = OrientedPoints(pts, pts.copy())
        x_ext, _ = extend_samples(op, 0.1)
        radii = np.linalg.norm(x_ext, axis=1)
        assert np.allclose(radii[200:400], 1.1, atol=1e-12)
        assert np.allclose(radii[400:], 0.9, atol=1e-12)


class TestSampleMode:
    def test_plane_sign_agreement(self, enc, rng):
        op = plane_patch(rng)
        feat = encode_surface_sample(enc, op, 0.1)
        probes = rng.uniform(-0.35, 0.35, (50, 3))
        probes[:, 2] = rng.uniform(-0.3, 0.3, 50)
        decoded = (posi_encode(enc, probes) @ feat.matrix)[:, 0]
        agree = np.sign(decoded) == np.sign(probes[:, 2])
        assert agree.mean() >= 0.95

    def test_offset_value_recovery(self, enc, rng):
        op = plane_patch(rng)
        feat = encode_surface_sample(enc, op, 0.1)
        at_offsets = (posi_encode(enc, op.points + 0.1 * op.normals) @ feat.matrix)[:, 0]
        assert np.abs(at_offsets - 0.1).max() < 0.03

    def test_zero_level_at_inputs(self, enc, rng):
        op = plane_patch(rng)
        feat = encode_surface_sample(enc, op, 0.1)
        at_inputs = (posi_encode(enc, op.points) @ feat.matrix)[:, 0]
        assert np.abs(at_inputs).max() < 0.05

    def test_empty_input(self, enc):
        op = OrientedPoints(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(EmptyVoxelError):
            encode_surface_sample(enc, op, 0.1)


class TestDerivativeMode:
    def test_gradient_aligns_with_normals(self, enc, rng):
        op = plane_patch(rng)
        feat = encode_surface_derivative(enc, op)
        grads = np.stack([(posi_encode_deriv(enc, op.points, ax) @ feat.matrix)[:, 0]
                          for ax in (1, 2, 3)], axis=1)
        cos = np.einsum("nd,nd->n", grads, op.normals) / np.linalg.norm(grads, axis=1)
        assert cos.mean() > 0.9

    def test_zero_level_at_inputs(self, enc, rng):
        op = plane_patch(rng)
        feat = encode_surface_derivative(enc, op)
        at_inputs = (posi_encode(enc, op.points) @ feat.matrix)[:, 0]
        assert np.abs(at_inputs).max() < 0.05

    def test_design_width(self, enc, rng):
        op = plane_patch(rng, n=17)
        design, targets = build_derivative_design(enc, op)
        assert design.shape == (enc.rank, 68)
        assert targets.shape == (68,)

    def test_min_points(self, enc, rng):
        op = plane_patch(rng, n=3)
        with pytest.raises(EmptyVoxelError):
            encode_surface_derivative(enc, op, EncodingConfig(noise=0.05, min_points=8))


class TestValidation:
    def test_gpis_config(self):
        with pytest.raises(ValueError):
            GpisConfig(mode="nope")
        with pytest.raises(ValueError):
            GpisConfig(sample_distance=0.0)
        with pytest.raises(ValueError):
            GpisConfig(sample_distance=0.5)
        with pytest.raises(ValueError):
            GpisConfig(samples_per_point=3)
        GpisConfig(mode="derivative", samples_per_point=3)   # unused in this mode

    def test_oriented_points(self, rng):
        pts = rng.normal(size=(5, 3))
        with pytest.raises(ValueError):
            OrientedPoints(pts, pts)   # not unit length
        with pytest.raises(ValueError):
            OrientedPoints(pts, np.tile([0.0, 0.0, 1.0], (4, 1)))
