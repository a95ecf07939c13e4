import numpy as np
import pytest

import limfuse as lf
from limfuse.kernel import (EigenFloorError, KernelParams, build_anchor_basis,
                            load_basis, matern_72, matern_72_ddist,
                            posi_encode, posi_encode_deriv, save_basis)
from scipy.spatial.distance import cdist

# Closed-form value of the covariance at d=1 with sigma=rho=1, computed
# independently before the implementation was written.
MATERN_AT_1 = 0.5449424471128748

# Measured kernel-approximation RMS at rank 20 with default hyperparameters
# (10^4 uniform pairs, fixed seeds); asserted to stay within +-10%.
RANK20_RMS = 0.0075484
RANK20_RMS_CEILING = RANK20_RMS * 1.1


class TestMatern:
    def test_zero_distance_is_amplitude(self):
        assert matern_72(0.0, KernelParams(1.0, 1.0)) == pytest.approx(1.0, abs=1e-15)
        assert matern_72(0.0, KernelParams(2.0, 0.3)) == pytest.approx(4.0, abs=1e-12)

    def test_closed_form_value(self):
        assert matern_72(1.0, KernelParams(1.0, 1.0)) == pytest.approx(MATERN_AT_1, rel=1e-12)

    def test_symmetry_in_point_distance(self, rng):
        x1 = rng.normal(size=(50, 3))
        x2 = rng.normal(size=(50, 3))
        d12 = np.linalg.norm(x1 - x2, axis=1)
        d21 = np.linalg.norm(x2 - x1, axis=1)
        assert np.array_equal(matern_72(d12), matern_72(d21))

    def test_range(self, rng):
        d = rng.uniform(0, 10, 1000)
        k = matern_72(d, KernelParams(1.5, 0.7))
        assert np.all(k > 0)
        assert np.all(k <= 1.5**2 + 1e-12)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            KernelParams(sigma=-1.0)
        with pytest.raises(ValueError):
            KernelParams(rho=0.0)
        with pytest.raises(ValueError):
            KernelParams(nu=2.5)


class TestMaternDerivative:
    def test_zero_at_origin(self):
        assert matern_72_ddist(0.0) == 0.0

    def test_matches_finite_difference(self):
        p = KernelParams(1.0, 0.5)
        h = 1e-6
        for d in (0.1, 0.7, 1.3, 2.9):
            fd = (matern_72(d + h, p) - matern_72(d - h, p)) / (2 * h)
            assert matern_72_ddist(d, p) == pytest.approx(fd, abs=1e-6)

    def test_nonpositive_everywhere(self):
        d = np.linspace(0, 8, 500)
        assert np.all(matern_72_ddist(d, KernelParams(1.2, 0.4)) <= 0)


class TestBuildAnchorBasis:
    def test_default_shape_and_spectrum(self, enc):
        assert enc.n_anchors == 256
        assert enc.rank == 20
        assert enc.eigenvalues.shape == (20,)
        assert np.all(enc.eigenvalues > 0)
        assert np.all(np.diff(enc.eigenvalues) <= 0)
        assert enc.weights.shape == (20, 256)

    def test_seeded_determinism(self):
        a = build_anchor_basis(seed=7, n_anchors=64, rank=10)
        b = build_anchor_basis(seed=7, n_anchors=64, rank=10)
        assert np.array_equal(a.anchors, b.anchors)
        assert np.array_equal(a.eigenvalues, b.eigenvalues)
        assert np.array_equal(a.weights, b.weights)

    def test_full_rank_eigendecomposition_identity(self, enc_full):
        gram = matern_72(cdist(enc_full.anchors, enc_full.anchors), enc_full.params)
        vecs = enc_full.weights * np.sqrt(enc_full.eigenvalues)[:, None]   # rows u_i^T
        recon = (vecs.T * enc_full.eigenvalues) @ vecs
        assert np.abs(recon - gram).max() < 1e-10 * enc_full.params.sigma**2

    def test_invalid_rank(self):
        with pytest.raises(ValueError):
            build_anchor_basis(rank=0)
        with pytest.raises(ValueError):
            build_anchor_basis(n_anchors=16, rank=17)

    def test_degenerate_domain(self):
        with pytest.raises(ValueError):
            build_anchor_basis(domain=((0, 0, 0), (0, 1, 1)))

    def test_eigen_floor_rejects_rank_deficiency(self):
        # A very smooth kernel over a tiny domain decays the spectrum below
        # the floor well before the anchor count.
        with pytest.raises(EigenFloorError):
            build_anchor_basis(n_anchors=128, rank=128,
                               domain=((-0.05,) * 3, (0.05,) * 3),
                               params=KernelParams(1.0, 5.0))


class TestPosiEncode:
    def test_output_length_is_rank(self, enc):
        assert posi_encode(enc, np.zeros(3)).shape == (20,)
        assert posi_encode(enc, np.zeros((7, 3))).shape == (7, 20)

    def test_full_rank_exact_on_anchors(self, enc_full):
        feats = posi_encode(enc_full, enc_full.anchors)
        gram = matern_72(cdist(enc_full.anchors, enc_full.anchors), enc_full.params)
        assert np.abs(feats @ feats.T - gram).max() < 1e-8 * enc_full.params.sigma**2

    def test_rank20_approximation_rms(self, enc):
        rng = np.random.Generator(np.random.Philox(123))
        x1 = rng.uniform(-0.5, 0.5, (10000, 3))
        x2 = rng.uniform(-0.5, 0.5, (10000, 3))
        approx = np.sum(posi_encode(enc, x1) * posi_encode(enc, x2), axis=1)
        exact = matern_72(np.linalg.norm(x1 - x2, axis=1), enc.params)
        rms = np.sqrt(np.mean((approx - exact) ** 2)) / enc.params.sigma**2
        assert rms < RANK20_RMS_CEILING
        assert rms == pytest.approx(RANK20_RMS, rel=0.1)

    def test_deterministic(self, enc, rng):
        x = rng.uniform(-0.5, 0.5, (5, 3))
        assert np.array_equal(posi_encode(enc, x), posi_encode(enc, x))

    def test_gram_is_positive_semidefinite(self, enc, rng):
        x = rng.uniform(-0.6, 0.6, (60, 3))
        feats = posi_encode(enc, x)
        eig = np.linalg.eigvalsh(feats @ feats.T)
        assert eig.min() > -1e-10

    def test_monotone_approximation_in_rank(self):
        rng = np.random.Generator(np.random.Philox(123))
        x1 = rng.uniform(-0.5, 0.5, (2000, 3))
        x2 = rng.uniform(-0.5, 0.5, (2000, 3))
        exact = matern_72(np.linalg.norm(x1 - x2, axis=1))
        prev = np.inf
        for rank in (1, 2, 5, 10, 20, 40, 80, 160, 256):
            e = build_anchor_basis(seed=1, rank=rank)
            mse = np.mean((np.sum(posi_encode(e, x1) * posi_encode(e, x2), 1) - exact) ** 2)
            assert mse <= prev + 1e-15
            prev = mse


class TestPosiEncodeDeriv:
    def test_matches_finite_differences(self, enc):
        rng = np.random.Generator(np.random.Philox(5))
        pts = rng.uniform(-0.45, 0.45, (100, 3))
        h = 1e-5
        for axis in (1, 2, 3):
            step = np.zeros(3)
            step[axis - 1] = h
            fd = (posi_encode(enc, pts + step) - posi_encode(enc, pts - step)) / (2 * h)
            an = posi_encode_deriv(enc, pts, axis)
            assert np.abs(fd - an).max() < 1e-5

    def test_translation_invariance(self, enc, rng):
        shift = np.array([0.3, -1.1, 0.7])
        shifted = lf.PositionalEncoder(
            anchors=enc.anchors + shift, params=enc.params, rank=enc.rank,
            eigenvalues=enc.eigenvalues, weights=enc.weights,
            domain=enc.domain + shift, seed=enc.seed)
        x = rng.uniform(-0.4, 0.4, (20, 3))
        for axis in (1, 2, 3):
            a = posi_encode_deriv(enc, x, axis)
            b = posi_encode_deriv(shifted, x + shift, axis)
            assert np.abs(a - b).max() < 1e-12

    def test_axis_contract(self, enc):
        with pytest.raises(ValueError):
            posi_encode_deriv(enc, np.zeros(3), 0)
        with pytest.raises(ValueError):
            posi_encode_deriv(enc, np.zeros(3), 4)


class TestBasisSerialization:
    def test_round_trip_bit_exact(self, enc, tmp_path):
        path = tmp_path / "basis.limb"
        save_basis(enc, path)
        loaded = load_basis(path)
        assert np.array_equal(loaded.anchors, enc.anchors)
        assert np.array_equal(loaded.eigenvalues, enc.eigenvalues)
        assert np.array_equal(loaded.weights, enc.weights)
        assert np.array_equal(loaded.domain, enc.domain)
        assert loaded.seed == enc.seed
        assert loaded.params == enc.params
        assert loaded.ref_hash() == enc.ref_hash()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.limb"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_basis(path)

    def test_truncated(self, enc, tmp_path):
        path = tmp_path / "trunc.limb"
        save_basis(enc, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(ValueError):
            load_basis(path)
