import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tacsim import registration as reg


def random_transform(rng) -> reg.RigidTransform:
    return reg.RigidTransform(Rotation.random(random_state=rng).as_matrix(),
                              rng.uniform(-0.1, 0.1, 3))


def rotation_angle(r: np.ndarray) -> float:
    return float(np.abs(Rotation.from_matrix(r).magnitude()))


class TestFrameFromTriple:
    def test_canonical_triple_is_identity(self):
        h = reg.frame_from_triple([0, 0, 0], [1, 0, 0], [0, 1, 0])
        np.testing.assert_allclose(h.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(h.translation, 0.0, atol=1e-15)

    def test_translated_triple(self):
        t = np.array([0.3, -0.2, 0.9])
        h = reg.frame_from_triple(t, t + [1, 0, 0], t + [0, 1, 0])
        np.testing.assert_allclose(h.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(h.translation, t, atol=1e-15)

    def test_random_triples_orthonormal(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b, c = rng.normal(size=(3, 3))
            h = reg.frame_from_triple(a, b, c)
            np.testing.assert_allclose(h.rotation.T @ h.rotation, np.eye(3),
                                       atol=1e-12)
            assert np.linalg.det(h.rotation) == pytest.approx(1.0, abs=1e-12)

    def test_collinear_rejected(self):
        with pytest.raises(reg.RegistrationError):
            reg.frame_from_triple([0, 0, 0], [1, 0, 0], [2, 0, 0])


class TestRegisterTriple:
    def test_identity_for_identical_triples(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(3, 3))
        h = reg.register_triple(p, p)
        np.testing.assert_allclose(h.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(h.translation, 0.0, atol=1e-12)

    def test_recovers_planted_transform(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            true = random_transform(rng)
            p = rng.normal(size=(3, 3)) * 0.05
            q = reg.apply(true, p)
            h = reg.register_triple(p, q)
            assert rotation_angle(h.rotation.T @ true.rotation) < 1e-9
            np.testing.assert_allclose(h.translation, true.translation,
                                       atol=1e-9)
            np.testing.assert_allclose(reg.apply(h, p), q, atol=1e-9)

    def test_noisy_points_leave_nonzero_residual(self):
        rng = np.random.default_rng(3)
        true = random_transform(rng)
        p = rng.normal(size=(3, 3)) * 0.05
        q = reg.apply(true, p) + rng.normal(scale=1.5e-4, size=(3, 3))
        h = reg.register_triple(p, q)
        res = np.linalg.norm(reg.apply(h, p) - q, axis=1)
        assert res.max() > 1e-6          # noise must show up
        assert res.max() < 5e-3          # but stay noise-scale

    def test_left_equivariance(self):
        rng = np.random.default_rng(4)
        p = rng.normal(size=(3, 3)) * 0.05
        q = rng.normal(size=(3, 3)) * 0.05
        base = reg.register_triple(p, q)
        extra = random_transform(rng)
        shifted = reg.register_triple(p, reg.apply(extra, q))
        expect = extra.compose(base)
        assert rotation_angle(shifted.rotation.T @ expect.rotation) < 1e-9
        np.testing.assert_allclose(shifted.translation, expect.translation,
                                   atol=1e-9)


class TestRegisterAveraged:
    def four_points(self, rng):
        # roughly planar fixture-scale layout (circular plate ~ 40 mm radius)
        ang = rng.uniform(0, 2 * np.pi, 4)
        pts = np.column_stack([0.04 * np.cos(ang), 0.04 * np.sin(ang),
                               rng.uniform(-0.005, 0.005, 4)])
        return pts

    def test_noiseless_matches_single_triple(self):
        rng = np.random.default_rng(5)
        true = random_transform(rng)
        p = self.four_points(rng)
        q = reg.apply(true, p)
        avg = reg.register_averaged(reg.PointCorrespondences(p, q))
        single = reg.register_triple(p[:3], q[:3])
        assert rotation_angle(avg.rotation.T @ single.rotation) < 1e-9
        np.testing.assert_allclose(avg.translation, single.translation,
                                   atol=1e-9)

    def test_averaging_beats_single_triple_monte_carlo(self):
        rng = np.random.default_rng(6)
        true = random_transform(rng)
        probes = rng.uniform(-0.15, 0.15, size=(8, 3))
        sigma = 0.15e-3
        err_avg, err_single = [], []
        for _ in range(1000):
            p = self.four_points(rng)
            q = reg.apply(true, p) + rng.normal(scale=sigma, size=p.shape)
            avg = reg.register_averaged(reg.PointCorrespondences(p, q))
            err_avg.append(np.linalg.norm(
                reg.apply(avg, probes) - reg.apply(true, probes),
                axis=1).mean())
            trip_errs = []
            for idx in ([0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]):
                h = reg.register_triple(p[idx], q[idx])
                trip_errs.append(np.linalg.norm(
                    reg.apply(h, probes) - reg.apply(true, probes),
                    axis=1).mean())
            err_single.append(np.mean(trip_errs))
        assert np.mean(err_avg) <= np.mean(err_single)

    def test_noise_regime_matches_fixture_scale(self):
        # 0.15 mm point noise on a ~40 mm fixture should land end-effector
        # errors in the sub-millimeter-to-millimeter range
        rng = np.random.default_rng(7)
        true = random_transform(rng)
        probes = rng.uniform(-0.2, 0.2, size=(8, 3))
        errs = []
        for _ in range(300):
            p = self.four_points(rng)
            q = reg.apply(true, p) + rng.normal(scale=0.15e-3, size=p.shape)
            avg = reg.register_averaged(reg.PointCorrespondences(p, q))
            errs.append(np.linalg.norm(
                reg.apply(avg, probes) - reg.apply(true, probes),
                axis=1).mean())
        assert 0.05e-3 < np.mean(errs) < 3e-3

    def test_quaternion_sign_flip_immaterial(self):
        # a rotation near pi makes quaternion signs ambiguous; averaging
        # with hemisphere alignment must still be consistent
        rng = np.random.default_rng(8)
        axis = np.array([0.0, 0.0, 1.0])
        rot = Rotation.from_rotvec(axis * (np.pi - 1e-4)).as_matrix()
        true = reg.RigidTransform(rot, np.array([0.01, 0.0, 0.0]))
        p = self.four_points(rng)
        q = reg.apply(true, p)
        avg = reg.register_averaged(reg.PointCorrespondences(p, q))
        assert rotation_angle(avg.rotation.T @ true.rotation) < 1e-9

    def test_collinear_combination_skipped(self):
        # points 0,1,2 collinear; the other 3 combinations remain valid
        p = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]],
                     dtype=float)
        h = reg.register_averaged(reg.PointCorrespondences(p, p))
        np.testing.assert_allclose(h.rotation, np.eye(3), atol=1e-12)

    def test_too_few_valid_combinations(self):
        p = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]],
                     dtype=float)
        with pytest.raises(reg.RegistrationError):
            reg.register_averaged(reg.PointCorrespondences(p, p))


class TestApply:
    def test_identity(self):
        t = reg.RigidTransform()
        p = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(reg.apply(t, p), p)

    def test_composition(self):
        rng = np.random.default_rng(9)
        h1, h2 = random_transform(rng), random_transform(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose(reg.apply(h2, reg.apply(h1, p)),
                                   reg.apply(h2.compose(h1), p), atol=1e-12)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(10)
        h = random_transform(rng)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(reg.apply(h.inverse(), reg.apply(h, p)),
                                   p, atol=1e-12)


class TestIO:
    def test_correspondence_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        corr = reg.PointCorrespondences(rng.normal(size=(4, 3)),
                                        rng.normal(size=(4, 3)))
        path = tmp_path / "corr.csv"
        reg.save_correspondences(corr, path)
        back = reg.load_correspondences(path)
        np.testing.assert_allclose(back.p, corr.p, atol=1e-15)
        np.testing.assert_allclose(back.q, corr.q, atol=1e-15)

    def test_transform_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        h = random_transform(rng)
        path = tmp_path / "h.json"
        reg.save_transform(h, path)
        back = reg.load_transform(path)
        np.testing.assert_allclose(back.matrix(), h.matrix(), atol=1e-15)
