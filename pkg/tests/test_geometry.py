import numpy as np
import pytest
from scipy import stats

from tacsim import geometry as geo


def unit_cube_mesh():
    # 8 corners, 12 outward triangles
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                 dtype=float)
    f = np.array([
        [0, 1, 3], [0, 3, 2],        # x = 0, normal -x
        [4, 6, 7], [4, 7, 5],        # x = 1, normal +x
        [0, 4, 5], [0, 5, 1],        # y = 0
        [2, 3, 7], [2, 7, 6],        # y = 1
        [0, 2, 6], [0, 6, 4],        # z = 0
        [1, 5, 7], [1, 7, 3],        # z = 1
    ])
    return geo.TriMesh(v, f, closed=True)


class TestTriMesh:
    def test_face_index_out_of_range(self):
        with pytest.raises(geo.GeometryError):
            geo.TriMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))

    def test_open_mesh_rejected_as_closed(self):
        v = np.eye(3)
        with pytest.raises(geo.GeometryError):
            geo.TriMesh(v, np.array([[0, 1, 2]]), closed=True)


class TestEnclosedVolume:
    def test_unit_cube_exact(self):
        assert geo.enclosed_volume(unit_cube_mesh()) == pytest.approx(1.0,
                                                                      abs=1e-15)

    def test_icosphere_within_one_percent(self):
        m = geo.icosphere(3, radius=1.0)
        assert m.n_faces == 1280
        vol = geo.enclosed_volume(m)
        assert abs(vol - 4.0 / 3.0 * np.pi) / (4.0 / 3.0 * np.pi) < 0.01

    def test_inward_oriented_cube_rejected(self):
        m = unit_cube_mesh()
        flipped = geo.TriMesh(m.vertices, m.faces[:, ::-1], closed=True)
        with pytest.raises(geo.GeometryError):
            geo.enclosed_volume(flipped)

    def test_open_mesh_rejected(self):
        m = unit_cube_mesh()
        with pytest.raises(geo.GeometryError):
            geo.enclosed_volume(geo.TriMesh(m.vertices, m.faces[:-1]))

    def test_rigid_invariance(self):
        m = geo.icosphere(2, radius=0.7)
        v0 = geo.enclosed_volume(m)
        ang = 0.83
        rot = np.array([[np.cos(ang), -np.sin(ang), 0],
                        [np.sin(ang), np.cos(ang), 0],
                        [0, 0, 1.0]])
        moved = geo.TriMesh(m.vertices @ rot.T + np.array([0.3, -1.2, 2.0]),
                            m.faces, closed=True)
        assert geo.enclosed_volume(moved) == pytest.approx(v0, rel=1e-12)


class TestSignedDistance:
    def test_sphere_surface_point(self):
        s = geo.RigidShape("sphere", {"radius": 5e-3})
        d, n = geo.signed_distance(s, np.array([0.0, 0.0, 5e-3]))
        assert d == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)

    def test_sphere_outside(self):
        s = geo.RigidShape("sphere", {"radius": 5e-3})
        d, _ = geo.signed_distance(s, np.array([0.0, 0.0, 7e-3]))
        assert d == pytest.approx(2e-3)

    def test_cube_edge_against_brute_force(self):
        # brute-force closest point on a densely sampled cube surface
        h = 5e-3
        s = geo.RigidShape("cube", {"half_extent": h})
        grid = np.linspace(-h, h, 201)
        faces = []
        for axis in range(3):
            for sgn in (-h, h):
                a, b = np.meshgrid(grid, grid)
                pts = np.zeros((a.size, 3))
                pts[:, axis] = sgn
                pts[:, (axis + 1) % 3] = a.ravel()
                pts[:, (axis + 2) % 3] = b.ravel()
                faces.append(pts)
        surf = np.concatenate(faces)
        p = np.array([6e-3, 6e-3, 0.0])
        brute = np.min(np.linalg.norm(surf - p, axis=1))
        d, n = geo.signed_distance(s, p)
        assert d == pytest.approx(brute, abs=1e-6)
        assert d == pytest.approx(np.sqrt(2) * 1e-3, rel=1e-12)
        np.testing.assert_allclose(n, [1 / np.sqrt(2), 1 / np.sqrt(2), 0],
                                   atol=1e-12)

    @pytest.mark.parametrize("kind,dims", [
        ("sphere", {"radius": 5e-3}),
        ("cylinder", {"radius": 4e-3, "half_length": 10e-3}),
        ("ring", {"major_radius": 8e-3, "minor_radius": 2e-3}),
        ("cube", {"half_extent": 5e-3}),
        ("flat", {}),
    ])
    def test_normal_matches_fd_gradient(self, kind, dims):
        s = geo.RigidShape(kind, dims)
        rng = np.random.default_rng(7)
        eps = 1e-7
        checked = 0
        while checked < 50:
            p = rng.uniform(-15e-3, 15e-3, 3)
            d, n = geo.signed_distance(s, p)
            if abs(d) < 1e-4:   # skip near-surface / non-unique features
                continue
            assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-12)
            gfd = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = eps
                gfd[i] = (geo.signed_distance(s, p + e)[0]
                          - geo.signed_distance(s, p - e)[0]) / (2 * eps)
            if np.linalg.norm(gfd - n) > 1e-6:
                # non-unique closest feature (e.g. cylinder axis): skip
                if kind in ("cylinder", "ring", "cube") and d < 0:
                    continue
            np.testing.assert_allclose(gfd, n, atol=1e-5)
            checked += 1

    def test_posed_shape(self):
        ang = np.pi / 2
        rot = np.array([[1, 0, 0],
                        [0, np.cos(ang), -np.sin(ang)],
                        [0, np.sin(ang), np.cos(ang)]], dtype=float)
        s = geo.RigidShape("cylinder", {"radius": 2e-3, "half_length": 5e-3},
                           rotation=rot, translation=np.array([0, 0, 10e-3]))
        d, _ = geo.signed_distance(s, np.array([0.0, 0.0, 0.0]))
        assert d == pytest.approx(8e-3)

    def test_bad_pose_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.RigidShape("sphere", {"radius": 1e-3},
                           rotation=np.diag([1.0, 1.0, -1.0]))

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.RigidShape("sphere", {"radius": 0.0})


class TestFingertip:
    def test_closed_genus_zero(self):
        g = geo.build_fingertip(geo.FingertipParams(radius=7e-3,
                                                    length=15e-3,
                                                    edge_length=2e-3))
        assert geo.euler_characteristic(g.skin) == 2
        assert geo.enclosed_volume(g.skin) > 0

    def test_exactly_19_electrodes(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2.5e-3))
        assert len(g.electrode_sites) == 19
        np.testing.assert_allclose(np.linalg.norm(g.electrode_normals, axis=1),
                                   1.0, atol=1e-12)
        # sites lie on the core surface
        np.testing.assert_allclose(g.core.distance(g.electrode_sites), 0.0,
                                   atol=1e-12)

    def test_halving_edge_quadruples_faces(self):
        coarse = geo.build_fingertip(geo.FingertipParams(edge_length=2e-3))
        fine = geo.build_fingertip(geo.FingertipParams(edge_length=1e-3))
        ratio = fine.skin.n_faces / coarse.skin.n_faces
        assert 3.2 < ratio < 4.8

    def test_core_must_fit_inside(self):
        with pytest.raises(geo.GeometryError):
            geo.build_fingertip(geo.FingertipParams(radius=5e-3,
                                                    core_radius=5e-3))

    def test_anchors_disjoint_from_ventral(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2e-3))
        sets = g.skin.node_sets
        anchors = np.union1d(sets["clamp"], sets["nail"])
        assert len(np.intersect1d(anchors, sets["ventral"])) == 0

    def test_mirror_symmetric_vertex_set(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2e-3))
        v = g.skin.vertices
        mirrored = v * np.array([1.0, -1.0, 1.0])
        from scipy.spatial import cKDTree
        d, _ = cKDTree(v).query(mirrored)
        assert d.max() < 1e-12


class TestVentralSampling:
    def test_count_and_bounds(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2.5e-3))
        pts = geo.sample_ventral_points(g, 10, seed=3)
        assert pts.shape == (10, 3)
        xlo, xhi, phimax = g.ventral_bounds
        assert np.all(pts[:, 0] >= xlo) and np.all(pts[:, 0] <= xhi)
        phi = np.arctan2(pts[:, 1], -pts[:, 2])
        assert np.all(np.abs(phi) <= phimax + 1e-12)
        np.testing.assert_allclose(np.hypot(pts[:, 1], pts[:, 2]),
                                   g.params.radius, rtol=1e-12)

    def test_deterministic_per_seed(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2.5e-3))
        a = geo.sample_ventral_points(g, 25, seed=11)
        b = geo.sample_ventral_points(g, 25, seed=11)
        np.testing.assert_array_equal(a, b)
        c = geo.sample_ventral_points(g, 25, seed=12)
        assert not np.array_equal(a, c)

    def test_uniformity_chi_squared(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2.5e-3))
        pts = geo.sample_ventral_points(g, 10_000, seed=5)
        xlo, xhi, phimax = g.ventral_bounds
        xbin = np.digitize(pts[:, 0], np.linspace(xlo, xhi, 6)[1:-1])
        phi = np.arctan2(pts[:, 1], -pts[:, 2])
        pbin = np.digitize(phi, np.linspace(-phimax, phimax, 6)[1:-1])
        counts = np.bincount(xbin * 5 + pbin, minlength=25)
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_requires_positive_count(self):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2.5e-3))
        with pytest.raises(geo.GeometryError):
            geo.sample_ventral_points(g, 0, seed=1)


class TestIO:
    def test_obj_roundtrip_with_node_sets(self, tmp_path):
        g = geo.build_fingertip(geo.FingertipParams(edge_length=2.5e-3))
        path = tmp_path / "skin.obj"
        geo.save_obj(g.skin, path)
        back = geo.load_obj(path, closed=True)
        np.testing.assert_allclose(back.vertices, g.skin.vertices, atol=1e-15)
        np.testing.assert_array_equal(back.faces, g.skin.faces)
        for name, idx in g.skin.node_sets.items():
            np.testing.assert_array_equal(back.node_sets[name], idx)

    def test_fingertip_config_roundtrip(self, tmp_path):
        p = geo.FingertipParams(radius=6e-3, edge_length=1.5e-3)
        path = tmp_path / "fingertip.json"
        geo.save_fingertip_config(p, path)
        q = geo.load_fingertip_config(path)
        assert q == p
