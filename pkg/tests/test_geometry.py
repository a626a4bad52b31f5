import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openset3d.geometry import (
    Aabb,
    PointCloud,
    RigidTransform,
    aabb,
    apply_rigid,
    farthest_point_sample,
    farthest_point_sample_batch,
    knn,
    nearest_index,
    normalize_cloud,
    random_rotation,
    rotation_angle,
)
from oracles import fps_greedy, knn_bruteforce


class TestPointCloud:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            PointCloud([[0, 0, np.nan]])

    def test_label_length(self):
        with pytest.raises(ValueError, match="labels length"):
            PointCloud(np.zeros((3, 3)), labels=[0, 1])

    def test_copy_is_deep(self):
        c = PointCloud(np.zeros((2, 3)), [0, 1])
        d = c.copy()
        d.coords[0, 0] = 5
        d.labels[0] = 9
        assert c.coords[0, 0] == 0 and c.labels[0] == 0


class TestKnn:
    def test_line(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
        assert sorted(knn(0, pts, 2)) == [0, 1]

    def test_k_equals_n(self, rng):
        pts = rng.random((30, 3))
        assert sorted(knn(4, pts, 30)) == list(range(30))

    def test_matches_bruteforce(self, rng):
        for _ in range(5):
            pts = rng.random((200, 3))
            seed = int(rng.integers(200))
            np.testing.assert_array_equal(knn(seed, pts, 17), knn_bruteforce(pts, seed, 17))

    def test_ties_resolve_to_lower_index(self):
        # points 1..4 are equidistant from the seed
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
        np.testing.assert_array_equal(knn(0, pts, 3), [0, 1, 2])

    def test_k_too_large(self, rng):
        with pytest.raises(ValueError):
            knn(0, rng.random((5, 3)), 6)

    def test_bad_seed(self, rng):
        with pytest.raises(ValueError):
            knn(5, rng.random((5, 3)), 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 10_000), st.data())
    def test_contains_seed_no_duplicates(self, n, s, data):
        pts = np.random.default_rng(s).random((n, 3))
        seed = data.draw(st.integers(0, n - 1))
        k = data.draw(st.integers(1, n))
        idx = knn(seed, pts, k)
        assert len(set(idx.tolist())) == k
        assert seed in idx or np.sum(np.all(pts == pts[seed], axis=1)) > 1


class TestFarthestPointSample:
    def test_single(self, rng):
        np.testing.assert_array_equal(farthest_point_sample(rng.random((10, 3)), 1, start_index=3), [3])

    def test_collinear(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        np.testing.assert_array_equal(farthest_point_sample(pts, 2), [0, 3])

    def test_matches_greedy_oracle(self, rng):
        pts = rng.random((100, 3))
        np.testing.assert_array_equal(farthest_point_sample(pts, 10), fps_greedy(pts, 10))

    def test_batch_matches_single(self, rng):
        pts = rng.random((4, 64, 3))
        batch = farthest_point_sample_batch(pts, 16)
        for b in range(4):
            np.testing.assert_array_equal(batch[b], farthest_point_sample(pts[b], 16))

    def test_m_too_large(self, rng):
        with pytest.raises(ValueError):
            farthest_point_sample(rng.random((5, 3)), 6)

    def test_duplicate_free_and_deterministic(self, rng):
        pts = rng.random((80, 3))
        a = farthest_point_sample(pts, 40)
        assert len(set(a.tolist())) == 40
        np.testing.assert_array_equal(a, farthest_point_sample(pts, 40))


class TestNearestIndex:
    def test_matches_bruteforce(self, rng):
        q, r = rng.random((50, 3)), rng.random((20, 3))
        expected = [int(np.argmin(((r - p) ** 2).sum(axis=1))) for p in q]
        np.testing.assert_array_equal(nearest_index(q, r), expected)

    def test_batched(self, rng):
        q, r = rng.random((3, 10, 3)), rng.random((3, 4, 3))
        out = nearest_index(q, r)
        for b in range(3):
            np.testing.assert_array_equal(out[b], nearest_index(q[b], r[b]))


class TestAabb:
    def test_single_point(self):
        box = aabb(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(box.min, [1, 2, 3])
        np.testing.assert_array_equal(box.max, [1, 2, 3])

    def test_cube_corners(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        box = aabb(corners)
        np.testing.assert_array_equal(box.min, [0, 0, 0])
        np.testing.assert_array_equal(box.max, [1, 1, 1])
        assert box.diagonal == pytest.approx(np.sqrt(3))

    def test_contains_all(self, rng):
        pts = rng.normal(size=(500, 3))
        box = aabb(pts)
        assert all(box.contains(p) for p in pts)
        assert not Aabb(np.zeros(3), np.ones(3)).contains([1.5, 0, 0])


class TestRotation:
    def test_zero_angle_identity(self, rng):
        np.testing.assert_array_equal(random_rotation(rng, 0.0), np.eye(3))

    @pytest.mark.parametrize("max_angle", [np.pi, np.pi / 2, 0.1])
    def test_valid_rotation(self, rng, max_angle):
        for _ in range(200):
            R = random_rotation(rng, max_angle)
            assert RigidTransform(R).is_valid(1e-9)
            np.testing.assert_allclose(np.linalg.norm(R, axis=0), 1.0, atol=1e-9)

    def test_bounded_angle(self, rng):
        angles = [rotation_angle(random_rotation(rng, np.pi / 2)) for _ in range(10_000)]
        assert max(angles) <= np.pi / 2 + 1e-9

    def test_uniform_mode_angle_distribution(self, rng):
        # Haar measure on SO(3): angle density (1 - cos t) / pi, mean pi/2 + 2/pi
        angles = np.array([rotation_angle(random_rotation(rng)) for _ in range(20_000)])
        mean = np.pi / 2 + 2 / np.pi
        assert abs(angles.mean() - mean) < 4 * angles.std() / np.sqrt(len(angles))

    def test_rejects_out_of_range(self, rng):
        with pytest.raises(ValueError):
            random_rotation(rng, 4.0)


class TestApplyRigid:
    def test_identity(self, rng):
        pts = rng.random((10, 3))
        np.testing.assert_array_equal(apply_rigid(pts, RigidTransform()), pts)

    def test_translation(self):
        out = apply_rigid([[0, 0, 0]], RigidTransform(np.eye(3), [1, 0, 0]))
        np.testing.assert_array_equal(out, [[1, 0, 0]])

    def test_rows_are_r_times_p_plus_t(self, rng):
        R = random_rotation(rng)
        T = rng.normal(size=3)
        pts = rng.normal(size=(5, 3))
        out = apply_rigid(pts, RigidTransform(R, T))
        for p, o in zip(pts, out):
            np.testing.assert_allclose(o, R @ p + T, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_isometry(self, s):
        rng = np.random.default_rng(s)
        pts = rng.normal(size=(40, 3)) * 3
        out = apply_rigid(pts, RigidTransform(random_rotation(rng), rng.normal(size=3) * 5))
        d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)


def test_normalize_cloud(rng):
    c = normalize_cloud(rng.normal(size=(100, 3)) * 4 + 7)
    np.testing.assert_allclose(c.mean(axis=0), 0, atol=1e-12)
    assert np.linalg.norm(c, axis=1).max() == pytest.approx(1.0)
