import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatgeo.errors import ZeroBaseline
from splatgeo.geometry import (
    CameraIntrinsics,
    RigidTransform,
    Twist,
    epipolar_line,
    plucker_embedding,
    ray_embedding,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    so3_exp,
    so3_log,
)

finite_coord = st.floats(-10.0, 10.0, allow_nan=False)
vec3 = st.tuples(finite_coord, finite_coord, finite_coord).map(np.array)


def random_rotation(rng):
    return Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()


def test_intrinsics_matrix_round_trip():
    k = CameraIntrinsics(fx=100.0, fy=120.0, cx=31.5, cy=23.5, width=64, height=48)
    assert np.allclose(k.inverse_matrix() @ k.matrix(), np.eye(3), atol=1e-12)


def test_rigid_transform_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) + 1e-6, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_so3_exp_matches_scipy(rng):
    for _ in range(50):
        w = rng.normal(size=3) * rng.uniform(1e-10, 3.0)
        expected = Rotation.from_rotvec(w).as_matrix()
        assert np.allclose(so3_exp(w), expected, atol=1e-12)


def test_so3_log_matches_scipy(rng):
    for _ in range(50):
        r = random_rotation(rng)
        expected = Rotation.from_matrix(r).as_rotvec()
        assert np.allclose(so3_log(r), expected, atol=1e-8)


def test_so3_log_near_pi():
    for axis in (np.array([1.0, 0, 0]), np.array([0.6, -0.8, 0.0]), np.array([1, 1, 1]) / np.sqrt(3)):
        w = axis * (np.pi - 1e-9)
        r = so3_exp(w)
        assert np.allclose(so3_exp(so3_log(r)), r, atol=1e-6)


def test_se3_exp_small_angle_is_translation():
    t = se3_exp(Twist(np.zeros(3), np.array([1.0, -2.0, 3.0])))
    assert np.allclose(t.rotation, np.eye(3))
    assert np.allclose(t.translation, [1.0, -2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(w=vec3, v=vec3)
def test_se3_exp_log_round_trip(w, v):
    theta = np.linalg.norm(w)
    if theta > np.pi - 1e-3:
        w = w * (np.pi - 1e-3) / theta
    tw = se3_exp(Twist(w, v))
    back = se3_log(tw)
    assert np.allclose(back.omega, w, atol=1e-7)
    assert np.allclose(back.v, v, atol=1e-6)


def test_se3_compose_matches_matrix_product(rng):
    for _ in range(20):
        a = RigidTransform(random_rotation(rng), rng.normal(size=3))
        b = RigidTransform(random_rotation(rng), rng.normal(size=3))
        c = se3_compose(a, b)
        assert np.allclose(c.matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_se3_inverse_is_group_inverse(rng):
    for _ in range(20):
        a = RigidTransform(random_rotation(rng), rng.normal(size=3))
        ident = se3_compose(a, se3_inverse(a))
        assert np.allclose(ident.matrix(), np.eye(4), atol=1e-12)


def test_se3_compose_long_chain_stays_orthonormal(rng):
    t = RigidTransform.identity()
    for _ in range(2000):
        t = se3_compose(t, RigidTransform(random_rotation(rng), rng.normal(size=3)))
    assert np.abs(t.rotation.T @ t.rotation - np.eye(3)).max() < 1e-12


def test_ray_embedding_uses_pixel_centers():
    k = CameraIntrinsics(fx=50.0, fy=60.0, cx=8.0, cy=6.0, width=16, height=12)
    rays = ray_embedding(k)
    assert rays.shape == (12, 16, 3)
    x, y = 3, 7
    expected = k.inverse_matrix() @ np.array([x + 0.5, y + 0.5, 1.0])
    assert np.allclose(rays[y, x], expected, atol=1e-14)
    # Ray through the principal point is the optical axis.
    assert np.allclose(rays[5, 7] + rays[6, 8], 2 * np.array([0, 0, 1.0]), atol=1e-12)


def test_plucker_embedding_invariants(rng):
    k = CameraIntrinsics(fx=40.0, fy=40.0, cx=8.0, cy=8.0, width=16, height=16)
    for _ in range(5):
        pose = RigidTransform(random_rotation(rng), rng.normal(size=3))
        field = plucker_embedding(k, pose)
        d, m = field[..., :3], field[..., 3:]
        assert np.abs(np.linalg.norm(d, axis=-1) - 1.0).max() < 1e-9
        assert np.abs((d * m).sum(axis=-1)).max() < 1e-9
        assert np.allclose(m, np.cross(np.broadcast_to(pose.translation, d.shape), d), atol=1e-12)


def test_plucker_identity_pose_has_zero_moment():
    k = CameraIntrinsics(fx=40.0, fy=40.0, cx=8.0, cy=8.0, width=16, height=16)
    field = plucker_embedding(k, RigidTransform.identity())
    assert np.abs(field[..., 3:]).max() == 0.0


def test_epipolar_line_contains_projection(rng):
    k = CameraIntrinsics(fx=80.0, fy=80.0, cx=16.0, cy=16.0, width=32, height=32)
    km = k.matrix()
    for _ in range(20):
        # A point visible in a source camera at the origin and a displaced target.
        rel = RigidTransform(
            Rotation.from_rotvec(rng.normal(size=3) * 0.1).as_matrix(), rng.normal(size=3)
        )
        point = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(4.0, 9.0)])
        p_src = km @ point
        p_src = p_src[:2] / p_src[2] - 0.5
        q = rel.apply(point)
        if q[2] < 0.5:
            continue
        p_tgt = km @ q
        p_tgt = p_tgt[:2] / p_tgt[2]
        line = epipolar_line(k, rel, p_src)
        assert np.hypot(line[0], line[1]) == pytest.approx(1.0)
        residual = line @ np.array([p_tgt[0], p_tgt[1], 1.0])
        assert abs(residual) < 1e-9


def test_epipolar_line_zero_baseline_raises():
    k = CameraIntrinsics(fx=80.0, fy=80.0, cx=16.0, cy=16.0, width=32, height=32)
    rel = RigidTransform(Rotation.from_rotvec([0.1, 0, 0]).as_matrix(), np.zeros(3))
    with pytest.raises(ZeroBaseline):
        epipolar_line(k, rel, np.array([4.0, 4.0]))
