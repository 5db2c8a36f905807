"""Camera models, rigid transforms and pixel-ray embeddings.

Conventions used throughout the package:

* Poses are camera-to-world: ``x_world = R @ x_cam + t``.  The world-to-camera
  (view) transform of a pose is its inverse.
* Rotations are stored as 3x3 matrices; axis-angle twists are only used as
  optimization variables and are mapped to transforms through :func:`se3_exp`.
* A pixel with integer coordinates ``(x, y)`` corresponds to the ray through
  the point ``(x + 0.5, y + 0.5)`` on the image plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroBaseline

_ORTHO_TOL = 1e-9
_COMPOSE_DRIFT_TOL = 1e-12
_SMALL_ANGLE = 1e-8


@dataclass
class CameraIntrinsics:
    """Pinhole camera intrinsics for an image of ``width`` x ``height`` pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        """Return the 3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        """Return K^-1 in closed form."""
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class RigidTransform:
    """An SE(3) element with rotation ``R`` (3x3) and translation ``t`` (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ValueError(
                f"translation must have shape (3,), got {self.translation.shape}"
            )
        err = self.rotation.T @ self.rotation - np.eye(3)
        if np.abs(err).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0.0:
            raise ValueError("rotation is a reflection")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass
class Twist:
    """se(3) tangent vector: rotational part ``omega`` and linear part ``v``."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)


def skew(w: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of ``w``."""
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def vee(m: np.ndarray) -> np.ndarray:
    """Extract the axis vector from the antisymmetric part of ``m``."""
    return 0.5 * np.array(
        [m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]
    )


def _rotation_coeffs(theta: float) -> tuple[float, float, float]:
    # Returns (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3).  The closed
    # forms cancel catastrophically for small t, so switch to series well
    # above the float64 noise floor.
    if theta < 1e-3:
        t2 = theta * theta
        t4 = t2 * t2
        return (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / (theta * theta), (theta - s) / theta**3


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula: map an axis-angle vector to a rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rotation_coeffs(theta)
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp`; returns an axis-angle vector with angle in [0, pi]."""
    cos_theta = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < _SMALL_ANGLE:
        return vee(rotation)
    if theta > np.pi - 1e-6:
        # Near pi the antisymmetric part degenerates; recover the axis from
        # the symmetric part (R + R^T)/2 = cos t I + (1 - cos t) a a^T instead.
        outer = ((rotation + rotation.T) / 2.0 - cos_theta * np.eye(3)) / (
            1.0 - cos_theta
        )
        axis = np.sqrt(np.clip(np.diag(outer), 0.0, None))
        # Fix relative signs against the largest component via the outer product.
        k = int(np.argmax(axis))
        for i in range(3):
            if i != k and outer[k, i] < 0.0:
                axis[i] = -axis[i]
        axis /= np.linalg.norm(axis)
        # Orient along the antisymmetric part when it is nonzero.
        if np.dot(vee(rotation), axis) < 0.0:
            axis = -axis
        return theta * axis
    return theta / np.sin(theta) * vee(rotation)


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    _, b, c = _rotation_coeffs(theta)
    k = skew(omega)
    return np.eye(3) + b * k + c * (k @ k)


def se3_exp(twist: Twist) -> RigidTransform:
    """Exponential map from a twist to a rigid transform.

    The rotation follows the Rodrigues formula and the translation is
    ``V(omega) @ v``; both switch to series expansions for rotation angles
    below 1e-8 radians.
    """
    rotation = so3_exp(twist.omega)
    translation = _v_matrix(twist.omega) @ twist.v
    return RigidTransform(rotation, translation)


def se3_log(transform: RigidTransform) -> Twist:
    """Inverse of :func:`se3_exp`."""
    omega = so3_log(transform.rotation)
    v = np.linalg.solve(_v_matrix(omega), transform.translation)
    return Twist(omega, v)


def _rotation_partial(omega: np.ndarray, rotation: np.ndarray, axis: int) -> np.ndarray:
    # dR/d omega_axis for R = so3_exp(omega).
    theta2 = float(omega @ omega)
    e = np.zeros(3)
    e[axis] = 1.0
    if theta2 < _SMALL_ANGLE**2:
        ke = skew(e)
        kw = skew(omega)
        return ke + 0.5 * (ke @ kw + kw @ ke)
    cross = np.cross(omega, (np.eye(3) - rotation) @ e)
    return (omega[axis] * skew(omega) + skew(cross)) / theta2 @ rotation


def _v_coeff_slopes(theta: float) -> tuple[float, float]:
    # Returns (b'(t)/t, c'(t)/t) for b = (1 - cos t)/t^2, c = (t - sin t)/t^3.
    # The closed forms lose all digits below t ~ 1e-4; series there.
    if theta < 1e-2:
        t2 = theta * theta
        return -1.0 / 12.0 + t2 / 180.0, -1.0 / 60.0 + t2 / 1260.0
    s, c = np.sin(theta), np.cos(theta)
    db = (theta * s - 2.0 * (1.0 - c)) / theta**3
    dc = (theta * (1.0 - c) - 3.0 * (theta - s)) / theta**4
    return db / theta, dc / theta


def se3_exp_backward(twist: Twist, d_rotation: np.ndarray, d_translation: np.ndarray) -> Twist:
    """Pull raw gradients on ``se3_exp(twist)`` back to the twist.

    ``d_rotation`` and ``d_translation`` are gradients with respect to the
    entries of the resulting rotation matrix and translation vector; the
    return value holds the gradients with respect to ``omega`` and ``v``.
    """
    omega = twist.omega
    theta = float(np.linalg.norm(omega))
    rotation = so3_exp(omega)
    _, b, c = _rotation_coeffs(theta)
    db_t, dc_t = _v_coeff_slopes(theta)
    k = skew(omega)
    k2 = k @ k
    d_omega = np.zeros(3)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = 1.0
        ke = skew(e)
        dv_mat = (
            db_t * omega[axis] * k
            + b * ke
            + dc_t * omega[axis] * k2
            + c * (ke @ k + k @ ke)
        )
        d_omega[axis] = float(
            np.sum(d_rotation * _rotation_partial(omega, rotation, axis))
            + d_translation @ (dv_mat @ twist.v)
        )
    d_v = _v_matrix(omega).T @ np.asarray(d_translation, dtype=np.float64)
    return Twist(d_omega, d_v)


def se3_compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform applying ``b`` first and then ``a``."""
    rotation = a.rotation @ b.rotation
    drift = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if drift > _COMPOSE_DRIFT_TOL:
        # Project back onto SO(3) so long composition chains stay valid.
        u, _, vt = np.linalg.svd(rotation)
        rotation = u @ vt
        if np.linalg.det(rotation) < 0.0:
            rotation = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return RigidTransform(rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(transform: RigidTransform) -> RigidTransform:
    """Return the inverse transform (R^T, -R^T t)."""
    rt = transform.rotation.T
    return RigidTransform(rt, -rt @ transform.translation)


def _pixel_grid(intrinsics: CameraIntrinsics) -> np.ndarray:
    xs = np.arange(intrinsics.width, dtype=np.float64) + 0.5
    ys = np.arange(intrinsics.height, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


def ray_embedding(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera-frame ray directions, shape (H, W, 3).

    The entry at ``[y, x]`` is ``K^-1 @ (x + 0.5, y + 0.5, 1)``, i.e. the
    unnormalized viewing ray through the pixel center.
    """
    return _pixel_grid(intrinsics) @ intrinsics.inverse_matrix().T


def plucker_embedding(
    intrinsics: CameraIntrinsics, pose: RigidTransform
) -> np.ndarray:
    """Per-pixel Plucker ray coordinates in the frame ``pose`` maps into.

    Each ray is ``(d, m)`` with unit direction ``d = normalize(R @ K^-1 p)``,
    origin ``o = t`` (the camera center expressed in the reference frame) and
    moment ``m = o x d``.  Output shape is (H, W, 6).
    """
    rays = ray_embedding(intrinsics) @ pose.rotation.T
    d = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(pose.translation, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def epipolar_line(
    intrinsics: CameraIntrinsics, relative: RigidTransform, pixel: np.ndarray
) -> np.ndarray:
    """Epipolar line in the target image of a source-image pixel.

    ``relative`` maps source-camera coordinates to target-camera coordinates.
    The line ``l = F p`` uses the fundamental matrix ``F = K^-T [t]x R K^-1``
    and is scaled so its normal part ``(l0, l1)`` has unit norm, making
    ``l . (x', y', 1)`` a signed pixel distance.

    Raises:
        ZeroBaseline: if the relative translation is (numerically) zero.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    if np.linalg.norm(relative.translation) < 1e-12:
        raise ZeroBaseline("epipolar geometry undefined for zero baseline")
    k_inv = intrinsics.inverse_matrix()
    fundamental = k_inv.T @ skew(relative.translation) @ relative.rotation @ k_inv
    p_h = np.array([pixel[0] + 0.5, pixel[1] + 0.5, 1.0])
    line = fundamental @ p_h
    norm = float(np.hypot(line[0], line[1]))
    if norm < 1e-15:
        raise ZeroBaseline("epipolar line is degenerate for this pixel")
    return line / norm
