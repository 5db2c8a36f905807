"""Pixel-aligned Gaussian primitives: construction, transformation and merging.

A Gaussian carries a center, an opacity, an anisotropic scale, a unit
quaternion orientation and degree-1 spherical-harmonics color coefficients
(one DC plus three linear terms per channel).  Covariances are never stored
directly; ``covariance = R(q) diag(s^2) R(q)^T`` stays positive definite for
any valid scale/orientation pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, ShapeMismatch
from .geometry import CameraIntrinsics, RigidTransform

SH_DC = float(np.sqrt(1.0 / (4.0 * np.pi)))
SH_LINEAR = float(np.sqrt(3.0 / (4.0 * np.pi)))
# Basis permutation mapping a direction (x, y, z) to (y, z, x) inside the
# linear SH band.
SH_PERM = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])

LOG_SCALE_MIN = float(np.log(1e-4))
LOG_SCALE_MAX = float(np.log(1e2))


@dataclass
class GaussianSet:
    """A batch of N Gaussians stored as structure-of-arrays."""

    centers: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    sh: np.ndarray

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.size == 0:
            self.sh = self.sh.reshape(0, 4, 3)
        if (
            self.opacities.shape[0] != n
            or self.scales.shape[0] != n
            or self.quats.shape[0] != n
            or self.sh.shape != (n, 4, 3)
        ):
            raise ShapeMismatch("gaussian attribute arrays disagree on count")
        if n == 0:
            return
        if not (np.all(self.opacities > 0.0) and np.all(self.opacities < 1.0)):
            raise ValueError("opacities must lie strictly inside (0, 1)")
        if not np.all(self.scales > 0.0):
            raise ValueError("scales must be positive")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("quaternions must be nonzero")
        # Renormalize so the unit-norm invariant survives small perturbations.
        self.quats = self.quats / norms[:, None]

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 4, 3))
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.centers.copy(),
            self.opacities.copy(),
            self.scales.copy(),
            self.quats.copy(),
            self.sh.copy(),
        )

    def covariances(self) -> np.ndarray:
        """Return the N x 3 x 3 covariance matrices R(q) diag(s^2) R(q)^T."""
        r = quat_to_rotation(self.quats)
        return r * (self.scales**2)[:, None, :] @ np.swapaxes(r, -1, -2)


@dataclass
class RawAttributeField:
    """Per-pixel pre-activation Gaussian attributes predicted on an image grid."""

    opacity: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    sh: np.ndarray
    offsets: np.ndarray

    def __post_init__(self) -> None:
        self.opacity = np.asarray(self.opacity, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.quats = np.asarray(self.quats, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        hw = self.opacity.shape
        if len(hw) != 2:
            raise ShapeMismatch("opacity must be an H x W grid")
        if (
            self.scales.shape != hw + (3,)
            or self.quats.shape != hw + (4,)
            or self.sh.shape != hw + (4, 3)
            or self.offsets.shape != hw + (2,)
        ):
            raise ShapeMismatch("raw attribute grids disagree on H x W")
        for name in ("opacity", "scales", "quats", "sh", "offsets"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"raw {name} contains non-finite values")

    @classmethod
    def zeros(cls, height: int, width: int) -> "RawAttributeField":
        """Neutral field: alpha 0.5, unit scale, identity orientation, gray color."""
        quats = np.zeros((height, width, 4))
        quats[..., 0] = 1.0
        return cls(
            opacity=np.zeros((height, width)),
            scales=np.zeros((height, width, 3)),
            quats=quats,
            sh=np.zeros((height, width, 4, 3)),
            offsets=np.zeros((height, width, 2)),
        )


def quat_to_rotation(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions in (w, x, y, z) order."""
    q = np.asarray(quats, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def rotation_to_quat(rotation: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, canonicalized to w >= 0."""
    m = np.asarray(rotation, dtype=np.float64)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0.0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (w, x, y, z) quaternions; broadcasts over rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    single = a.ndim == 1 and b.ndim == 1
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )
    return out[0] if single else out


def unproject_pixels(
    depth: np.ndarray, offsets: np.ndarray, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Lift every pixel to a 3D point in the camera frame.

    The center of pixel ``(x, y)`` is shifted by its offset and scaled along
    its ray: ``mu = D(x, y) * K^-1 (x + 0.5 + dx, y + 0.5 + dy, 1)``.  Points
    are returned in row-major pixel order, shape (H*W, 3).

    Raises:
        NonPositiveDepth: if any depth value is <= 0.
        ShapeMismatch: if ``offsets`` does not match ``depth`` as H x W x 2.
    """
    depth = np.asarray(depth, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    h, w = depth.shape
    if offsets.shape != (h, w, 2):
        raise ShapeMismatch(f"offsets shape {offsets.shape} does not match depth {depth.shape}")
    if np.any(depth <= 0.0):
        raise NonPositiveDepth("depth map must be strictly positive")
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    p = np.stack([gx + offsets[..., 0], gy + offsets[..., 1], np.ones_like(gx)], axis=-1)
    rays = p @ intrinsics.inverse_matrix().T
    return (depth[..., None] * rays).reshape(-1, 3)


def build_gaussians(
    raw: RawAttributeField, depth: np.ndarray, intrinsics: CameraIntrinsics
) -> GaussianSet:
    """Activate a raw per-pixel attribute field into a GaussianSet.

    Activations: opacity through a sigmoid, scales through a clamped
    exponential (scene units in [1e-4, 1e2]), orientations through quaternion
    normalization, offsets through tanh (at most one pixel), SH passed
    through.  Centers come from :func:`unproject_pixels`.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != raw.opacity.shape:
        raise ShapeMismatch(
            f"depth shape {depth.shape} does not match attributes {raw.opacity.shape}"
        )
    centers = unproject_pixels(depth, np.tanh(raw.offsets), intrinsics)
    n = centers.shape[0]
    return GaussianSet(
        centers=centers,
        opacities=1.0 / (1.0 + np.exp(-raw.opacity.reshape(n))),
        scales=np.exp(np.clip(raw.scales.reshape(n, 3), LOG_SCALE_MIN, LOG_SCALE_MAX)),
        quats=raw.quats.reshape(n, 4),
        sh=raw.sh.reshape(n, 4, 3),
    )


def sh_basis(directions: np.ndarray) -> np.ndarray:
    """Degree-1 SH basis values (..., 4) for unit directions (..., 3).

    The linear band permutes the direction to (y, z, x) before scaling, so
    basis index 1 tracks y, index 2 tracks z and index 3 tracks x.
    """
    d = np.asarray(directions, dtype=np.float64)
    perm = d @ SH_PERM.T
    out = np.empty(d.shape[:-1] + (4,))
    out[..., 0] = SH_DC
    out[..., 1:] = SH_LINEAR * perm
    return out


def sh_to_color(sh: np.ndarray, r_d: np.ndarray) -> np.ndarray:
    """Evaluate degree-1 SH color toward unit view direction ``r_d``.

    Returns the rgb value ``clamp(sum_i sh[i] * Y_i(r_d) + 0.5, 0, 1)``; the
    +0.5 shift keeps a zero DC coefficient mid-gray.
    """
    sh = np.asarray(sh, dtype=np.float64)
    basis = sh_basis(r_d)
    raw = np.einsum("...ic,...i->...c", sh, basis) + 0.5
    return np.clip(raw, 0.0, 1.0)


def transform_gaussians(gaussians: GaussianSet, transform: RigidTransform) -> GaussianSet:
    """Map a GaussianSet through a rigid transform.

    Centers move as points, orientations are left-multiplied by the rotation
    quaternion, scales and opacities are unchanged.  The linear SH block is
    rotated so the color seen from any direction ``d`` after the transform
    equals the original color seen from ``R^T d``.
    """
    if len(gaussians) == 0:
        return gaussians.copy()
    r = transform.rotation
    q_r = rotation_to_quat(r)
    sh = gaussians.sh.copy()
    sh[:, 1:, :] = np.einsum("ij,njc->nic", SH_PERM @ r @ SH_PERM.T, gaussians.sh[:, 1:, :])
    return GaussianSet(
        centers=transform.apply(gaussians.centers),
        opacities=gaussians.opacities.copy(),
        scales=gaussians.scales.copy(),
        quats=quat_multiply(q_r[None, :], gaussians.quats),
        sh=sh,
    )


def merge_gaussians(a: GaussianSet, b: GaussianSet) -> GaussianSet:
    """Concatenate two GaussianSets, preserving order (a then b)."""
    return GaussianSet(
        centers=np.concatenate([a.centers, b.centers]),
        opacities=np.concatenate([a.opacities, b.opacities]),
        scales=np.concatenate([a.scales, b.scales]),
        quats=np.concatenate([a.quats, b.quats]),
        sh=np.concatenate([a.sh, b.sh]),
    )


@dataclass
class GaussianGradients:
    """Per-field gradients of a scalar loss with respect to a GaussianSet."""

    centers: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros(cls, count: int) -> "GaussianGradients":
        return cls(
            centers=np.zeros((count, 3)),
            opacities=np.zeros(count),
            scales=np.zeros((count, 3)),
            quats=np.zeros((count, 4)),
            sh=np.zeros((count, 4, 3)),
        )

    def accumulate(self, other: "GaussianGradients", scale: float = 1.0) -> None:
        self.centers += scale * other.centers
        self.opacities += scale * other.opacities
        self.scales += scale * other.scales
        self.quats += scale * other.quats
        self.sh += scale * other.sh


def _quat_left_matrix(q: np.ndarray) -> np.ndarray:
    # Matrix form of the Hamilton product: quat_multiply(q, b) = L(q) @ b.
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def transform_gaussians_backward(
    gaussians: GaussianSet, transform: RigidTransform, d_out: GaussianGradients
) -> tuple[GaussianGradients, np.ndarray, np.ndarray]:
    """Pull gradients on ``transform_gaussians(gaussians, transform)`` back.

    Returns gradients with respect to the input set plus raw gradients with
    respect to the rotation entries and the translation.  The quaternion
    path reports its rotation dependence through equivalent raw entries:
    valid once chained into any on-manifold parameterization (se3_exp),
    where only tangent components of ``d_rotation`` survive.
    """
    r = transform.rotation
    q_r = rotation_to_quat(r)
    d_in = GaussianGradients(
        centers=d_out.centers @ r,
        opacities=d_out.opacities.copy(),
        scales=d_out.scales.copy(),
        quats=d_out.quats @ _quat_left_matrix(q_r),
        sh=d_out.sh.copy(),
    )
    d_translation = d_out.centers.sum(axis=0)
    d_rotation = d_out.centers.T @ gaussians.centers

    m = SH_PERM @ r @ SH_PERM.T
    d_in.sh[:, 1:, :] = np.einsum("ij,nic->njc", m, d_out.sh[:, 1:, :])
    d_m = np.einsum("nic,njc->ij", d_out.sh[:, 1:, :], gaussians.sh[:, 1:, :])
    d_rotation += SH_PERM.T @ d_m @ SH_PERM

    # Orientation path: for a right perturbation R exp(skew(eps)) the composed
    # quaternion moves by q_r * (0.5 eps) * q, giving the tangent gradient g;
    # 0.5 R skew(g) reproduces g against every tangent direction R skew(e).
    g_tangent = np.zeros(3)
    for axis in range(3):
        half = np.zeros(4)
        half[1 + axis] = 0.5
        delta = quat_multiply(quat_multiply(q_r, half)[None, :], gaussians.quats)
        g_tangent[axis] = float(np.sum(d_out.quats * delta))
    d_rotation += 0.5 * r @ np.array(
        [
            [0.0, -g_tangent[2], g_tangent[1]],
            [g_tangent[2], 0.0, -g_tangent[0]],
            [-g_tangent[1], g_tangent[0], 0.0],
        ]
    )
    return d_in, d_rotation, d_translation


def build_gaussians_backward(
    raw: RawAttributeField,
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    d_out: GaussianGradients,
) -> tuple[RawAttributeField, np.ndarray]:
    """Pull gradients on ``build_gaussians(raw, depth, intrinsics)`` back.

    Returns the gradients with respect to every raw pre-activation grid
    (packed in a RawAttributeField of matching shapes) and with respect to
    the depth map.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    n = h * w
    alpha = 1.0 / (1.0 + np.exp(-raw.opacity.reshape(n)))
    d_raw_opacity = d_out.opacities * alpha * (1.0 - alpha)

    raw_scales = raw.scales.reshape(n, 3)
    scales = np.exp(np.clip(raw_scales, LOG_SCALE_MIN, LOG_SCALE_MAX))
    in_range = (raw_scales > LOG_SCALE_MIN) & (raw_scales < LOG_SCALE_MAX)
    d_raw_scales = d_out.scales * scales * in_range

    raw_quats = raw.quats.reshape(n, 4)
    norms = np.linalg.norm(raw_quats, axis=1, keepdims=True)
    unit = raw_quats / norms
    d_raw_quats = (d_out.quats - (d_out.quats * unit).sum(axis=1, keepdims=True) * unit) / norms

    # Centers: mu = D * Kinv (px + tanh(dx), py + tanh(dy), 1).
    tanh_off = np.tanh(raw.offsets)
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    p = np.stack([gx + tanh_off[..., 0], gy + tanh_off[..., 1], np.ones_like(gx)], axis=-1)
    k_inv = intrinsics.inverse_matrix()
    rays = p @ k_inv.T
    d_centers = d_out.centers.reshape(h, w, 3)
    d_depth = (d_centers * rays).sum(axis=-1)
    d_p = depth[..., None] * (d_centers @ k_inv)
    d_raw_offsets = d_p[..., :2] * (1.0 - tanh_off**2)

    d_raw = RawAttributeField(
        opacity=d_raw_opacity.reshape(h, w),
        scales=d_raw_scales.reshape(h, w, 3),
        quats=d_raw_quats.reshape(h, w, 4),
        sh=d_out.sh.reshape(h, w, 4, 3).copy(),
        offsets=d_raw_offsets,
    )
    return d_raw, d_depth
