"""Evaluation metrics: PSNR, pose errors, and absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ShapeMismatch
from .geometry import RigidTransform

DEGENERATE_NORM = 1e-9


@dataclass
class PoseError:
    """Geodesic rotation error and translation direction error, in degrees.

    ``translation_deg`` is the angle between the raw translation directions
    (no alignment); it is NaN with ``degenerate_translation`` set when either
    translation is shorter than 1e-9.
    """

    rotation_deg: float
    translation_deg: float
    degenerate_translation: bool = False


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; +inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def pose_error(est: RigidTransform, gt: RigidTransform) -> PoseError:
    """Compare two relative poses; see :class:`PoseError` for conventions.

    Angles are evaluated as atan2(sin, cos) rather than a bare arccos of the
    clamped cosine; the two agree analytically but atan2 keeps full precision
    at 0 and 180 degrees where arccos loses half its digits.
    """
    rel = gt.rotation.T @ est.rotation
    cos_angle = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    sin_angle = 0.5 * np.linalg.norm(
        [rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]
    )
    rotation_deg = float(np.degrees(np.arctan2(sin_angle, cos_angle)))
    n_est = float(np.linalg.norm(est.translation))
    n_gt = float(np.linalg.norm(gt.translation))
    if min(n_est, n_gt) < DEGENERATE_NORM:
        return PoseError(rotation_deg, float("nan"), degenerate_translation=True)
    sin_t = float(np.linalg.norm(np.cross(est.translation, gt.translation)))
    cos_t = float(est.translation @ gt.translation)
    return PoseError(rotation_deg, float(np.degrees(np.arctan2(sin_t, cos_t))))


def align_similarity(
    source: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form least-squares similarity fitting ``s R source + t = target``."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    xs = source - mu_s
    xt = target - mu_t
    cov = xt.T @ xs / source.shape[0]
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        sign[2] = -1.0
    rotation = u @ np.diag(sign) @ vt
    var_s = float((xs**2).sum() / source.shape[0])
    scale = float(d @ sign) / var_s if var_s > 1e-18 else 1.0
    translation = mu_t - scale * rotation @ mu_s
    return scale, rotation, translation


def ate(est: np.ndarray, gt: np.ndarray) -> float:
    """RMSE between trajectories after closed-form similarity alignment.

    Both arguments are (N, 3) arrays of camera centers, N >= 2.  Scale is
    part of the alignment because self-supervised reconstructions are only
    defined up to a global similarity.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if est.shape != gt.shape:
        raise LengthMismatch(f"trajectory lengths differ: {est.shape[0]} vs {gt.shape[0]}")
    if est.shape[0] < 2:
        raise LengthMismatch("trajectories need at least 2 poses")
    scale, rotation, translation = align_similarity(est, gt)
    aligned = scale * est @ rotation.T + translation
    return float(np.sqrt(((aligned - gt) ** 2).sum(axis=1).mean()))
