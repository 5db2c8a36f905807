"""Shared scene builders and finite-difference machinery for renderer tests."""

import numpy as np

from splatgeo.gaussians import GaussianSet
from splatgeo.geometry import (
    CameraIntrinsics,
    RigidTransform,
    se3_inverse,
    so3_exp,
)
from splatgeo.rasterizer import render, render_backward


def square_camera(size=32, focal=None):
    focal = focal if focal is not None else 1.2 * size
    return CameraIntrinsics(
        fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0, width=size, height=size
    )


def random_pose(rng, rot_scale=0.15, trans_scale=0.4):
    return RigidTransform(so3_exp(rng.normal(size=3) * rot_scale), rng.normal(size=3) * trans_scale)


def random_scene(rng, n=10, size=16, z_range=(3.0, 6.0), alpha_range=(0.15, 0.85)):
    """A GaussianSet in the camera frustum plus a camera with a mild pose."""
    intrinsics = square_camera(size)
    pose = random_pose(rng)
    z = rng.uniform(*z_range, size=n)
    half_fov = 0.5 * size / intrinsics.fx
    x = rng.uniform(-0.8 * half_fov, 0.8 * half_fov, size=n) * z
    y = rng.uniform(-0.8 * half_fov, 0.8 * half_fov, size=n) * z
    centers_cam = np.stack([x, y, z], axis=1)
    gaussians = GaussianSet(
        centers=pose.apply(centers_cam),
        opacities=rng.uniform(*alpha_range, size=n),
        scales=rng.uniform(0.08, 0.35, size=(n, 3)),
        quats=rng.normal(size=(n, 4)),
        sh=np.concatenate(
            [rng.uniform(-0.8, 0.8, size=(n, 1, 3)), rng.uniform(-0.15, 0.15, size=(n, 3, 3))],
            axis=1,
        ),
    )
    return gaussians, intrinsics, se3_inverse(pose), pose


def _bbox_edge_margin(mean2d, radius, size):
    """Distance of every 3-sigma bbox edge from the nearest pixel-center crossing."""
    edges = np.concatenate(
        [
            mean2d[:, 0] - radius - 0.5,
            mean2d[:, 0] + radius - 0.5,
            mean2d[:, 1] - radius - 0.5,
            mean2d[:, 1] + radius - 0.5,
        ]
    )
    return np.abs(edges - np.round(edges)).min() if edges.size else 1.0


def gradcheck_scene(seed, size=32, max_gaussians=32):
    """Deterministically sample a scene free of renderer kinks.

    Rejects candidates whose output would be non-smooth within a finite
    difference step: bbox edges near pixel-center crossings, depth-sort
    near-ties, colors near the [0, 1] clamp, pixels near the transmittance
    early-stop, or splats near the near/far planes.
    """
    from splatgeo.rasterizer import _prepare

    for attempt in range(200):
        rng = np.random.default_rng(seed * 1009 + attempt)
        n = int(rng.integers(6, max_gaussians + 1))
        gaussians, intrinsics, t_view, pose = random_scene(rng, n=n, size=size)
        background = rng.uniform(0.1, 0.9, size=3)

        prep = _prepare(gaussians, intrinsics, t_view, 0.01, 1000.0)
        if not prep["drawn"].all():
            continue
        z = prep["mu_view"][:, 2]
        if np.any(z < 1.0) or np.any(z > 100.0):
            continue
        gaps = np.diff(np.sort(z))
        if gaps.size and gaps.min() < 1e-3:
            continue
        a, b, c = prep["cov2d"][:, 0, 0], prep["cov2d"][:, 0, 1], prep["cov2d"][:, 1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt((0.5 * (a - c)) ** 2 + b * b)
        if _bbox_edge_margin(prep["mean2d"], 3.0 * np.sqrt(lam_max), size) < 4e-3:
            continue
        raw_color = np.einsum("nic,ni->nc", gaussians.sh, prep["basis"]) + 0.5
        if raw_color.min() < 0.05 or raw_color.max() > 0.95:
            continue
        out, cache = render(gaussians, intrinsics, t_view, background, return_cache=True)
        if cache.totals["transmittance"].min() < 1.5e-2:
            continue
        return gaussians, intrinsics, t_view, pose, background
    raise RuntimeError(f"no kink-free scene found for seed {seed}")


def make_upstream(rng, intrinsics, alpha, alpha_floor=0.05):
    """Fixed random upstream weights; depth weights only where alpha is solid."""
    h, w = intrinsics.height, intrinsics.width
    u_color = rng.normal(size=(h, w, 3))
    u_alpha = rng.normal(size=(h, w))
    u_depth = rng.normal(size=(h, w)) * (alpha > alpha_floor)
    return u_color, u_alpha, u_depth


def scene_loss(gaussians, intrinsics, pose, background, upstream):
    u_color, u_alpha, u_depth = upstream
    out = render(gaussians, intrinsics, se3_inverse(pose), background)
    return float(
        (u_color * out.color).sum() + (u_alpha * out.alpha).sum() + (u_depth * out.depth).sum()
    )


def perturbed_set(gaussians, field, index, h):
    arrays = {
        "centers": gaussians.centers.copy(),
        "opacities": gaussians.opacities.copy(),
        "scales": gaussians.scales.copy(),
        "quats": gaussians.quats.copy(),
        "sh": gaussians.sh.copy(),
    }
    arrays[field].reshape(-1)[index] += h
    return GaussianSet(**arrays)


def perturbed_pose(pose, kind, axis, h):
    if kind == "translation":
        t = pose.translation.copy()
        t[axis] += h
        return RigidTransform(pose.rotation.copy(), t)
    eps = np.zeros(3)
    eps[axis] = h
    return RigidTransform(pose.rotation @ so3_exp(eps), pose.translation.copy())


def finite_difference_gradients(gaussians, intrinsics, pose, background, upstream, h=1e-4):
    """Central differences of the weighted render loss for every parameter."""

    def loss_with_set(g):
        return scene_loss(g, intrinsics, pose, background, upstream)

    fields = {"centers": 3, "opacities": 1, "scales": 3, "quats": 4, "sh": 12}
    fd = {}
    for field, per in fields.items():
        flat = np.zeros(len(gaussians) * per)
        for i in range(flat.size):
            hi = loss_with_set(perturbed_set(gaussians, field, i, h))
            lo = loss_with_set(perturbed_set(gaussians, field, i, -h))
            flat[i] = (hi - lo) / (2.0 * h)
        fd[field] = flat
    for kind in ("translation", "rotation"):
        grad = np.zeros(3)
        for axis in range(3):
            hi = scene_loss(
                gaussians, intrinsics, perturbed_pose(pose, kind, axis, h), background, upstream
            )
            lo = scene_loss(
                gaussians, intrinsics, perturbed_pose(pose, kind, axis, -h), background, upstream
            )
            grad[axis] = (hi - lo) / (2.0 * h)
        fd[kind] = grad
    return fd


def analytic_gradients(gaussians, intrinsics, pose, background, upstream):
    u_color, u_alpha, u_depth = upstream
    return render_backward(
        gaussians,
        intrinsics,
        se3_inverse(pose),
        background,
        d_color=u_color,
        d_alpha=u_alpha,
        d_depth=u_depth,
    )


def max_gradient_error(analytic, fd):
    """Worst |analytic - fd| beyond tolerance 1e-7 + 1e-4 * max(|a|, |f|)."""
    pairs = [
        (analytic.d_centers.ravel(), fd["centers"]),
        (analytic.d_opacity.ravel(), fd["opacities"]),
        (analytic.d_scales.ravel(), fd["scales"]),
        (analytic.d_orientation.ravel(), fd["quats"]),
        (analytic.d_sh.ravel(), fd["sh"]),
        (analytic.d_translation, fd["translation"]),
        (analytic.d_rotation_tangent, fd["rotation"]),
    ]
    worst = 0.0
    for a, f in pairs:
        tol = 1e-7 + 1e-4 * np.maximum(np.abs(a), np.abs(f))
        worst = max(worst, float((np.abs(a - f) / tol).max())) if a.size else worst
    return worst
