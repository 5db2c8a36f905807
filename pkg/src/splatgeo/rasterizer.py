"""Deterministic alpha-compositing splat renderer with analytic gradients.

The forward pass projects every Gaussian to an image-plane splat (EWA affine
approximation plus a 0.3-pixel low-pass), sorts splats globally by view depth
(ties broken by index) and composites front to back, per pixel, strictly
sequentially.  The backward pass replays the composition in reverse using
cached per-contribution state, so gradients are exact for the function the
forward pass actually computed.

Pose gradients are taken with respect to the camera-to-world pose
``(R_cam, t_cam) = T_view^-1``: the loss depends on ``t_cam`` only through
the differences ``mu_j - t_cam``, which makes ``d_translation`` exactly the
negated sum of the per-Gaussian center gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import StateMismatch
from .gaussians import SH_LINEAR, SH_PERM, GaussianSet, quat_to_rotation, sh_basis
from .geometry import CameraIntrinsics, RigidTransform

DEFAULT_NEAR = 0.01
DEFAULT_FAR = 1000.0
DEFAULT_STOP_TRANSMITTANCE = 1e-4
COV2D_BLUR = 0.3
DEPTH_WEIGHT_FLOOR = 1e-8


@dataclass
class Splat2D:
    """A Gaussian projected to the image plane."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderOutput:
    """Composited color, accumulated alpha and alpha-weighted expected depth."""

    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


@dataclass
class RenderGradients:
    """Analytic gradients of a scalar loss through :func:`render`.

    Pose gradients refer to the camera-to-world pose; ``d_rotation`` is the
    raw 3x3 gradient and ``d_rotation_tangent`` its projection onto the
    SO(3) tangent under right-multiplied perturbations
    ``R_cam @ exp(skew(eps))``.
    """

    d_centers: np.ndarray
    d_opacity: np.ndarray
    d_scales: np.ndarray
    d_orientation: np.ndarray
    d_sh: np.ndarray
    d_translation: np.ndarray
    d_rotation: np.ndarray
    d_rotation_tangent: np.ndarray


@dataclass
class RenderCache:
    """Forward-pass state retained for the exact backward replay."""

    inputs: dict = field(default_factory=dict)
    prep: dict = field(default_factory=dict)
    pairs: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)


def _prepare(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    t_view: RigidTransform,
    near: float,
    far: float,
) -> dict:
    n = len(gaussians)
    r_v, t_v = t_view.rotation, t_view.translation
    campos = -r_v.T @ t_v
    mu_view = gaussians.centers @ r_v.T + t_v
    x, y, z = mu_view[:, 0], mu_view[:, 1], mu_view[:, 2]
    valid = (z > near) & (z <= far)
    z_safe = np.where(valid, z, 1.0)

    fx, fy = intrinsics.fx, intrinsics.fy
    mean2d = np.stack([fx * x / z_safe + intrinsics.cx, fy * y / z_safe + intrinsics.cy], axis=1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z_safe
    jac[:, 1, 1] = fy / z_safe
    jac[:, 0, 2] = -fx * x / z_safe**2
    jac[:, 1, 2] = -fy * y / z_safe**2

    rot_q = quat_to_rotation(gaussians.quats).reshape(n, 3, 3)
    sigma = rot_q * (gaussians.scales**2)[:, None, :] @ np.swapaxes(rot_q, -1, -2)
    m = jac @ r_v
    cov2d = m @ sigma @ np.swapaxes(m, -1, -2)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    inv_cov = np.stack([c / det, -b / det, a / det], axis=1)

    diff = gaussians.centers - campos
    r_norm = np.linalg.norm(diff, axis=1)
    r_norm = np.where(r_norm < 1e-12, 1.0, r_norm)
    r_d = diff / r_norm[:, None]
    basis = sh_basis(r_d)
    raw_color = np.einsum("nic,ni->nc", gaussians.sh, basis) + 0.5
    unclamped = (raw_color > 0.0) & (raw_color < 1.0)
    color = np.clip(raw_color, 0.0, 1.0)

    # 3-sigma extent from the largest eigenvalue of cov2d.
    half = 0.5 * (a + c)
    lam_max = half + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    # Pixel centers (ix + 0.5) falling inside [mean - radius, mean + radius].
    x0 = np.maximum(np.ceil(mean2d[:, 0] - radius - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radius - 0.5), intrinsics.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - radius - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radius - 0.5), intrinsics.height - 1).astype(np.int64)
    onscreen = (x0 <= x1) & (y0 <= y1)
    drawn = valid & onscreen

    # Stable sort keeps index order among equal depths.
    order = np.argsort(z, kind="stable")
    order = order[drawn[order]]

    return {
        "r_v": r_v,
        "t_v": t_v,
        "campos": campos,
        "mu_view": mu_view,
        "valid": valid,
        "drawn": drawn,
        "mean2d": mean2d,
        "jac": jac,
        "rot_q": rot_q,
        "sigma": sigma,
        "m": m,
        "cov2d": cov2d,
        "inv_cov": inv_cov,
        "r_d": r_d,
        "r_norm": r_norm,
        "basis": basis,
        "unclamped": unclamped,
        "color": color,
        "bbox": (x0, x1, y0, y1),
        "order": order,
    }


@njit(cache=True)
def _fill_pairs(order, x0, x1, y0, y1, width, offsets, pair_pixel, pair_splat):
    for k in range(order.shape[0]):
        s = order[k]
        pos = offsets[k]
        for py in range(y0[s], y1[s] + 1):
            base = py * width
            for px in range(x0[s], x1[s] + 1):
                pair_pixel[pos] = base + px
                pair_splat[pos] = s
                pos += 1


@njit(cache=True)
def _forward_kernel(
    pair_pixel,
    pair_splat,
    mean2d,
    inv_cov,
    opacity,
    color,
    depth,
    width,
    stop_t,
    out_color,
    out_weight,
    out_wdepth,
    transmittance,
    pair_w,
    pair_t,
    processed,
):
    for p in range(pair_pixel.shape[0]):
        q = pair_pixel[p]
        t_q = transmittance[q]
        if t_q < stop_t:
            continue
        s = pair_splat[p]
        dx = (q % width) + 0.5 - mean2d[s, 0]
        dy = (q // width) + 0.5 - mean2d[s, 1]
        power = -0.5 * (inv_cov[s, 0] * dx * dx + inv_cov[s, 2] * dy * dy) - inv_cov[s, 1] * dx * dy
        w = opacity[s] * np.exp(power)
        tw = w * t_q
        out_color[q, 0] += color[s, 0] * tw
        out_color[q, 1] += color[s, 1] * tw
        out_color[q, 2] += color[s, 2] * tw
        out_weight[q] += tw
        out_wdepth[q] += tw * depth[s]
        transmittance[q] = t_q * (1.0 - w)
        pair_w[p] = w
        pair_t[p] = t_q
        processed[p] = True


@njit(cache=True)
def _backward_kernel(
    pair_pixel,
    pair_splat,
    pair_w,
    pair_t,
    processed,
    mean2d,
    inv_cov,
    opacity,
    color,
    depth,
    width,
    g_color,
    g_weight,
    g_wdepth,
    bg_dot,
    transmittance,
    d_alpha,
    d_mean2d,
    d_invcov,
    d_color,
    d_depth,
    suffix_color,
    suffix_w,
    suffix_wz,
):
    for p in range(pair_pixel.shape[0] - 1, -1, -1):
        if not processed[p]:
            continue
        q = pair_pixel[p]
        s = pair_splat[p]
        w = pair_w[p]
        t_q = pair_t[p]
        tw = w * t_q
        gc0 = g_color[q, 0]
        gc1 = g_color[q, 1]
        gc2 = g_color[q, 2]
        own = (
            gc0 * color[s, 0]
            + gc1 * color[s, 1]
            + gc2 * color[s, 2]
            + g_weight[q]
            + g_wdepth[q] * depth[s]
        )
        later = (
            gc0 * suffix_color[q, 0]
            + gc1 * suffix_color[q, 1]
            + gc2 * suffix_color[q, 2]
            + g_weight[q] * suffix_w[q]
            + g_wdepth[q] * suffix_wz[q]
            + bg_dot[q] * transmittance[q]
        )
        dl_dw = t_q * own - later / (1.0 - w)

        d_alpha[s] += dl_dw * (w / opacity[s])
        dl_dpower = dl_dw * w
        dx = (q % width) + 0.5 - mean2d[s, 0]
        dy = (q // width) + 0.5 - mean2d[s, 1]
        gx = inv_cov[s, 0] * dx + inv_cov[s, 1] * dy
        gy = inv_cov[s, 2] * dy + inv_cov[s, 1] * dx
        d_mean2d[s, 0] += dl_dpower * gx
        d_mean2d[s, 1] += dl_dpower * gy
        d_invcov[s, 0] += dl_dpower * (-0.5 * dx * dx)
        d_invcov[s, 1] += dl_dpower * (-dx * dy)
        d_invcov[s, 2] += dl_dpower * (-0.5 * dy * dy)
        d_color[s, 0] += gc0 * tw
        d_color[s, 1] += gc1 * tw
        d_color[s, 2] += gc2 * tw
        d_depth[s] += g_wdepth[q] * tw

        suffix_color[q, 0] += color[s, 0] * tw
        suffix_color[q, 1] += color[s, 1] * tw
        suffix_color[q, 2] += color[s, 2] * tw
        suffix_w[q] += tw
        suffix_wz[q] += tw * depth[s]


def project_gaussian(
    gaussians: GaussianSet,
    index: int,
    intrinsics: CameraIntrinsics,
    t_view: RigidTransform,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> Splat2D | None:
    """Project one Gaussian of a set to a 2D splat.

    Returns None when the Gaussian is culled: behind the near plane, beyond
    the far plane, or with its 3-sigma footprint entirely off screen.
    """
    prep = _prepare(gaussians, intrinsics, t_view, near, far)
    if not prep["drawn"][index]:
        return None
    return Splat2D(
        mean2d=prep["mean2d"][index].copy(),
        cov2d=prep["cov2d"][index].copy(),
        view_depth=float(prep["mu_view"][index, 2]),
        color=prep["color"][index].copy(),
        opacity=float(gaussians.opacities[index]),
    )


def _run_forward(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    t_view: RigidTransform,
    background: np.ndarray,
    near: float,
    far: float,
    stop_transmittance: float,
) -> tuple[RenderOutput, RenderCache]:
    h, w = intrinsics.height, intrinsics.width
    prep = _prepare(gaussians, intrinsics, t_view, near, far)
    order = prep["order"]
    x0, x1, y0, y1 = prep["bbox"]

    counts = (x1[order] - x0[order] + 1) * (y1[order] - y0[order] + 1)
    offsets = np.zeros(order.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    pair_pixel = np.empty(total, dtype=np.int64)
    pair_splat = np.empty(total, dtype=np.int64)
    if total:
        _fill_pairs(order, x0, x1, y0, y1, w, offsets[:-1], pair_pixel, pair_splat)

    out_color = np.zeros((h * w, 3))
    out_weight = np.zeros(h * w)
    out_wdepth = np.zeros(h * w)
    transmittance = np.ones(h * w)
    pair_w = np.zeros(total)
    pair_t = np.zeros(total)
    processed = np.zeros(total, dtype=np.bool_)
    if total:
        _forward_kernel(
            pair_pixel,
            pair_splat,
            prep["mean2d"],
            prep["inv_cov"],
            gaussians.opacities,
            prep["color"],
            prep["mu_view"][:, 2].copy(),
            w,
            stop_transmittance,
            out_color,
            out_weight,
            out_wdepth,
            transmittance,
            pair_w,
            pair_t,
            processed,
        )

    color = (out_color + transmittance[:, None] * background[None, :]).reshape(h, w, 3)
    alpha = out_weight.reshape(h, w)
    depth = (out_wdepth / np.maximum(out_weight, DEPTH_WEIGHT_FLOOR)).reshape(h, w)
    output = RenderOutput(color=color, alpha=alpha, depth=depth)

    cache = RenderCache(
        inputs={
            "centers": gaussians.centers.copy(),
            "opacities": gaussians.opacities.copy(),
            "scales": gaussians.scales.copy(),
            "quats": gaussians.quats.copy(),
            "sh": gaussians.sh.copy(),
            "intrinsics": (
                intrinsics.fx,
                intrinsics.fy,
                intrinsics.cx,
                intrinsics.cy,
                intrinsics.width,
                intrinsics.height,
            ),
            "rotation": t_view.rotation.copy(),
            "translation": t_view.translation.copy(),
            "background": np.asarray(background, dtype=np.float64).copy(),
            "near": near,
            "far": far,
            "stop": stop_transmittance,
        },
        prep=prep,
        pairs={
            "pixel": pair_pixel,
            "splat": pair_splat,
            "w": pair_w,
            "t": pair_t,
            "processed": processed,
        },
        totals={
            "weight": out_weight,
            "wdepth": out_wdepth,
            "transmittance": transmittance,
        },
    )
    return output, cache


def render(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    t_view: RigidTransform,
    background: np.ndarray,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    stop_transmittance: float = DEFAULT_STOP_TRANSMITTANCE,
    return_cache: bool = False,
):
    """Render a GaussianSet through a world-to-camera view transform.

    Composites splats front to back with per-splat weight
    ``w = alpha * exp(-0.5 d^T cov2d^-1 d)``, stopping a pixel once its
    transmittance drops below ``stop_transmittance``.  Remaining
    transmittance is filled with ``background``.  The depth channel is the
    alpha-weighted expected view depth.

    Returns the RenderOutput, or ``(RenderOutput, RenderCache)`` when
    ``return_cache`` is set.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    output, cache = _run_forward(
        gaussians, intrinsics, t_view, background, near, far, stop_transmittance
    )
    if return_cache:
        return output, cache
    return output


def _check_cache(
    cache: RenderCache,
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    t_view: RigidTransform,
    background: np.ndarray,
    near: float,
    far: float,
    stop_transmittance: float,
) -> None:
    ins = cache.inputs
    same = (
        np.array_equal(ins["centers"], gaussians.centers)
        and np.array_equal(ins["opacities"], gaussians.opacities)
        and np.array_equal(ins["scales"], gaussians.scales)
        and np.array_equal(ins["quats"], gaussians.quats)
        and np.array_equal(ins["sh"], gaussians.sh)
        and ins["intrinsics"]
        == (
            intrinsics.fx,
            intrinsics.fy,
            intrinsics.cx,
            intrinsics.cy,
            intrinsics.width,
            intrinsics.height,
        )
        and np.array_equal(ins["rotation"], t_view.rotation)
        and np.array_equal(ins["translation"], t_view.translation)
        and np.array_equal(ins["background"], background)
        and ins["near"] == near
        and ins["far"] == far
        and ins["stop"] == stop_transmittance
    )
    if not same:
        raise StateMismatch("cached forward state does not match the inputs")


def render_backward(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    t_view: RigidTransform,
    background: np.ndarray,
    d_color: np.ndarray | None = None,
    d_alpha: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    cache: RenderCache | None = None,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    stop_transmittance: float = DEFAULT_STOP_TRANSMITTANCE,
) -> RenderGradients:
    """Reverse-mode gradients of ``sum(upstream * render(...))``.

    ``d_color``, ``d_alpha`` and ``d_depth`` are the upstream gradients with
    respect to the corresponding RenderOutput fields (missing ones are
    treated as zero).  If ``cache`` is omitted, the forward pass is
    recomputed; a supplied cache is validated against the inputs.

    Raises:
        StateMismatch: if ``cache`` was produced from different inputs.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    if cache is None:
        _, cache = _run_forward(
            gaussians, intrinsics, t_view, background, near, far, stop_transmittance
        )
    else:
        _check_cache(
            cache, gaussians, intrinsics, t_view, background, near, far, stop_transmittance
        )

    h, w = intrinsics.height, intrinsics.width
    n = len(gaussians)
    hw = h * w
    g_color = (
        np.zeros((hw, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64).reshape(hw, 3)
    )
    g_alpha = (
        np.zeros(hw) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64).reshape(hw)
    )
    g_depth_up = (
        np.zeros(hw) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(hw)
    )

    weight = cache.totals["weight"]
    wdepth = cache.totals["wdepth"]
    denom = np.maximum(weight, DEPTH_WEIGHT_FLOOR)
    # depth = wdepth / max(weight, floor): the weight branch is flat below the floor.
    g_wdepth = g_depth_up / denom
    g_weight = g_alpha - np.where(weight > DEPTH_WEIGHT_FLOOR, g_depth_up * wdepth / denom**2, 0.0)

    prep = cache.prep
    pairs = cache.pairs
    d_alpha_splat = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_invcov = np.zeros((n, 3))
    d_color_splat = np.zeros((n, 3))
    d_z_splat = np.zeros(n)
    if pairs["pixel"].shape[0]:
        bg_dot = g_color @ background
        _backward_kernel(
            pairs["pixel"],
            pairs["splat"],
            pairs["w"],
            pairs["t"],
            pairs["processed"],
            prep["mean2d"],
            prep["inv_cov"],
            gaussians.opacities,
            prep["color"],
            prep["mu_view"][:, 2].copy(),
            w,
            g_color,
            g_weight,
            g_wdepth,
            bg_dot,
            cache.totals["transmittance"],
            d_alpha_splat,
            d_mean2d,
            d_invcov,
            d_color_splat,
            d_z_splat,
            np.zeros((hw, 3)),
            np.zeros(hw),
            np.zeros(hw),
        )

    # Inverse covariance back to cov2d: dC = -Lambda dLambda Lambda.
    lam = np.empty((n, 2, 2))
    lam[:, 0, 0] = prep["inv_cov"][:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = prep["inv_cov"][:, 1]
    lam[:, 1, 1] = prep["inv_cov"][:, 2]
    g_lam = np.empty((n, 2, 2))
    g_lam[:, 0, 0] = d_invcov[:, 0]
    g_lam[:, 0, 1] = g_lam[:, 1, 0] = 0.5 * d_invcov[:, 1]
    g_lam[:, 1, 1] = d_invcov[:, 2]
    g_cov = -lam @ g_lam @ lam

    # cov2d = M Sigma M^T + blur, M = J R_v.
    m = prep["m"]
    sigma = prep["sigma"]
    g_m = 2.0 * g_cov @ m @ sigma
    g_sigma = np.swapaxes(m, -1, -2) @ g_cov @ m
    r_v = prep["r_v"]
    g_jac = g_m @ r_v.T
    g_w_total = np.einsum("nji,njk->ik", prep["jac"], g_m)

    # Viewspace center gradient: projection, Jacobian and depth-channel chains.
    mu_view = prep["mu_view"]
    x, y, z = mu_view[:, 0], mu_view[:, 1], np.where(prep["valid"], mu_view[:, 2], 1.0)
    fx, fy = intrinsics.fx, intrinsics.fy
    g_tilde = np.zeros((n, 3))
    g_tilde[:, 0] = d_mean2d[:, 0] * fx / z - g_jac[:, 0, 2] * fx / z**2
    g_tilde[:, 1] = d_mean2d[:, 1] * fy / z - g_jac[:, 1, 2] * fy / z**2
    g_tilde[:, 2] = (
        -d_mean2d[:, 0] * fx * x / z**2
        - d_mean2d[:, 1] * fy * y / z**2
        - g_jac[:, 0, 0] * fx / z**2
        - g_jac[:, 1, 1] * fy / z**2
        + g_jac[:, 0, 2] * 2.0 * fx * x / z**3
        + g_jac[:, 1, 2] * 2.0 * fy * y / z**3
        + d_z_splat
    )

    # Color chain: clamp mask, SH coefficients, then view direction.
    g_raw_color = d_color_splat * prep["unclamped"]
    d_sh = prep["basis"][:, :, None] * g_raw_color[:, None, :]
    u = np.einsum("nic,nc->ni", gaussians.sh[:, 1:, :], g_raw_color)
    g_rd = SH_LINEAR * (u @ SH_PERM)
    r_d = prep["r_d"]
    g_diff = (g_rd - (g_rd * r_d).sum(axis=1, keepdims=True) * r_d) / prep["r_norm"][:, None]

    d_centers = g_tilde @ r_v + g_diff

    # Scale and orientation chains through Sigma = R diag(s^2) R^T.
    rot_q = prep["rot_q"]
    scales = gaussians.scales
    inner = np.swapaxes(rot_q, -1, -2) @ g_sigma @ rot_q
    d_scales = 2.0 * scales * np.einsum("nkk->nk", inner)
    g_rot_q = 2.0 * g_sigma @ rot_q * (scales**2)[:, None, :]
    d_orientation = _quat_backward(gaussians.quats, g_rot_q)

    # Camera pose: translation by the negated center sums, rotation by the
    # viewspace outer products plus the covariance W-chain.
    r_cam = r_v.T
    campos = prep["campos"]
    d_translation = -(r_cam @ g_tilde.sum(axis=0)) - g_diff.sum(axis=0)
    d_rotation = np.einsum("ni,nj->ij", gaussians.centers - campos, g_tilde) + g_w_total.T
    b = r_cam.T @ d_rotation
    d_rotation_tangent = np.array(
        [b[2, 1] - b[1, 2], b[0, 2] - b[2, 0], b[1, 0] - b[0, 1]]
    )

    return RenderGradients(
        d_centers=d_centers,
        d_opacity=d_alpha_splat,
        d_scales=d_scales,
        d_orientation=d_orientation,
        d_sh=d_sh,
        d_translation=d_translation,
        d_rotation=d_rotation,
        d_rotation_tangent=d_rotation_tangent,
    )


def _quat_backward(quats: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Gradient through unit-quaternion-to-matrix, tangent-projected.

    The stored quaternion is unit norm and the constructor renormalizes, so
    the returned gradient is projected onto the sphere tangent at q.
    """
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    g = g_rot
    dw = 2.0 * (
        -z * g[:, 0, 1]
        + y * g[:, 0, 2]
        + z * g[:, 1, 0]
        - x * g[:, 1, 2]
        - y * g[:, 2, 0]
        + x * g[:, 2, 1]
    )
    dx = 2.0 * (
        y * g[:, 0, 1]
        + z * g[:, 0, 2]
        + y * g[:, 1, 0]
        - 2.0 * x * g[:, 1, 1]
        - w * g[:, 1, 2]
        + z * g[:, 2, 0]
        + w * g[:, 2, 1]
        - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0]
        + x * g[:, 0, 1]
        + w * g[:, 0, 2]
        + x * g[:, 1, 0]
        + z * g[:, 1, 2]
        - w * g[:, 2, 0]
        + z * g[:, 2, 1]
        - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0]
        - w * g[:, 0, 1]
        + x * g[:, 0, 2]
        + w * g[:, 1, 0]
        - 2.0 * z * g[:, 1, 1]
        + y * g[:, 1, 2]
        + x * g[:, 2, 0]
        + y * g[:, 2, 1]
    )
    raw = np.stack([dw, dx, dy, dz], axis=1)
    return raw - (raw * quats).sum(axis=1, keepdims=True) * quats
