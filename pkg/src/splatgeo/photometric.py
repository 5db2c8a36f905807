"""Photometric losses: SSIM, reprojection via inverse warping, render error.

Every loss here comes with an analytic backward companion so the scene
optimizer never needs numeric differentiation.  Images are float arrays in
[0, 1] with shape (H, W, 3); reductions are plain numpy sums, which keeps
results deterministic across runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, ShapeMismatch
from .geometry import CameraIntrinsics, RigidTransform, se3_inverse

logger = logging.getLogger(__name__)

LOW_VALID_FRACTION = 0.1


@dataclass
class LossConfig:
    """Weights for the combined reprojection + rendering objective."""

    omega: float = 0.85
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma1: float = 0.2
    gamma2: float = 1.0
    ssim_window: int = 11
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be an odd integer >= 3")
        if min(self.lambda1, self.lambda2, self.gamma1, self.gamma2) < 0.0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class WarpResult:
    """A source image resampled into the target view plus its validity mask."""

    image: np.ndarray
    valid_mask: np.ndarray


def _gauss_kernel(window: int, sigma: float = 1.5) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_indices(length: int, window: int) -> np.ndarray:
    half = window // 2
    base = np.arange(length)[:, None] + np.arange(-half, half + 1)[None, :]
    return np.abs(base) * (base < length) + (2 * (length - 1) - base) * (base >= length)


def _conv_axis(img: np.ndarray, kernel: np.ndarray, idx: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(img, axis, 0)
    out = np.einsum("k,lk...->l...", kernel, moved[idx])
    return np.moveaxis(out, 0, axis)


def _conv_axis_adjoint(grad: np.ndarray, kernel: np.ndarray, idx: np.ndarray, axis: int) -> np.ndarray:
    # Full convolution of grad with the kernel, then the out-of-range tails fold
    # back onto their reflected positions; scatter only touches 2*half rows.
    length = idx.shape[0]
    half = kernel.shape[0] // 2
    moved = np.moveaxis(grad, axis, 0)
    full = np.zeros((length + 2 * half,) + moved.shape[1:], dtype=grad.dtype)
    for k in range(kernel.shape[0]):
        full[k : k + length] += kernel[k] * moved
    out = full[half : half + length]
    if half:
        out[1 : half + 1] += full[half - 1 :: -1][:half]
        out[length - 1 - half : length - 1] += full[length + half :][::-1]
    return np.moveaxis(out, 0, axis)


class _Window:
    """Separable reflect-padded Gaussian filter with an exact adjoint."""

    def __init__(self, height: int, width: int, window: int, sigma: float = 1.5):
        if min(height, width) <= window // 2:
            raise ShapeMismatch(f"image {height}x{width} too small for window {window}")
        self.kernel = _gauss_kernel(window, sigma)
        self.rows = _reflect_indices(height, window)
        self.cols = _reflect_indices(width, window)

    def smooth(self, img: np.ndarray) -> np.ndarray:
        out = _conv_axis(img, self.kernel, self.rows, 0)
        return _conv_axis(out, self.kernel, self.cols, 1)

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        out = _conv_axis_adjoint(grad, self.kernel, self.cols, 1)
        return _conv_axis_adjoint(out, self.kernel, self.rows, 0)


def _ssim_terms(a, b, win, c1, c2):
    mu_a = win.smooth(a)
    mu_b = win.smooth(b)
    pa = win.smooth(a * a)
    pb = win.smooth(b * b)
    pab = win.smooth(a * b)
    top_a = 2.0 * mu_a * mu_b + c1
    top_b = 2.0 * (pab - mu_a * mu_b) + c2
    bot_c = mu_a**2 + mu_b**2 + c1
    bot_d = (pa - mu_a**2) + (pb - mu_b**2) + c2
    return mu_a, mu_b, top_a, top_b, bot_c, bot_d


def ssim_map(
    a: np.ndarray, b: np.ndarray, window: int = 11, c1: float = 1e-4, c2: float = 9e-4
) -> np.ndarray:
    """Per-pixel structural similarity with a Gaussian window (sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    win = _Window(a.shape[0], a.shape[1], window)
    _, _, ta, tb, bc, bd = _ssim_terms(a, b, win, c1, c2)
    return ta * tb / (bc * bd)


def ssim(
    a: np.ndarray, b: np.ndarray, window: int = 11, c1: float = 1e-4, c2: float = 9e-4
) -> float:
    """Mean structural similarity in [-1, 1]; symmetric in its arguments."""
    return float(ssim_map(a, b, window, c1, c2).mean())


def _ssim_backward_from_weights(a, b, win, c1, c2, weights, terms=None):
    """Gradients of sum(weights * ssim_map) with respect to both images."""
    mu_a, mu_b, ta, tb, bc, bd = terms if terms is not None else _ssim_terms(a, b, win, c1, c2)
    s = ta * tb / (bc * bd)
    d_pa = weights * (-s / bd)
    d_pb = d_pa
    d_pab = weights * (2.0 * ta / (bc * bd))
    d_mu_a = weights * (2.0 * mu_b * (tb - ta) / (bc * bd) - 2.0 * mu_a * s * (1.0 / bc - 1.0 / bd))
    d_mu_b = weights * (2.0 * mu_a * (tb - ta) / (bc * bd) - 2.0 * mu_b * s * (1.0 / bc - 1.0 / bd))
    d_a = win.adjoint(d_mu_a) + 2.0 * a * win.adjoint(d_pa) + b * win.adjoint(d_pab)
    d_b = win.adjoint(d_mu_b) + 2.0 * b * win.adjoint(d_pb) + a * win.adjoint(d_pab)
    return d_a, d_b


def _mask_and_count(shape, mask):
    if mask is None:
        return np.ones(shape), float(np.prod(shape))
    m = np.broadcast_to(mask[..., None], shape).astype(np.float64)
    return m, float(m.sum())


def photometric_error(
    a: np.ndarray, b: np.ndarray, cfg: LossConfig, mask: np.ndarray | None = None
) -> float:
    """Mixed SSIM/L1 image distance: ``omega/2 (1 - SSIM) + (1 - omega) L1``.

    With ``mask`` given, both terms average over valid pixels only; a mask
    covering under 10% of the image logs a warning.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    m, count = _mask_and_count(a.shape, mask)
    if count == 0.0:
        return 0.0
    if mask is not None and count < LOW_VALID_FRACTION * mask.size * a.shape[-1]:
        logger.warning("photometric error computed on %.1f%% valid pixels", 100.0 * count / (mask.size * a.shape[-1]))
    win = _Window(a.shape[0], a.shape[1], cfg.ssim_window)
    _, _, ta, tb, bc, bd = _ssim_terms(a, b, win, cfg.ssim_c1, cfg.ssim_c2)
    mean_ssim = float((m * (ta * tb / (bc * bd))).sum() / count)
    mean_l1 = float((m * np.abs(a - b)).sum() / count)
    return 0.5 * cfg.omega * (1.0 - mean_ssim) + (1.0 - cfg.omega) * mean_l1


def photometric_error_backward(
    a: np.ndarray, b: np.ndarray, cfg: LossConfig, mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`photometric_error` with respect to both images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    m, count = _mask_and_count(a.shape, mask)
    if count == 0.0:
        return np.zeros_like(a), np.zeros_like(b)
    weights = m / count
    win = _Window(a.shape[0], a.shape[1], cfg.ssim_window)
    ssim_w = -0.5 * cfg.omega * weights
    d_a, d_b = _ssim_backward_from_weights(a, b, win, cfg.ssim_c1, cfg.ssim_c2, ssim_w)
    sign = np.sign(a - b)
    d_a += (1.0 - cfg.omega) * weights * sign
    d_b -= (1.0 - cfg.omega) * weights * sign
    return d_a, d_b


def photometric_error_with_grad(
    a: np.ndarray, b: np.ndarray, cfg: LossConfig, mask: np.ndarray | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and gradients of :func:`photometric_error` in one pass.

    The SSIM window statistics are shared between the value and its
    backward, so the result matches the separate calls bit for bit at half
    the convolution count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    m, count = _mask_and_count(a.shape, mask)
    if count == 0.0:
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    if mask is not None and count < LOW_VALID_FRACTION * mask.size * a.shape[-1]:
        logger.warning("photometric error computed on %.1f%% valid pixels", 100.0 * count / (mask.size * a.shape[-1]))
    win = _Window(a.shape[0], a.shape[1], cfg.ssim_window)
    terms = _ssim_terms(a, b, win, cfg.ssim_c1, cfg.ssim_c2)
    _, _, ta, tb, bc, bd = terms
    mean_ssim = float((m * (ta * tb / (bc * bd))).sum() / count)
    mean_l1 = float((m * np.abs(a - b)).sum() / count)
    value = 0.5 * cfg.omega * (1.0 - mean_ssim) + (1.0 - cfg.omega) * mean_l1
    weights = m / count
    d_a, d_b = _ssim_backward_from_weights(
        a, b, win, cfg.ssim_c1, cfg.ssim_c2, -0.5 * cfg.omega * weights, terms=terms
    )
    sign = np.sign(a - b)
    d_a += (1.0 - cfg.omega) * weights * sign
    d_b -= (1.0 - cfg.omega) * weights * sign
    return value, d_a, d_b


def inverse_warp(
    src: np.ndarray,
    depth_tgt: np.ndarray,
    tgt_to_src: RigidTransform,
    intrinsics: CameraIntrinsics,
) -> WarpResult:
    """Resample ``src`` into the target view through the target depth map.

    Every target pixel is back-projected with its depth, moved by
    ``tgt_to_src`` and re-projected into the source image, where the value is
    taken by bilinear interpolation between pixel centers.  Pixels that land
    out of bounds or behind the source camera are flagged invalid.

    Raises:
        NonPositiveDepth: if the depth map is not strictly positive.
    """
    src = np.asarray(src, dtype=np.float64)
    depth_tgt = np.asarray(depth_tgt, dtype=np.float64)
    if np.any(depth_tgt <= 0.0):
        raise NonPositiveDepth("target depth must be strictly positive")
    h, w = depth_tgt.shape
    ctx = _warp_geometry(depth_tgt, tgt_to_src, intrinsics)
    image, valid = _bilinear_sample(src, ctx["u"], ctx["v"], ctx["in_front"])
    return WarpResult(image=image.reshape(h, w, 3), valid_mask=valid.reshape(h, w))


def _warp_geometry(depth_tgt, tgt_to_src, intrinsics):
    h, w = depth_tgt.shape
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    rays = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3) @ (
        intrinsics.inverse_matrix().T
    )
    x_tgt = depth_tgt.reshape(-1, 1) * rays
    identity = np.array_equal(tgt_to_src.rotation, np.eye(3)) and not tgt_to_src.translation.any()
    if identity:
        # The unproject/project round trip cancels algebraically; evaluate
        # the cancelled form so an identity warp is bit-exact.
        x_src = x_tgt
        z = x_tgt[:, 2]
        in_front = z > 1e-9
        z_safe = np.where(in_front, z, 1.0)
        u = gx.reshape(-1)
        v = gy.reshape(-1)
    else:
        x_src = x_tgt @ tgt_to_src.rotation.T + tgt_to_src.translation
        z = x_src[:, 2]
        in_front = z > 1e-9
        z_safe = np.where(in_front, z, 1.0)
        u = intrinsics.fx * x_src[:, 0] / z_safe + intrinsics.cx
        v = intrinsics.fy * x_src[:, 1] / z_safe + intrinsics.cy
    return {"rays": rays, "x_tgt": x_tgt, "x_src": x_src, "z_safe": z_safe,
            "in_front": in_front, "u": u, "v": v}


def _bilinear_setup(src_shape, u, v, in_front):
    # Edge-clamped bilinear over the image footprint [0, W] x [0, H]: samples
    # within half a pixel of the border replicate the edge row/column, so an
    # identity warp keeps every pixel valid and exact.
    h, w = src_shape[:2]
    valid = in_front & (u >= 0.0) & (u <= w) & (v >= 0.0) & (v <= h)
    gx = u - 0.5
    gy = v - 0.5
    i0 = np.clip(np.floor(gx).astype(np.int64), 0, w - 2)
    j0 = np.clip(np.floor(gy).astype(np.int64), 0, h - 2)
    fx_raw = gx - i0
    fy_raw = gy - j0
    fx = np.clip(fx_raw, 0.0, 1.0)
    fy = np.clip(fy_raw, 0.0, 1.0)
    live_x = (fx_raw > 0.0) & (fx_raw < 1.0)
    live_y = (fy_raw > 0.0) & (fy_raw < 1.0)
    return valid, i0, j0, fx[:, None], fy[:, None], live_x, live_y


def _bilinear_sample(src, u, v, in_front):
    valid, i0, j0, fx, fy, _, _ = _bilinear_setup(src.shape, u, v, in_front)
    v00 = src[j0, i0]
    v01 = src[j0, i0 + 1]
    v10 = src[j0 + 1, i0]
    v11 = src[j0 + 1, i0 + 1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    out = np.where(valid[:, None], out, 0.0)
    return out, valid


def inverse_warp_backward(
    src: np.ndarray,
    depth_tgt: np.ndarray,
    tgt_to_src: RigidTransform,
    intrinsics: CameraIntrinsics,
    d_image: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(d_image * warp.image)`` for :func:`inverse_warp`.

    Returns ``(d_depth, d_rotation, d_translation)`` with respect to the
    target depth map and the raw entries of ``tgt_to_src``.  Contributions
    from invalid pixels are zero regardless of ``d_image`` there.
    """
    src = np.asarray(src, dtype=np.float64)
    depth_tgt = np.asarray(depth_tgt, dtype=np.float64)
    h, w = depth_tgt.shape
    ctx = _warp_geometry(depth_tgt, tgt_to_src, intrinsics)
    u, v, in_front = ctx["u"], ctx["v"], ctx["in_front"]
    g_img = np.asarray(d_image, dtype=np.float64).reshape(-1, 3)

    valid, i0, j0, fx, fy, live_x, live_y = _bilinear_setup(src.shape, u, v, in_front)
    v00 = src[j0, i0]
    v01 = src[j0, i0 + 1]
    v10 = src[j0 + 1, i0]
    v11 = src[j0 + 1, i0 + 1]
    dval_du = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
    dval_dv = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
    g_u = np.where(valid & live_x, (g_img * dval_du).sum(axis=1), 0.0)
    g_v = np.where(valid & live_y, (g_img * dval_dv).sum(axis=1), 0.0)

    x_src = ctx["x_src"]
    z = ctx["z_safe"]
    g_xs = np.stack(
        [
            g_u * intrinsics.fx / z,
            g_v * intrinsics.fy / z,
            -g_u * intrinsics.fx * x_src[:, 0] / z**2 - g_v * intrinsics.fy * x_src[:, 1] / z**2,
        ],
        axis=1,
    )
    d_translation = g_xs.sum(axis=0)
    d_rotation = g_xs.T @ ctx["x_tgt"]
    d_depth = ((g_xs @ tgt_to_src.rotation) * ctx["rays"]).sum(axis=1).reshape(h, w)
    return d_depth, d_rotation, d_translation


def _masked_depth(
    depth_t: np.ndarray, valid_t: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray | None]:
    # Invalid entries get a positive placeholder; their warp samples are
    # dropped from every mask, so the value only has to keep the warp finite.
    depth_t = np.asarray(depth_t, dtype=np.float64)
    if valid_t is None:
        return depth_t, None
    valid_t = np.asarray(valid_t, dtype=bool)
    if valid_t.shape != depth_t.shape:
        raise ShapeMismatch(f"valid mask {valid_t.shape} vs depth {depth_t.shape}")
    return np.where(valid_t, depth_t, 1.0), valid_t


def reprojection_loss(
    image_t: np.ndarray,
    image_c1: np.ndarray,
    image_c2: np.ndarray,
    depth_t: np.ndarray,
    c1_to_t: RigidTransform,
    c2_to_t: RigidTransform,
    intrinsics: CameraIntrinsics,
    cfg: LossConfig,
    valid_t: np.ndarray | None = None,
) -> float:
    """Sum of masked photometric errors against both warped context views.

    ``depth_t`` must be the rendered target depth so the projective geometry
    stays scale-consistent with the Gaussians that produced it.  ``valid_t``
    marks target pixels whose depth is trustworthy; the rest are excluded
    from the error and their depth is replaced before warping so holes in a
    rendered depth map cannot poison the warp.
    """
    depth_t, valid_t = _masked_depth(depth_t, valid_t)
    total = 0.0
    for src_image, pose in ((image_c1, c1_to_t), (image_c2, c2_to_t)):
        warp = inverse_warp(src_image, depth_t, se3_inverse(pose), intrinsics)
        mask = warp.valid_mask if valid_t is None else warp.valid_mask & valid_t
        total += photometric_error(image_t, warp.image, cfg, mask=mask)
    return total


def reprojection_loss_backward(
    image_t: np.ndarray,
    image_c1: np.ndarray,
    image_c2: np.ndarray,
    depth_t: np.ndarray,
    c1_to_t: RigidTransform,
    c2_to_t: RigidTransform,
    intrinsics: CameraIntrinsics,
    cfg: LossConfig,
    valid_t: np.ndarray | None = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Gradients of :func:`reprojection_loss`.

    Returns the gradient with respect to the target depth map and, per
    context view, with respect to the raw rotation and translation of the
    camera-to-target transform.  Validity masks are treated as constant.
    """
    depth_t, valid_t = _masked_depth(depth_t, valid_t)
    d_depth = np.zeros_like(depth_t)
    pose_grads = []
    for src_image, pose in ((image_c1, c1_to_t), (image_c2, c2_to_t)):
        inv = se3_inverse(pose)
        warp = inverse_warp(src_image, depth_t, inv, intrinsics)
        mask = warp.valid_mask if valid_t is None else warp.valid_mask & valid_t
        _, d_warped = photometric_error_backward(image_t, warp.image, cfg, mask=mask)
        d_warped = np.where(mask[..., None], d_warped, 0.0)
        dd, d_r_inv, d_t_inv = inverse_warp_backward(src_image, depth_t, inv, intrinsics, d_warped)
        d_depth += dd
        d_rot = d_r_inv.T - np.outer(pose.translation, d_t_inv)
        d_tra = -pose.rotation @ d_t_inv
        pose_grads.append((d_rot, d_tra))
    if valid_t is not None:
        d_depth = np.where(valid_t, d_depth, 0.0)
    return d_depth, pose_grads


def reprojection_loss_with_grad(
    image_t: np.ndarray,
    image_c1: np.ndarray,
    image_c2: np.ndarray,
    depth_t: np.ndarray,
    c1_to_t: RigidTransform,
    c2_to_t: RigidTransform,
    intrinsics: CameraIntrinsics,
    cfg: LossConfig,
    valid_t: np.ndarray | None = None,
) -> tuple[float, np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Value plus gradients of :func:`reprojection_loss`, warping each view once."""
    depth_t, valid_t = _masked_depth(depth_t, valid_t)
    total = 0.0
    d_depth = np.zeros_like(depth_t)
    pose_grads = []
    for src_image, pose in ((image_c1, c1_to_t), (image_c2, c2_to_t)):
        inv = se3_inverse(pose)
        warp = inverse_warp(src_image, depth_t, inv, intrinsics)
        mask = warp.valid_mask if valid_t is None else warp.valid_mask & valid_t
        value, _, d_warped = photometric_error_with_grad(image_t, warp.image, cfg, mask=mask)
        total += value
        d_warped = np.where(mask[..., None], d_warped, 0.0)
        dd, d_r_inv, d_t_inv = inverse_warp_backward(src_image, depth_t, inv, intrinsics, d_warped)
        d_depth += dd
        d_rot = d_r_inv.T - np.outer(pose.translation, d_t_inv)
        d_tra = -pose.rotation @ d_t_inv
        pose_grads.append((d_rot, d_tra))
    if valid_t is not None:
        d_depth = np.where(valid_t, d_depth, 0.0)
    return total, d_depth, pose_grads


def rendering_loss(renders, images, cfg: LossConfig) -> float:
    """Per-view SSIM + mean squared error between renders and photographs."""
    if len(renders) != len(images):
        raise ShapeMismatch("render and image counts differ")
    total = 0.0
    for out, img in zip(renders, images):
        rendered = out.color if hasattr(out, "color") else np.asarray(out)
        img = np.asarray(img, dtype=np.float64)
        if rendered.shape != img.shape:
            raise ShapeMismatch(f"render {rendered.shape} vs image {img.shape}")
        total += cfg.gamma1 * (1.0 - ssim(img, rendered, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2))
        total += cfg.gamma2 * float(((img - rendered) ** 2).mean())
    return total


def rendering_loss_backward(renders, images, cfg: LossConfig) -> list[np.ndarray]:
    """Gradient of :func:`rendering_loss` with respect to each rendered color."""
    grads = []
    for out, img in zip(renders, images):
        rendered = out.color if hasattr(out, "color") else np.asarray(out)
        img = np.asarray(img, dtype=np.float64)
        win = _Window(img.shape[0], img.shape[1], cfg.ssim_window)
        weights = np.full(img.shape, -cfg.gamma1 / np.prod(img.shape))
        _, d_rendered = _ssim_backward_from_weights(
            img, rendered, win, cfg.ssim_c1, cfg.ssim_c2, weights
        )
        d_rendered += cfg.gamma2 * 2.0 * (rendered - img) / img.size
        grads.append(d_rendered)
    return grads


def rendering_loss_with_grad(renders, images, cfg: LossConfig) -> tuple[float, list[np.ndarray]]:
    """Value plus per-view color gradients of :func:`rendering_loss`."""
    if len(renders) != len(images):
        raise ShapeMismatch("render and image counts differ")
    total = 0.0
    grads = []
    for out, img in zip(renders, images):
        rendered = out.color if hasattr(out, "color") else np.asarray(out)
        img = np.asarray(img, dtype=np.float64)
        if rendered.shape != img.shape:
            raise ShapeMismatch(f"render {rendered.shape} vs image {img.shape}")
        win = _Window(img.shape[0], img.shape[1], cfg.ssim_window)
        terms = _ssim_terms(img, rendered, win, cfg.ssim_c1, cfg.ssim_c2)
        _, _, ta, tb, bc, bd = terms
        total += cfg.gamma1 * (1.0 - float((ta * tb / (bc * bd)).mean()))
        total += cfg.gamma2 * float(((img - rendered) ** 2).mean())
        weights = np.full(img.shape, -cfg.gamma1 / np.prod(img.shape))
        _, d_rendered = _ssim_backward_from_weights(
            img, rendered, win, cfg.ssim_c1, cfg.ssim_c2, weights, terms=terms
        )
        d_rendered += cfg.gamma2 * 2.0 * (rendered - img) / img.size
        grads.append(d_rendered)
    return total, grads


def total_loss(l_proj: float, l_ren: float, cfg: LossConfig) -> float:
    """Weighted objective ``lambda1 * L_proj + lambda2 * L_ren``."""
    return cfg.lambda1 * l_proj + cfg.lambda2 * l_ren
