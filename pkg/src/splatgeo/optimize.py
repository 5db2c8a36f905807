"""Single-scene joint recovery of depth maps, camera poses and splat attributes.

Every pixel of the two context views owns one Gaussian whose depth, pose and
appearance parameters are optimized directly against the combined
reprojection + rendering objective; the target view only supervises.  All
gradients are analytic, assembled from the module-level backward functions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadInit, Diverged, NonFiniteGradient, ShapeMismatch
from .gaussians import (
    SH_DC,
    GaussianGradients,
    GaussianSet,
    RawAttributeField,
    build_gaussians,
    build_gaussians_backward,
    merge_gaussians,
    transform_gaussians,
    transform_gaussians_backward,
)
from .geometry import (
    RigidTransform,
    Twist,
    se3_exp,
    se3_exp_backward,
    se3_inverse,
    se3_log,
    so3_exp,
)
from .metrics import PoseError, pose_error
from .photometric import (
    LossConfig,
    rendering_loss,
    rendering_loss_with_grad,
    reprojection_loss,
    reprojection_loss_with_grad,
)
from .rasterizer import render, render_backward
from .scene_io import SceneBundle

# Floor for the per-pixel depth exp(base) + residual.
DEPTH_EPS = 1e-3
# Rendered alpha below which a target pixel's depth is treated as undefined.
VALID_ALPHA = 1e-3

PARAM_GROUPS = {
    "base_depth": "depth",
    "residual_depth": "depth",
    "pose_twists": "pose",
    "raw_opacity": "attrs",
    "raw_scales": "attrs",
    "raw_quats": "attrs",
    "raw_sh": "attrs",
    "raw_offsets": "attrs",
}


@dataclass
class SceneParameters:
    """Free parameters of one scene: two context views plus their poses.

    ``base_depth`` holds log-depth; the final per-pixel depth is
    ``exp(base_depth) + residual_depth`` with the residual kept above
    ``DEPTH_EPS - exp(base_depth)`` so depth stays positive.  Twist rows are
    (omega, v) for the camera-to-target transforms T_c1->t and T_c2->t.
    """

    base_depth: np.ndarray
    residual_depth: np.ndarray
    pose_twists: np.ndarray
    raw_opacity: np.ndarray
    raw_scales: np.ndarray
    raw_quats: np.ndarray
    raw_sh: np.ndarray
    raw_offsets: np.ndarray

    def __post_init__(self) -> None:
        for name in PARAM_GROUPS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.base_depth.ndim != 3 or self.base_depth.shape[0] != 2:
            raise ShapeMismatch("base_depth must be 2 x H x W")
        hw = self.base_depth.shape[1:]
        expected = {
            "residual_depth": (2,) + hw,
            "pose_twists": (2, 6),
            "raw_opacity": (2,) + hw,
            "raw_scales": (2,) + hw + (3,),
            "raw_quats": (2,) + hw + (4,),
            "raw_sh": (2,) + hw + (4, 3),
            "raw_offsets": (2,) + hw + (2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} must have shape {shape}")

    def depths(self) -> np.ndarray:
        return np.exp(self.base_depth) + self.residual_depth

    def twist(self, view: int) -> Twist:
        return Twist(self.pose_twists[view, :3], self.pose_twists[view, 3:])

    def raw_attrs(self, view: int) -> RawAttributeField:
        return RawAttributeField(
            opacity=self.raw_opacity[view],
            scales=self.raw_scales[view],
            quats=self.raw_quats[view],
            sh=self.raw_sh[view],
            offsets=self.raw_offsets[view],
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> "SceneParameters":
        return SceneParameters(**{k: v.copy() for k, v in self.as_dict().items()})


@dataclass
class InitSpec:
    """Initialization recipe for :func:`init_scene_params`.

    ``depth_mode`` selects the depth source: "ground_truth" reads the bundle
    oracle, "constant" fills with ``constant_depth`` (or the median oracle
    depth when available), "provided" takes ``provided_depth`` as 2 x H x W.
    ``depth_noise`` is the sigma of multiplicative log-normal noise, so 0.05
    reads as 5% relative depth error.  Pose noise right-multiplies the true
    rotation by ``rotation_noise_deg`` about a random axis and displaces the
    translation by ``translation_noise`` scene units, making the constructed
    initial errors exact.  ``log_scale_bias`` shifts the raw scale grids away
    from their zero default so initial splats need not be unit-sized, and
    ``sh_from_images`` seeds each splat's DC color from its source pixel
    instead of neutral gray, which removes most of the step-0 color error.
    """

    depth_mode: str = "ground_truth"
    provided_depth: np.ndarray | None = None
    constant_depth: float | None = None
    depth_noise: float = 0.0
    rotation_noise_deg: float = 0.0
    translation_noise: float = 0.0
    log_scale_bias: float = 0.0
    sh_from_images: bool = False
    seed: int = 0


@dataclass
class OptimizeConfig:
    """Hyper-parameters of a single-scene optimization run."""

    steps: int = 2000
    loss: LossConfig = field(default_factory=LossConfig)
    init: InitSpec = field(default_factory=InitSpec)
    lr_depth: float = 1e-2
    lr_pose: float = 1e-3
    lr_attr: float = 1e-2
    clip_norm: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_fraction: float = 0.01
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if min(self.lr_depth, self.lr_pose, self.lr_attr) <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.clip_norm <= 0.0 or not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("bad clip_norm or warmup_fraction")

    def learning_rates(self) -> dict[str, float]:
        return {"depth": self.lr_depth, "pose": self.lr_pose, "attrs": self.lr_attr}


@dataclass
class OptimizerState:
    """Adam accumulators plus the linear warmup/decay schedule position."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    total_steps: int
    warmup_steps: int

    @classmethod
    def fresh(cls, params: SceneParameters, cfg: OptimizeConfig) -> "OptimizerState":
        arrays = params.as_dict()
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
            step=0,
            total_steps=cfg.steps,
            warmup_steps=max(1, round(cfg.warmup_fraction * cfg.steps)),
        )

    def lr_factor(self) -> float:
        # Linear ramp over the warmup, then linear decay toward 0 at the end.
        if self.step < self.warmup_steps:
            return (self.step + 1) / self.warmup_steps
        remaining = max(self.total_steps - self.warmup_steps, 1)
        return (self.total_steps - self.step) / remaining


@dataclass
class OptimizationReport:
    """Loss trace and end-of-run summary of one optimization."""

    total: np.ndarray
    projection: np.ndarray
    rendering: np.ndarray
    pose_errors: list[PoseError] | None
    wall_time: float
    config: dict

    @property
    def steps_run(self) -> int:
        return len(self.total)


def config_to_dict(cfg: OptimizeConfig) -> dict:
    """JSON-ready echo of a run config (versioned; provided arrays omitted)."""
    loss = cfg.loss
    init = cfg.init
    return {
        "schema": 1,
        "steps": cfg.steps,
        "lr_depth": cfg.lr_depth,
        "lr_pose": cfg.lr_pose,
        "lr_attr": cfg.lr_attr,
        "clip_norm": cfg.clip_norm,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "adam_eps": cfg.adam_eps,
        "warmup_fraction": cfg.warmup_fraction,
        "divergence_factor": cfg.divergence_factor,
        "divergence_patience": cfg.divergence_patience,
        "background": list(cfg.background),
        "loss": {
            "omega": loss.omega,
            "lambda1": loss.lambda1,
            "lambda2": loss.lambda2,
            "gamma1": loss.gamma1,
            "gamma2": loss.gamma2,
            "ssim_window": loss.ssim_window,
            "ssim_c1": loss.ssim_c1,
            "ssim_c2": loss.ssim_c2,
        },
        "init": {
            "depth_mode": init.depth_mode,
            "constant_depth": init.constant_depth,
            "depth_noise": init.depth_noise,
            "rotation_noise_deg": init.rotation_noise_deg,
            "translation_noise": init.translation_noise,
            "log_scale_bias": init.log_scale_bias,
            "sh_from_images": init.sh_from_images,
            "seed": init.seed,
        },
    }


def config_from_dict(data: dict) -> OptimizeConfig:
    """Inverse of :func:`config_to_dict`."""
    if data.get("schema") != 1:
        raise ValueError(f"unsupported config schema: {data.get('schema')!r}")
    loss = LossConfig(**data.get("loss", {}))
    init = InitSpec(**data.get("init", {}))
    keys = (
        "steps",
        "lr_depth",
        "lr_pose",
        "lr_attr",
        "clip_norm",
        "beta1",
        "beta2",
        "adam_eps",
        "warmup_fraction",
        "divergence_factor",
        "divergence_patience",
    )
    kwargs = {k: data[k] for k in keys if k in data}
    if "background" in data:
        kwargs["background"] = tuple(data["background"])
    return OptimizeConfig(loss=loss, init=init, **kwargs)


def save_run_config(cfg: OptimizeConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_run_config(path: str | Path) -> OptimizeConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def _initial_depths(bundle: SceneBundle, init: InitSpec, shape: tuple) -> np.ndarray:
    if init.depth_mode == "ground_truth":
        if bundle.gt_depths is None:
            raise BadInit("ground_truth depth init needs a bundle with gt_depths")
        return np.stack([d.copy() for d in bundle.gt_depths])
    if init.depth_mode == "constant":
        value = init.constant_depth
        if value is None:
            if bundle.gt_depths is None:
                raise BadInit("constant depth init needs constant_depth or gt_depths")
            value = float(np.median(np.stack(bundle.gt_depths)))
        if value <= 0.0:
            raise BadInit(f"constant depth must be positive, got {value}")
        return np.full(shape, value)
    if init.depth_mode == "provided":
        depth = init.provided_depth
        if depth is None:
            raise BadInit("provided depth init needs provided_depth")
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != shape:
            raise BadInit(f"provided depth must have shape {shape}, got {depth.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0.0):
            raise BadInit("provided depth must be finite and positive")
        return depth.copy()
    raise BadInit(f"unknown depth_mode {init.depth_mode!r}")


def init_scene_params(bundle: SceneBundle, init: InitSpec) -> SceneParameters:
    """Initialize scene parameters per the InitSpec recipe.

    Depth noise and pose perturbations are seeded; with zero noise and
    ground-truth sources the parameters reproduce the oracle exactly.  Raw
    attribute grids start neutral (alpha 0.5, identity orientation, gray)
    with the raw scale grid shifted by ``log_scale_bias``.
    """
    h, w = bundle.images[0].shape[:2]
    rng = np.random.default_rng(init.seed)
    depths = _initial_depths(bundle, init, (2, h, w))
    if init.depth_noise > 0.0:
        depths = depths * np.exp(init.depth_noise * rng.standard_normal(depths.shape))

    twists = np.zeros((2, 6))
    for view in range(2):
        pose = (
            bundle.gt_poses[view]
            if bundle.gt_poses is not None
            else RigidTransform.identity()
        )
        rotation = pose.rotation
        translation = pose.translation.copy()
        if init.rotation_noise_deg != 0.0:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            rotation = rotation @ so3_exp(np.radians(init.rotation_noise_deg) * axis)
        if init.translation_noise != 0.0:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            translation = translation + init.translation_noise * direction
        twist = se3_log(RigidTransform(rotation, translation))
        twists[view, :3] = twist.omega
        twists[view, 3:] = twist.v

    quats = np.zeros((2, h, w, 4))
    quats[..., 0] = 1.0
    raw_sh = np.zeros((2, h, w, 4, 3))
    if init.sh_from_images:
        # DC term chosen so the activated color reproduces the source pixel.
        for view, image in enumerate((bundle.images[0], bundle.images[2])):
            raw_sh[view, :, :, 0, :] = (np.asarray(image, dtype=np.float64) - 0.5) / SH_DC
    return SceneParameters(
        base_depth=np.log(depths),
        residual_depth=np.zeros((2, h, w)),
        pose_twists=twists,
        raw_opacity=np.zeros((2, h, w)),
        raw_scales=np.full((2, h, w, 3), init.log_scale_bias),
        raw_quats=quats,
        raw_sh=raw_sh,
        raw_offsets=np.zeros((2, h, w, 2)),
    )


def build_scene(
    params: SceneParameters, bundle: SceneBundle
) -> tuple[GaussianSet, list[RigidTransform], list[GaussianSet]]:
    """Current Gaussians (target frame), context poses and per-view camera sets."""
    depths = params.depths()
    poses = [se3_exp(params.twist(k)) for k in range(2)]
    cam_sets = [
        build_gaussians(params.raw_attrs(k), depths[k], bundle.intrinsics)
        for k in range(2)
    ]
    world = [transform_gaussians(cam_sets[k], poses[k]) for k in range(2)]
    return merge_gaussians(world[0], world[1]), poses, cam_sets


def evaluate_objective(
    params: SceneParameters,
    bundle: SceneBundle,
    cfg: LossConfig,
    background: np.ndarray,
    with_grads: bool = True,
) -> tuple[float, float, float, dict[str, np.ndarray] | None]:
    """Total loss (and gradients) of the current parameters on a bundle.

    The merged Gaussian set is rendered into all three views; the rendered
    target depth feeds the reprojection term so the projective geometry stays
    tied to the splats rather than to any free parameter.
    """
    intr = bundle.intrinsics
    merged, poses, cam_sets = build_scene(params, bundle)
    views = [se3_inverse(poses[0]), RigidTransform.identity(), se3_inverse(poses[1])]
    outs = []
    caches = []
    for view in views:
        out, cache = render(merged, intr, view, background, return_cache=True)
        outs.append(out)
        caches.append(cache)
    depth_t = outs[1].depth
    # Pixels no splat reaches render depth ~0; they carry no geometry and are
    # excluded from the reprojection term rather than crashing the warp.
    valid_t = outs[1].alpha > VALID_ALPHA
    if not with_grads:
        l_ren = rendering_loss(outs, bundle.images, cfg)
        l_proj = reprojection_loss(
            bundle.image_t,
            bundle.image_c1,
            bundle.image_c2,
            depth_t,
            poses[0],
            poses[1],
            intr,
            cfg,
            valid_t=valid_t,
        )
        return cfg.lambda1 * l_proj + cfg.lambda2 * l_ren, l_proj, l_ren, None

    l_ren, d_colors = rendering_loss_with_grad(outs, bundle.images, cfg)
    l_proj, d_depth_t, reproj_pose_grads = reprojection_loss_with_grad(
        bundle.image_t,
        bundle.image_c1,
        bundle.image_c2,
        depth_t,
        poses[0],
        poses[1],
        intr,
        cfg,
        valid_t=valid_t,
    )
    total = cfg.lambda1 * l_proj + cfg.lambda2 * l_ren

    n = len(merged)
    acc = GaussianGradients.zeros(n)
    pose_raw = [
        [np.zeros((3, 3)), np.zeros(3)],
        [np.zeros((3, 3)), np.zeros(3)],
    ]
    for idx, view in enumerate(views):
        rg = render_backward(
            merged,
            intr,
            view,
            background,
            d_color=cfg.lambda2 * d_colors[idx],
            d_depth=cfg.lambda1 * d_depth_t if idx == 1 else None,
            cache=caches[idx],
        )
        acc.accumulate(
            GaussianGradients(rg.d_centers, rg.d_opacity, rg.d_scales, rg.d_orientation, rg.d_sh)
        )
        if idx != 1:
            # Camera poses of the context views are the pose parameters
            # themselves; the target camera is pinned to the identity.
            k = 0 if idx == 0 else 1
            pose_raw[k][0] += rg.d_rotation
            pose_raw[k][1] += rg.d_translation
    for k in range(2):
        pose_raw[k][0] += cfg.lambda1 * reproj_pose_grads[k][0]
        pose_raw[k][1] += cfg.lambda1 * reproj_pose_grads[k][1]

    h, w = bundle.images[0].shape[:2]
    hw = h * w
    depths = params.depths()
    grads = {name: np.zeros_like(arr) for name, arr in params.as_dict().items()}
    exp_base = np.exp(params.base_depth)
    for k in range(2):
        block = GaussianGradients(
            centers=acc.centers[k * hw : (k + 1) * hw],
            opacities=acc.opacities[k * hw : (k + 1) * hw],
            scales=acc.scales[k * hw : (k + 1) * hw],
            quats=acc.quats[k * hw : (k + 1) * hw],
            sh=acc.sh[k * hw : (k + 1) * hw],
        )
        d_cam, d_rot, d_tra = transform_gaussians_backward(cam_sets[k], poses[k], block)
        d_raw, d_depth = build_gaussians_backward(
            params.raw_attrs(k), depths[k], bundle.intrinsics, d_cam
        )
        grads["raw_opacity"][k] = d_raw.opacity
        grads["raw_scales"][k] = d_raw.scales
        grads["raw_quats"][k] = d_raw.quats
        grads["raw_sh"][k] = d_raw.sh
        grads["raw_offsets"][k] = d_raw.offsets
        grads["base_depth"][k] = d_depth * exp_base[k]
        grads["residual_depth"][k] = d_depth
        d_twist = se3_exp_backward(
            params.twist(k), pose_raw[k][0] + d_rot, pose_raw[k][1] + d_tra
        )
        grads["pose_twists"][k, :3] = d_twist.omega
        grads["pose_twists"][k, 3:] = d_twist.v
    return total, l_proj, l_ren, grads


def global_gradient_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))


def step(
    params: SceneParameters,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float | dict[str, float],
    clip_norm: float = 0.5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[SceneParameters, OptimizerState]:
    """One Adam update with global-norm clipping and the scheduled rate.

    ``lr`` is a base rate, either shared or per group ("depth", "pose",
    "attrs"); the warmup/decay factor from ``state`` multiplies it.  Raises
    NonFiniteGradient before any accumulator is touched.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(
            f"non-finite gradients at step {state.step} in: {', '.join(sorted(bad))}"
        )
    rates = (
        {group: lr for group in ("depth", "pose", "attrs")}
        if np.isscalar(lr)
        else dict(lr)
    )
    norm = global_gradient_norm(grads)
    scale = min(1.0, clip_norm / norm) if norm > 0.0 else 1.0
    factor = state.lr_factor()
    t = state.step + 1
    correction = np.sqrt(1.0 - beta2**t) / (1.0 - beta1**t)
    new_params = params.copy()
    new_m = {}
    new_v = {}
    arrays = new_params.as_dict()
    for name, g in grads.items():
        g = g * scale
        new_m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        new_v[name] = beta2 * state.v[name] + (1.0 - beta2) * g**2
        rate = rates[PARAM_GROUPS[name]] * factor * correction
        arrays[name] -= rate * new_m[name] / (np.sqrt(new_v[name]) + eps)
    np.maximum(
        new_params.residual_depth,
        DEPTH_EPS - np.exp(new_params.base_depth),
        out=new_params.residual_depth,
    )
    return new_params, OptimizerState(
        m=new_m,
        v=new_v,
        step=t,
        total_steps=state.total_steps,
        warmup_steps=state.warmup_steps,
    )


def optimize_scene(
    bundle: SceneBundle, cfg: OptimizeConfig
) -> tuple[GaussianSet, list[RigidTransform], OptimizationReport]:
    """Optimize one scene end to end and return the recovered model.

    Returns the merged Gaussians in the target frame, the two recovered
    context-to-target poses and a report with the per-step loss trace.
    Raises Diverged when the total loss stays above
    ``divergence_factor x initial`` for ``divergence_patience`` consecutive
    steps and NonFiniteGradient on the first non-finite gradient.
    """
    start = time.perf_counter()
    background = np.asarray(cfg.background, dtype=np.float64)
    params = init_scene_params(bundle, cfg.init)
    state = OptimizerState.fresh(params, cfg)
    rates = cfg.learning_rates()
    trace = np.zeros((cfg.steps, 3))
    initial_total = None
    bad_streak = 0
    for i in range(cfg.steps):
        total, l_proj, l_ren, grads = evaluate_objective(
            params, bundle, cfg.loss, background
        )
        trace[i] = (total, l_proj, l_ren)
        if initial_total is None:
            initial_total = total
        if total > cfg.divergence_factor * initial_total:
            bad_streak += 1
            if bad_streak >= cfg.divergence_patience:
                raise Diverged(
                    f"loss {total:.3e} above {cfg.divergence_factor:.0f}x initial "
                    f"{initial_total:.3e} for {bad_streak} consecutive steps"
                )
        else:
            bad_streak = 0
        params, state = step(
            params,
            grads,
            state,
            rates,
            clip_norm=cfg.clip_norm,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
        )
    gaussians, poses, _ = build_scene(params, bundle)
    errors = None
    if bundle.gt_poses is not None:
        errors = [pose_error(poses[k], bundle.gt_poses[k]) for k in range(2)]
    report = OptimizationReport(
        total=trace[:, 0].copy(),
        projection=trace[:, 1].copy(),
        rendering=trace[:, 2].copy(),
        pose_errors=errors,
        wall_time=time.perf_counter() - start,
        config=config_to_dict(cfg),
    )
    return gaussians, poses, report


def write_report(report: OptimizationReport, out_dir: str | Path) -> None:
    """Write the loss trace as CSV and the summary as JSON.

    Output bytes are a pure function of the run inputs; wall time stays on
    the report object only.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["step,total,projection,rendering"]
    for i in range(report.steps_run):
        lines.append(
            f"{i},{report.total[i]:.17g},{report.projection[i]:.17g},"
            f"{report.rendering[i]:.17g}"
        )
    (out / "losses.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "schema": 1,
        "steps_run": report.steps_run,
        "final": (
            {
                "total": float(report.total[-1]),
                "projection": float(report.projection[-1]),
                "rendering": float(report.rendering[-1]),
            }
            if report.steps_run
            else None
        ),
        "pose_errors": (
            [
                {
                    "rotation_deg": float(e.rotation_deg),
                    "translation_deg": float(e.translation_deg),
                }
                for e in report.pose_errors
            ]
            if report.pose_errors is not None
            else None
        ),
        "config": report.config,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
