"""Scene bundles on disk, the synthetic scene generator, and PLY export.

A scene is a directory with a ``scene.json`` manifest next to 8-bit image
PNGs, 16-bit fixed-point depth PNGs, and optional raw ``.npy`` ground-truth
Gaussian attributes.  All writers produce deterministic bytes for a given
bundle so reruns can be compared with ``cmp``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    DimensionMismatch,
    EmptyRender,
    IoFailure,
    ManifestMissing,
    ShapeMismatch,
)
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, RigidTransform, se3_inverse, so3_exp
from .rasterizer import render

MANIFEST_NAME = "scene.json"
IMAGE_NAMES = ("image_c1.png", "image_t.png", "image_c2.png")
DEPTH_NAMES = ("depth_c1.png", "depth_c2.png")
GAUSSIAN_FIELDS = ("centers", "opacities", "scales", "quats", "sh")
COVERAGE_ALPHA = 0.1
COVERAGE_FRACTION = 0.5


@dataclass
class SceneBundle:
    """Three views of one scene in (c1, t, c2) order plus optional ground truth."""

    images: list[np.ndarray]
    intrinsics: CameraIntrinsics
    seed: int
    gt_poses: list[RigidTransform] | None = None
    gt_depths: list[np.ndarray] | None = None
    gt_gaussians: GaussianSet | None = None

    def __post_init__(self) -> None:
        if len(self.images) != 3:
            raise ShapeMismatch("a bundle holds exactly 3 images (c1, t, c2)")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ShapeMismatch(f"bundle images disagree on shape: {shapes}")
        has_gt = [self.gt_poses is not None, self.gt_depths is not None]
        if any(has_gt) and not all(has_gt):
            raise ShapeMismatch("gt_poses and gt_depths must be given together")

    @property
    def image_c1(self) -> np.ndarray:
        return self.images[0]

    @property
    def image_t(self) -> np.ndarray:
        return self.images[1]

    @property
    def image_c2(self) -> np.ndarray:
        return self.images[2]


@dataclass
class SynthSpec:
    """Knobs for the synthetic ground-truth scene generator."""

    gaussian_count: int = 170
    extent: float = 0.5
    center_depth: float = 6.0
    opacity_range: tuple[float, float] = (0.9, 0.98)
    scale_range: tuple[float, float] = (0.11, 0.17)
    baseline: float = 0.1
    rotation_deg: float | None = None
    image_size: int = 64
    seed: int = 0
    sh_linear_amplitude: float = 0.01

    def __post_init__(self) -> None:
        if self.gaussian_count <= 0 or self.image_size <= 0:
            raise ValueError("counts must be positive")
        if self.baseline < 0.0 or self.extent <= 0.0:
            raise ValueError("baseline must be >= 0 and extent > 0")


def _arc_pose(spec: SynthSpec, s: float) -> RigidTransform:
    # Camera-to-target pose on a smooth arc; s = -1, 0, +1 for c1, t, c2.
    # Positive rotation turns the cameras back toward the scene centre; the
    # default (None) picks the angle that exactly cancels the lateral image
    # shift at center_depth, which maximizes the shared field of view.
    phi = spec.baseline / spec.center_depth
    translation = np.array(
        [s * spec.baseline, 0.0, (1.0 - np.cos(s * phi)) * spec.center_depth]
    )
    if spec.rotation_deg is None:
        angle = np.arctan2(spec.baseline, spec.center_depth - translation[2])
    else:
        angle = np.radians(spec.rotation_deg)
    rotation = so3_exp(np.array([0.0, -angle * s, 0.0]))
    return RigidTransform(rotation, translation)


# Content is sampled wide enough that every camera sees texture out to the
# image border; OVERSCAN_PX adds slack for splat tails beyond the frame.
OVERSCAN_PX = 16.0
# Long-ish synthetic lens: wide fields of view concentrate projective and
# splat-approximation mismatch in the image corners.
FOCAL_FACTOR = 2.0
# Same-layer splats must stay disjoint past the 3-sigma footprint cull so
# their compositing order never matters; extra world-space slack on top.
DISC_CLEARANCE = 0.1
MAX_LAYERS = 12
PLACEMENT_TRIES = 400


def _depth_layers(spec: SynthSpec) -> np.ndarray:
    # Alpha compositing is order dependent, and the view-space depth order of
    # two overlapping splats flips between cameras once their depth gap drops
    # below sin(rotation) times their lateral separation.  Content therefore
    # sits on discrete depth layers spaced safely above that bound; same-layer
    # splats are kept disjoint instead.
    if spec.rotation_deg is None:
        angle = np.arctan2(spec.baseline, spec.center_depth)
    else:
        angle = abs(np.radians(spec.rotation_deg))
    overlap_span = 6.0 * spec.scale_range[1] + DISC_CLEARANCE
    min_gap = 1.6 * np.sin(angle) * overlap_span
    if min_gap > 0.0:
        count = min(MAX_LAYERS, int(spec.extent / min_gap) + 1)
    else:
        count = MAX_LAYERS
    if count < 2:
        return np.array([spec.center_depth])
    offsets = np.linspace(-spec.extent / 2.0, spec.extent / 2.0, count)
    return spec.center_depth + offsets


def _sample_gaussians(spec: SynthSpec, rng: np.random.Generator) -> GaussianSet | None:
    n = spec.gaussian_count
    size = float(spec.image_size)
    focal = FOCAL_FACTOR * size
    layers = _depth_layers(spec)
    layer_of = np.arange(n) % len(layers)
    z = layers[layer_of]
    opacities = rng.uniform(*spec.opacity_range, n)
    # Flat discs facing the target camera, randomly spun in plane: an
    # ellipsoid with real depth extent projects differently from each camera,
    # which the per-pixel single-depth warp model cannot express.
    radii = rng.uniform(*spec.scale_range, (n, 2))
    scales = np.column_stack([radii, np.full(n, 0.02)])
    spin = rng.uniform(0.0, np.pi, n)
    quats = np.column_stack(
        [np.cos(spin / 2.0), np.zeros(n), np.zeros(n), np.sin(spin / 2.0)]
    )
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = rng.uniform(-1.2, 1.2, (n, 3))
    sh[:, 1:, :] = rng.uniform(-spec.sh_linear_amplitude, spec.sh_linear_amplitude, (n, 3, 3))
    xy = np.zeros((n, 2))
    placed: dict[int, list[int]] = {layer: [] for layer in range(len(layers))}
    for i in range(n):
        lateral = (size / 2.0 + OVERSCAN_PX) / focal * z[i] + spec.baseline
        neighbours = placed[layer_of[i]]
        for _ in range(PLACEMENT_TRIES):
            candidate = rng.uniform(-lateral, lateral, 2)
            clearance = 3.0 * (radii[i].max() + radii[neighbours].max(axis=1))
            if neighbours and not (
                np.linalg.norm(xy[neighbours] - candidate, axis=1)
                >= clearance + DISC_CLEARANCE
            ).all():
                continue
            xy[i] = candidate
            placed[layer_of[i]].append(i)
            break
        else:
            return None
    centers = np.column_stack([xy, z])
    return GaussianSet(centers, opacities, scales, quats, sh)


def _fill_uncovered(depth: np.ndarray, covered: np.ndarray, fallback: float) -> np.ndarray:
    # Ground-truth depth is undefined where nothing rendered; propagate the
    # nearest covered value so faint splat tails just under the coverage gate
    # still warp consistently with their own layer.
    if not covered.any():
        return np.full_like(depth, fallback)
    filled = np.where(covered, depth, 0.0)
    known = covered.copy()
    while not known.all():
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            neighbour = np.roll(filled, shift, axis=axis)
            has = np.roll(known, shift, axis=axis)
            if shift == 1:
                index = [slice(None)] * 2
                index[axis] = 0
                has[tuple(index)] = False
            else:
                index = [slice(None)] * 2
                index[axis] = -1
                has[tuple(index)] = False
            take = ~known & has
            filled[take] = neighbour[take]
            known |= take
    return filled


def synthetic_intrinsics(size: int) -> CameraIntrinsics:
    focal = FOCAL_FACTOR * size
    return CameraIntrinsics(
        fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0, width=size, height=size
    )


def generate_synthetic_scene(spec: SynthSpec) -> SceneBundle:
    """Sample a Gaussian scene, render it from 3 arc cameras, record truth.

    Deterministic in ``spec.seed``.  A draw whose renders cover less than
    half of any view (alpha > 0.1) is rejected and redrawn, up to 10 times,
    after which EmptyRender is raised.
    """
    intrinsics = synthetic_intrinsics(spec.image_size)
    background = np.zeros(3)
    poses = [_arc_pose(spec, s) for s in (-1.0, 0.0, 1.0)]
    for attempt in range(10):
        rng = np.random.default_rng([spec.seed, attempt])
        gaussians = _sample_gaussians(spec, rng)
        if gaussians is None:
            continue
        outputs = [
            render(gaussians, intrinsics, se3_inverse(pose), background) for pose in poses
        ]
        coverage = min(
            float((out.alpha > COVERAGE_ALPHA).mean()) for out in outputs
        )
        if coverage < COVERAGE_FRACTION:
            continue
        depths = [
            _fill_uncovered(out.depth, out.alpha > 0.01, spec.center_depth)
            for out in (outputs[0], outputs[2])
        ]
        return SceneBundle(
            images=[outputs[0].color, outputs[1].color, outputs[2].color],
            intrinsics=intrinsics,
            seed=spec.seed,
            gt_poses=[poses[0], poses[2]],
            gt_depths=depths,
            gt_gaussians=gaussians,
        )
    raise EmptyRender(
        f"no draw covered {COVERAGE_FRACTION:.0%} of every view in 10 attempts"
    )


def _quantize_image(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_scene(bundle: SceneBundle, path: str | Path) -> None:
    """Write a bundle into ``path`` as manifest + PNGs (+ raw gt arrays)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cam = bundle.intrinsics
    manifest = {
        "schema": 1,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "images": list(IMAGE_NAMES),
        "seed": bundle.seed,
    }
    for name, img in zip(IMAGE_NAMES, bundle.images):
        Image.fromarray(_quantize_image(img), mode="RGB").save(path / name)
    if bundle.gt_poses is not None:
        manifest["gt_poses"] = [pose.matrix().tolist() for pose in bundle.gt_poses]
        lo = min(float(d.min()) for d in bundle.gt_depths)
        hi = max(float(d.max()) for d in bundle.gt_depths)
        span = max(hi - lo, 1e-12)
        manifest["depth_range"] = [lo, hi]
        manifest["depths"] = list(DEPTH_NAMES)
        for name, depth in zip(DEPTH_NAMES, bundle.gt_depths):
            codes = np.round((depth - lo) / span * 65535.0).astype(np.uint16)
            Image.fromarray(codes).save(path / name)
    if bundle.gt_gaussians is not None:
        manifest["gt_gaussians"] = True
        g = bundle.gt_gaussians
        for field_name in GAUSSIAN_FIELDS:
            np.save(path / f"gt_{field_name}.npy", getattr(g, field_name))
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (path / MANIFEST_NAME).write_text(text + "\n")


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise CorruptImage(f"failed to decode {path}: {exc}") from exc


def load_scene(path: str | Path) -> SceneBundle:
    """Inverse of :func:`save_scene` up to the stated quantization."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestMissing(f"no {MANIFEST_NAME} under {path}")
    manifest = json.loads(manifest_path.read_text())
    cam = CameraIntrinsics(
        fx=manifest["fx"],
        fy=manifest["fy"],
        cx=manifest["cx"],
        cy=manifest["cy"],
        width=manifest["width"],
        height=manifest["height"],
    )
    images = []
    for name in manifest["images"]:
        raw = _load_image(path / name)
        if raw.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatch(
                f"{name} is {raw.shape[1]}x{raw.shape[0]}, manifest says "
                f"{cam.width}x{cam.height}"
            )
        images.append(raw.astype(np.float64) / 255.0)
    gt_poses = None
    gt_depths = None
    if "gt_poses" in manifest:
        gt_poses = []
        for mat in manifest["gt_poses"]:
            mat = np.asarray(mat, dtype=np.float64)
            gt_poses.append(RigidTransform(mat[:3, :3], mat[:3, 3]))
        lo, hi = manifest["depth_range"]
        span = max(hi - lo, 1e-12)
        gt_depths = []
        for name in manifest["depths"]:
            raw = _load_image(path / name)
            if raw.shape != (cam.height, cam.width):
                raise DimensionMismatch(f"{name} disagrees with manifest dimensions")
            gt_depths.append(lo + raw.astype(np.float64) / 65535.0 * span)
    gt_gaussians = None
    if manifest.get("gt_gaussians"):
        arrays = {f: np.load(path / f"gt_{f}.npy") for f in GAUSSIAN_FIELDS}
        gt_gaussians = GaussianSet(**arrays)
    return SceneBundle(
        images=images,
        intrinsics=cam,
        seed=manifest["seed"],
        gt_poses=gt_poses,
        gt_depths=gt_depths,
        gt_gaussians=gt_gaussians,
    )


PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(9)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)


def export_ply(gaussians: GaussianSet, path: str | Path) -> None:
    """Write the set in the splat-viewer PLY layout (binary little-endian).

    Opacity is stored as its logit and scales as logs, matching how common
    viewers re-apply the activations on load.
    """
    n = len(gaussians)
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        + [f"property float {p}" for p in PLY_PROPERTIES]
        + ["end_header", ""]
    )
    rows = np.zeros((n, len(PLY_PROPERTIES)), dtype="<f4")
    if n:
        rows[:, 0:3] = gaussians.centers
        rows[:, 6:9] = gaussians.sh[:, 0, :]
        rows[:, 9:18] = gaussians.sh[:, 1:4, :].transpose(0, 2, 1).reshape(n, 9)
        alpha = gaussians.opacities
        rows[:, 18] = np.log(alpha / (1.0 - alpha))
        rows[:, 19:22] = np.log(gaussians.scales)
        rows[:, 22:26] = gaussians.quats
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rows.tobytes())
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def import_ply(path: str | Path) -> GaussianSet:
    """Read back a PLY written by :func:`export_ply`."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"failed to read {path}: {exc}") from exc
    marker = b"end_header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise IoFailure(f"{path} has no PLY header")
    header_lines = blob[:cut].decode("ascii").splitlines()
    count = None
    for line in header_lines:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    props = [line.split()[-1] for line in header_lines if line.startswith("property")]
    if count is None or props != list(PLY_PROPERTIES):
        raise IoFailure(f"{path} does not match the expected vertex layout")
    rows = np.frombuffer(blob[cut + len(marker) :], dtype="<f4").reshape(
        count, len(PLY_PROPERTIES)
    ).astype(np.float64)
    if count == 0:
        return GaussianSet.empty()
    sh = np.zeros((count, 4, 3))
    sh[:, 0, :] = rows[:, 6:9]
    sh[:, 1:4, :] = rows[:, 9:18].reshape(count, 3, 3).transpose(0, 2, 1)
    return GaussianSet(
        centers=rows[:, 0:3],
        opacities=1.0 / (1.0 + np.exp(-rows[:, 18])),
        scales=np.exp(rows[:, 19:22]),
        quats=rows[:, 22:26],
        sh=sh,
    )
