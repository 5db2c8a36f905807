import filecmp
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_scene
from splatgeo.errors import (
    CorruptImage,
    DimensionMismatch,
    EmptyRender,
    ManifestMissing,
    ShapeMismatch,
)
from splatgeo.gaussians import GaussianSet
from splatgeo.geometry import RigidTransform, se3_inverse, so3_exp
from splatgeo.photometric import LossConfig, reprojection_loss
from splatgeo.rasterizer import render
from splatgeo.scene_io import (
    IMAGE_NAMES,
    MANIFEST_NAME,
    PLY_PROPERTIES,
    SceneBundle,
    SynthSpec,
    _fill_uncovered,
    export_ply,
    generate_synthetic_scene,
    import_ply,
    load_scene,
    save_scene,
    synthetic_intrinsics,
)


def rendered_target_depth(bundle):
    out = render(
        bundle.gt_gaussians, bundle.intrinsics, RigidTransform.identity(), np.zeros(3)
    )
    return _fill_uncovered(out.depth, out.alpha > 0.01, 6.0)


def bundle_arrays(bundle):
    yield from bundle.images
    yield from bundle.gt_depths
    for pose in bundle.gt_poses:
        yield pose.matrix()
    for field in ("centers", "opacities", "scales", "quats", "sh"):
        yield getattr(bundle.gt_gaussians, field)


def test_synthetic_intrinsics_square_pinhole():
    cam = synthetic_intrinsics(64)
    assert (cam.fx, cam.fy) == (128.0, 128.0)
    assert (cam.cx, cam.cy) == (32.0, 32.0)
    assert (cam.width, cam.height) == (64, 64)


def test_generate_shapes_and_ranges():
    spec = SynthSpec(seed=11)
    bundle = generate_synthetic_scene(spec)
    for img in bundle.images:
        assert img.shape == (64, 64, 3)
        assert img.dtype == np.float64
        assert img.min() >= 0.0 and img.max() <= 1.0
    for depth in bundle.gt_depths:
        assert depth.shape == (64, 64)
        assert depth.min() > spec.center_depth - spec.extent
        assert depth.max() < spec.center_depth + spec.extent
    assert len(bundle.gt_gaussians) == spec.gaussian_count
    assert bundle.seed == 11


def test_same_seed_bit_identical():
    a = generate_synthetic_scene(SynthSpec(seed=5))
    b = generate_synthetic_scene(SynthSpec(seed=5))
    for x, y in zip(bundle_arrays(a), bundle_arrays(b)):
        assert np.array_equal(x, y)


def test_same_seed_bit_identical_on_disk(tmp_path):
    for sub in ("a", "b"):
        save_scene(generate_synthetic_scene(SynthSpec(seed=5)), tmp_path / sub)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "a", tmp_path / "b", names, shallow=False
    )
    assert sorted(match) == names and not mismatch and not errors


def test_distinct_seeds_differ():
    a = generate_synthetic_scene(SynthSpec(seed=0))
    b = generate_synthetic_scene(SynthSpec(seed=1))
    assert not np.array_equal(a.image_t, b.image_t)


@pytest.mark.parametrize("rotation_deg", [None, 0.0])
def test_zero_motion_gives_three_identical_views(rotation_deg):
    spec = SynthSpec(baseline=0.0, rotation_deg=rotation_deg, seed=2)
    bundle = generate_synthetic_scene(spec)
    assert np.array_equal(bundle.image_c1, bundle.image_t)
    assert np.array_equal(bundle.image_c2, bundle.image_t)
    assert np.allclose(bundle.gt_poses[0].matrix(), np.eye(4), atol=1e-15)


def test_rotation_override_sets_pose_angle():
    bundle = generate_synthetic_scene(SynthSpec(rotation_deg=1.0, seed=3))
    rot = bundle.gt_poses[0].rotation
    angle = np.arccos(np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0))
    assert angle == pytest.approx(np.radians(1.0), abs=1e-12)


def test_default_arc_looks_at_scene_centre():
    spec = SynthSpec(seed=4)
    bundle = generate_synthetic_scene(spec)
    centre = np.array([0.0, 0.0, spec.center_depth])
    for pose in bundle.gt_poses:
        in_cam = se3_inverse(pose).apply(centre[None])[0]
        assert abs(in_cam[0]) < 1e-12 and abs(in_cam[1]) < 1e-12
        assert in_cam[2] > 0.0


def test_rendered_depth_matches_layer_at_isolated_centers():
    # A splat counts as isolated when every other splat's compositing weight
    # at its centre pixel is bounded below 0.015, so blending can shift the
    # depth there by at most ~ extent * 0.015 / alpha < 1e-2.  Weights upper-
    # bound the renderer: major-axis sigma everywhere, zero beyond the 3-sigma
    # cull, transmittance ignored.
    hits = 0
    for seed in range(15):
        bundle = generate_synthetic_scene(SynthSpec(seed=seed))
        g = bundle.gt_gaussians
        cam = bundle.intrinsics
        depth = rendered_target_depth(bundle)
        z = g.centers[:, 2]
        u = cam.fx * g.centers[:, 0] / z + cam.cx
        v = cam.fy * g.centers[:, 1] / z + cam.cy
        sigma_px = np.sqrt((g.scales[:, :2].max(axis=1) * cam.fx / z) ** 2 + 0.3)
        for i in range(len(g)):
            if not (3.0 <= u[i] <= cam.width - 3.0 and 3.0 <= v[i] <= cam.height - 3.0):
                continue
            d2 = (u - u[i]) ** 2 + (v - v[i]) ** 2
            weights = np.where(
                d2 <= (3.0 * sigma_px) ** 2,
                g.opacities * np.exp(-d2 / (2.0 * sigma_px**2)),
                0.0,
            )
            weights[i] = 0.0
            if weights.sum() >= 0.015:
                continue
            iy = int(round(v[i] - 0.5))
            ix = int(round(u[i] - 0.5))
            assert abs(depth[iy, ix] - z[i]) < 1e-2
            hits += 1
    assert hits >= 8


@pytest.mark.parametrize("seed", range(10))
def test_reprojection_floor_on_ground_truth(seed):
    bundle = generate_synthetic_scene(SynthSpec(seed=seed))
    loss = reprojection_loss(
        bundle.image_t,
        bundle.image_c1,
        bundle.image_c2,
        rendered_target_depth(bundle),
        bundle.gt_poses[0],
        bundle.gt_poses[1],
        bundle.intrinsics,
        LossConfig(),
    )
    assert 0.0 < loss < 1e-3


def test_one_degree_pose_error_increases_loss():
    cfg = LossConfig()
    for seed in range(10):
        bundle = generate_synthetic_scene(SynthSpec(seed=seed))
        depth = rendered_target_depth(bundle)
        args = (bundle.image_t, bundle.image_c1, bundle.image_c2, depth)
        base = reprojection_loss(
            *args, bundle.gt_poses[0], bundle.gt_poses[1], bundle.intrinsics, cfg
        )
        axis = np.random.default_rng(seed).normal(size=3)
        axis *= np.radians(1.0) / np.linalg.norm(axis)
        true = bundle.gt_poses[0]
        bent = RigidTransform(true.rotation @ so3_exp(axis), true.translation)
        off = reprojection_loss(
            *args, bent, bundle.gt_poses[1], bundle.intrinsics, cfg
        )
        assert off > base


def test_empty_render_when_coverage_unreachable():
    with pytest.raises(EmptyRender):
        generate_synthetic_scene(SynthSpec(gaussian_count=3, seed=0))


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(gaussian_count=0)
    with pytest.raises(ValueError):
        SynthSpec(baseline=-0.1)
    with pytest.raises(ValueError):
        SynthSpec(extent=0.0)


def test_fill_uncovered_constant_when_nothing_covered():
    depth = np.zeros((4, 4))
    filled = _fill_uncovered(depth, np.zeros((4, 4), dtype=bool), 6.0)
    assert np.array_equal(filled, np.full((4, 4), 6.0))


def test_fill_uncovered_propagates_nearest():
    depth = np.zeros((3, 5))
    depth[:, 0] = 2.0
    depth[:, 4] = 5.0
    covered = np.zeros((3, 5), dtype=bool)
    covered[:, 0] = True
    covered[:, 4] = True
    filled = _fill_uncovered(depth, covered, 9.0)
    assert np.array_equal(filled[:, 0], np.full(3, 2.0))
    assert np.array_equal(filled[:, 1], np.full(3, 2.0))
    assert np.array_equal(filled[:, 3], np.full(3, 5.0))
    assert set(np.unique(filled)) <= {2.0, 5.0}


def test_bundle_gt_fields_come_together():
    images = [np.zeros((4, 4, 3))] * 3
    cam = synthetic_intrinsics(4)
    with pytest.raises(ShapeMismatch):
        SceneBundle(
            images=images,
            intrinsics=cam,
            seed=0,
            gt_poses=[RigidTransform.identity(), RigidTransform.identity()],
        )
    with pytest.raises(ShapeMismatch):
        SceneBundle(images=images[:2], intrinsics=cam, seed=0)
    with pytest.raises(ShapeMismatch):
        SceneBundle(
            images=[np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((2, 4, 3))],
            intrinsics=cam,
            seed=0,
        )


def test_save_load_round_trip(tmp_path):
    bundle = generate_synthetic_scene(SynthSpec(seed=3))
    save_scene(bundle, tmp_path / "scene")
    back = load_scene(tmp_path / "scene")
    assert back.seed == bundle.seed
    assert back.intrinsics == bundle.intrinsics
    for orig, loaded in zip(bundle.images, back.images):
        quantized = np.clip(np.round(orig * 255.0), 0, 255) / 255.0
        assert np.array_equal(loaded, quantized)
    lo = min(float(d.min()) for d in bundle.gt_depths)
    hi = max(float(d.max()) for d in bundle.gt_depths)
    step = (hi - lo) / 65535.0
    for orig, loaded in zip(bundle.gt_depths, back.gt_depths):
        assert np.abs(loaded - orig).max() <= 0.5 * step + 1e-12
    for orig, loaded in zip(bundle.gt_poses, back.gt_poses):
        assert np.array_equal(orig.matrix(), loaded.matrix())
    for field in ("centers", "opacities", "scales", "quats", "sh"):
        assert np.array_equal(
            getattr(bundle.gt_gaussians, field), getattr(back.gt_gaussians, field)
        )


def test_save_load_without_ground_truth(tmp_path):
    source = generate_synthetic_scene(SynthSpec(seed=3))
    bundle = SceneBundle(images=source.images, intrinsics=source.intrinsics, seed=3)
    save_scene(bundle, tmp_path / "scene")
    back = load_scene(tmp_path / "scene")
    assert back.gt_poses is None and back.gt_depths is None
    assert back.gt_gaussians is None


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ManifestMissing):
        load_scene(tmp_path)


def test_load_corrupt_image(tmp_path):
    save_scene(generate_synthetic_scene(SynthSpec(seed=3)), tmp_path / "scene")
    (tmp_path / "scene" / IMAGE_NAMES[1]).write_bytes(b"not a png at all")
    with pytest.raises(CorruptImage):
        load_scene(tmp_path / "scene")


def test_load_dimension_mismatch(tmp_path):
    save_scene(generate_synthetic_scene(SynthSpec(seed=3)), tmp_path / "scene")
    manifest_path = tmp_path / "scene" / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text())
    manifest["width"] *= 2
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DimensionMismatch):
        load_scene(tmp_path / "scene")


def test_export_ply_empty(tmp_path):
    path = tmp_path / "empty.ply"
    export_ply(GaussianSet.empty(), path)
    blob = path.read_bytes()
    assert b"element vertex 0" in blob
    assert len(import_ply(path)) == 0


def test_ply_alpha_half_stores_zero_logit(tmp_path):
    g = GaussianSet(
        centers=np.zeros((1, 3)),
        opacities=np.array([0.5]),
        scales=np.ones((1, 3)),
        quats=np.array([[1.0, 0.0, 0.0, 0.0]]),
        sh=np.zeros((1, 4, 3)),
    )
    path = tmp_path / "one.ply"
    export_ply(g, path)
    blob = path.read_bytes()
    payload = blob[blob.find(b"end_header\n") + len(b"end_header\n") :]
    row = struct.unpack(f"<{len(PLY_PROPERTIES)}f", payload)
    assert row[PLY_PROPERTIES.index("opacity")] == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ply_round_trip_within_float32(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    gaussians, _, _, _ = random_scene(rng, n=int(rng.integers(1, 30)))
    path = tmp_path_factory.mktemp("ply") / "set.ply"
    export_ply(gaussians, path)
    back = import_ply(path)
    assert len(back) == len(gaussians)
    assert np.array_equal(back.centers, gaussians.centers.astype("<f4"))
    assert np.array_equal(back.sh, gaussians.sh.astype("<f4"))
    assert np.allclose(back.opacities, gaussians.opacities, rtol=1e-5, atol=1e-7)
    assert np.allclose(back.scales, gaussians.scales, rtol=1e-5)
    assert np.allclose(back.quats, gaussians.quats, rtol=0, atol=1e-6)
