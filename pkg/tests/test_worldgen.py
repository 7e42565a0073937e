# tests/test_worldgen.py
# Procedural scenes, ray-cast views, reference warps and edit operators

import numpy as np
import pytest

from app.models.scene import CameraTrajectory, Material, Primitive, Scene, interleaved_clips
from app.services.worldgen_service import (
    EDIT_REGISTRY, N_EDIT_CODES, NEAR, PALETTE, apply_edit, describe_scene, generate_scene, get_oracle, gt_mask,
    load_scene_json, load_viewset, make_render_maps, make_trajectory, project, render_views, reproject,
    save_scene_json, save_viewset, unproject,
)
from app.utils.error_handler import DataValidationError, DegenerateCameraError, UnknownEditCodeError


# === SCENES ===

def test_generate_scene_is_deterministic():
    assert generate_scene(7, 'medium') == generate_scene(7, 'medium')
    assert generate_scene(7, 'medium') != generate_scene(8, 'medium')


def test_scene_complexity():
    assert len(generate_scene(0, 'small').primitives) == 1
    for seed in range(5):
        scene = generate_scene(seed, 'medium')
        assert len(scene.primitives) >= 3
        assert scene.primitives[0].center == (0.0, 0.0, 0.0)


def test_generate_scene_rejects_bad_input():
    with pytest.raises(DataValidationError):
        generate_scene(-1)
    with pytest.raises(DataValidationError):
        generate_scene(0, 'large')


def test_describe_scene_tokens():
    tokens = describe_scene(generate_scene(0, 'small'))
    assert len(tokens) == 1
    assert tokens[0].startswith('sphere:')


# === CAMERAS AND RENDERING ===

def test_trajectory_orbits_the_target():
    traj = make_trajectory(n_views=5, radius=4.0, fov_deg=50.0)
    for i in range(traj.n):
        assert np.linalg.norm(traj.camera_center(i)) == pytest.approx(4.0)
        assert np.allclose(traj.rotations[i] @ traj.rotations[i].T, np.eye(3))
    r_rel, t_rel = traj.relative_pose(0)
    assert np.allclose(r_rel, np.eye(3)) and np.allclose(t_rel, 0.0)
    K = traj.intrinsics.matrix((16, 32))
    focal = 0.5 / np.tan(np.deg2rad(25.0))
    assert K[0, 0] == pytest.approx(32 * focal) and K[1, 1] == pytest.approx(16 * focal)
    assert (K[0, 2], K[1, 2]) == (16.0, 8.0)


def test_clip_layout_of_the_default_trajectory():
    clips = interleaved_clips(49, 25)
    assert clips == [[0] + list(range(1, 49, 2)), [0] + list(range(2, 49, 2))]
    assert all(len(c) <= 25 for c in clips)


def test_render_views_shapes_and_background(world):
    scene, traj, views = world
    assert views.images.shape == (5, 16, 16, 3)
    assert views.clip_layout == [[0, 1, 3], [0, 2, 4]]
    background = ~views.foreground
    assert background.any() and views.foreground.any()
    assert np.all(views.depths[background] == 0.0)
    assert np.all(views.depths[views.foreground] > 0.0)
    assert np.allclose(views.images[background], np.asarray(scene.background_color))
    assert views.images.min() >= 0.0 and views.images.max() <= 1.0


def test_render_views_rejects_small_resolution(world):
    scene, traj, _ = world
    with pytest.raises(DataValidationError):
        render_views(scene, traj, (8, 16))


def test_cameras_facing_away_are_rejected():
    scene = generate_scene(0, 'small')
    traj = make_trajectory(n_views=3, azimuth_span_deg=10.0, target=(0.0, 0.0, -100.0))
    with pytest.raises(DegenerateCameraError):
        render_views(scene, traj, (16, 16))


# === WARPS ===

def test_render_map_of_the_reference_is_the_reference(views):
    maps = make_render_maps(views)
    fg = views.foreground[0]
    assert np.array_equal(maps.validity[0], fg)
    assert np.allclose(maps.warped[0][fg], views.images[0][fg])


def test_render_map_invalid_pixels_hold_background(views):
    maps = make_render_maps(views)
    background = np.asarray(views.background_color)
    for i in range(views.n):
        assert np.all(maps.warped[i][~maps.validity[i]] == background)


def test_render_map_keeps_the_nearest_point(medium_world):
    _, traj, views = medium_world
    h, w = views.res
    fg = views.depths[0] > 0
    # reference colours encode the reference pixel index so the winner can be read back
    code = np.zeros((h, w, 3))
    code[..., 0] = (np.arange(h * w) + 1).reshape(h, w) / (h * w)
    maps = make_render_maps(views, code)
    points = unproject(views.depths[0], traj.rotations[0], traj.translations[0], traj.intrinsics)[fg]
    point_ids = np.flatnonzero(fg.reshape(-1))
    collisions = 0
    for i in range(views.n):
        u, v, z = project(points, traj.rotations[i], traj.translations[i], traj.intrinsics, (h, w))
        col, row = np.floor(u).astype(int), np.floor(v).astype(int)
        nearest = {}
        for p in range(len(points)):
            if z[p] > NEAR and 0 <= col[p] < w and 0 <= row[p] < h:
                key = (row[p], col[p])
                nearest.setdefault(key, []).append(z[p])
        valid = {tuple(rc) for rc in np.argwhere(maps.validity[i])}
        assert valid == set(nearest)
        for (r, c), depths in nearest.items():
            collisions += len(depths) > 1
            winner = int(round(maps.warped[i, r, c, 0] * h * w)) - 1
            assert z[np.searchsorted(point_ids, winner)] == min(depths)
    assert collisions > 0


def test_validity_shrinks_as_the_camera_backs_away():
    scene = generate_scene(2, 'small')
    orbit = make_trajectory(n_views=2, azimuth_span_deg=10.0)
    rotation, translation = orbit.rotations[0], orbit.translations[0]
    # moving the camera back along its optical axis adds to the z translation
    traj = CameraTrajectory(np.stack([rotation] * 4),
                            np.stack([translation + np.array([0.0, 0.0, d]) for d in range(4)]),
                            orbit.intrinsics)
    views = render_views(scene, traj, (32, 32))
    counts = make_render_maps(views).validity.sum(axis=(1, 2))
    assert counts[0] == views.foreground[0].sum()
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_render_map_rejects_wrong_reference_shape(views):
    with pytest.raises(DataValidationError):
        make_render_maps(views, np.zeros((8, 8, 3)))


def test_reproject_onto_itself_is_identity(views):
    warped, covisible = reproject(views, views.images, 0, 0)
    assert np.array_equal(covisible, views.foreground[0])
    assert np.allclose(warped[covisible], views.images[0][covisible])


def test_neighbouring_views_share_covisible_pixels(views):
    _, covisible = reproject(views, views.images, 0, 1)
    assert covisible.any()
    assert not (covisible & ~views.foreground[1]).any()


# === EDITS ===

def test_registry_codes():
    assert N_EDIT_CODES == len(EDIT_REGISTRY) == 6
    assert get_oracle(0).name == 'identity'
    assert get_oracle(5).is_geometry
    for bad in (6, -1, 'x', None):
        with pytest.raises(UnknownEditCodeError):
            get_oracle(bad)


def test_recolor_is_idempotent():
    scene = generate_scene(4, 'medium')
    for code in (1, 2, 3):
        once = apply_edit(scene, code)
        assert apply_edit(once, code) == once
        assert once.primitives[1:] == scene.primitives[1:]


def test_recolor_to_red_on_a_blue_sphere():
    sphere = Primitive('sphere', (0.0, 0.0, 0.0), (0.9, 0.9, 0.9), Material(albedo=PALETTE['blue']))
    scene = Scene((sphere,), (0.1, 0.1, 0.1), seed=0)
    traj = make_trajectory(n_views=2, elevation_deg=0.0, azimuth_span_deg=0.0)
    before = render_views(scene, traj, (64, 64))
    after = render_views(apply_edit(scene, 1), traj, (64, 64))
    assert before.images[:, 32, 32, 0].max() < 0.2
    assert np.all(after.images[:, 32, 32, 0] > 0.8)
    assert np.array_equal(after.ids, before.ids)


def test_swap_material_toggles():
    scene = generate_scene(4, 'small')
    swapped = apply_edit(scene, 4)
    assert swapped.primitives[0].material.pattern == 'stripes'
    assert apply_edit(swapped, 4).primitives[0].material.pattern == 'solid'


def test_add_primitive_appends_one_primitive():
    scene = generate_scene(4, 'small')
    edited = apply_edit(scene, get_oracle(5))
    assert len(edited.primitives) == 2
    assert edited.primitives[0] == scene.primitives[0]


def test_add_primitive_grows_the_silhouette(world):
    scene, traj, views = world
    edited = render_views(apply_edit(scene, 5), traj, views.res)
    assert np.all(edited.foreground.sum(axis=(1, 2)) > views.foreground.sum(axis=(1, 2)))


def test_gt_mask(world):
    scene, traj, views = world
    assert not gt_mask(scene, 0, traj, views.res).any()
    assert np.array_equal(gt_mask(scene, 1, traj, views.res), views.ids == 0)


# === SERIALISATION ===

def test_scene_document_round_trip(tmp_path, world):
    scene, traj, _ = world
    save_scene_json(tmp_path / 'scene.json', scene, traj)
    loaded_scene, loaded_traj = load_scene_json(tmp_path / 'scene.json')
    assert loaded_scene == scene
    assert np.allclose(loaded_traj.rotations, traj.rotations)


def test_viewset_on_disk(tmp_path, views):
    save_viewset(tmp_path / 'views', views)
    loaded = load_viewset(tmp_path / 'views')
    assert loaded.clip_layout == views.clip_layout
    assert np.array_equal(loaded.ids, views.ids)
    assert np.max(np.abs(loaded.images - views.images)) <= 0.5 / 255 + 1e-9
    assert np.allclose(loaded.depths, views.depths, rtol=1e-6)
