# app/services/worldgen_service.py
# Procedural worlds: scene generation, camera trajectories, analytic ray-cast
# rendering with ground-truth depth, render maps (reference view warped into
# every pose), ground-truth edit operators and region masks

import json
import logging
from pathlib import Path

import numpy as np

from app.models.scene import (
    SCENE_FORMAT_VERSION, CameraTrajectory, EditOracle, Intrinsics, Material,
    Primitive, RenderMap, Scene, ViewSet, interleaved_clips,
)
from app.utils.error_handler import (
    DataProcessingError, DataValidationError, DegenerateCameraError, UnknownEditCodeError,
)
from app.utils.formats import read_depth, write_depth
from app.utils.helpers import load_png, save_png

logger = logging.getLogger(__name__)

NEAR = 1e-3
LIGHT_DIR = np.array([0.25, 0.5, -0.83]) / np.linalg.norm([0.25, 0.5, -0.83])
AMBIENT = 0.3
DIFFUSE = 0.7

# Named colours used both for generation and for scene descriptions
PALETTE = {
    'red': (1.0, 0.12, 0.12),
    'green': (0.15, 0.75, 0.2),
    'blue': (0.12, 0.25, 0.95),
    'yellow': (0.95, 0.9, 0.15),
    'gold': (0.95, 0.7, 0.2),
    'white': (0.95, 0.95, 0.95),
    'gray': (0.5, 0.5, 0.5),
    'purple': (0.6, 0.2, 0.8),
    'cyan': (0.15, 0.85, 0.9),
}
SUBJECT_COLORS = ('green', 'blue', 'white', 'purple', 'cyan', 'gray')


# === SCENES ===

def generate_scene(seed, complexity='small'):
    """
    Build a deterministic procedural scene

    'small' holds a single subject primitive; 'medium' adds a ground plane
    and one to three satellite solids (at least three primitives in total).
    Primitive 0 is always the subject that the edit operators target.

    Args:
        seed (int): non-negative seed
        complexity (str): 'small' or 'medium'

    Returns:
        Scene
    """
    if seed < 0:
        raise DataValidationError("seed must be non-negative")
    if complexity not in ('small', 'medium'):
        raise DataValidationError(f"unknown complexity {complexity!r}")

    rng = np.random.default_rng(seed)
    background = tuple(float(v) for v in rng.uniform(0.05, 0.25, size=3))

    subject_kind = 'sphere' if complexity == 'small' or rng.random() < 0.6 else 'box'
    subject_color = PALETTE[SUBJECT_COLORS[rng.integers(len(SUBJECT_COLORS))]]
    if subject_kind == 'sphere':
        radius = float(rng.uniform(0.8, 1.1))
        size = (radius, radius, radius)
    else:
        size = tuple(float(v) for v in rng.uniform(0.55, 0.8, size=3))
    subject = Primitive(
        kind=subject_kind,
        center=(0.0, 0.0, 0.0),
        size=size,
        yaw=float(rng.uniform(-0.6, 0.6)) if subject_kind == 'box' else 0.0,
        material=Material(albedo=subject_color),
    )
    primitives = [subject]

    if complexity == 'medium':
        floor_color = tuple(float(v) for v in rng.uniform(0.35, 0.6, size=3))
        primitives.append(Primitive(
            kind='plane',
            center=(0.0, -1.15, 0.0),
            size=(2.8, 0.0, 2.8),
            material=Material(albedo=floor_color, pattern='stripes',
                              pattern_color=(0.9, 0.9, 0.85), pattern_freq=0.5),
        ))
        n_extra = int(rng.integers(1, 4))
        angles = rng.permutation(np.linspace(0.0, 2.0 * np.pi, 6, endpoint=False))[:n_extra]
        for angle in angles:
            ring = float(rng.uniform(1.7, 2.2))
            kind = 'sphere' if rng.random() < 0.5 else 'box'
            extent = float(rng.uniform(0.3, 0.45))
            color = PALETTE[list(PALETTE)[rng.integers(len(PALETTE))]]
            primitives.append(Primitive(
                kind=kind,
                center=(ring * float(np.sin(angle)), -1.15 + extent, ring * float(np.cos(angle))),
                size=(extent, extent, extent),
                yaw=float(rng.uniform(-0.8, 0.8)) if kind == 'box' else 0.0,
                material=Material(albedo=color),
            ))

    return Scene(primitives=tuple(primitives), background_color=background, seed=int(seed))


def describe_scene(scene):
    """
    Tokens describing the scene factors: shape, colour name and pattern of
    every primitive (used by the toy embedder)
    """
    tokens = []
    for prim in scene.primitives:
        tokens.append(f"{prim.kind}:{color_name(prim.material.albedo)}")
        if prim.material.pattern != 'solid':
            tokens.append(f"{prim.kind}:{prim.material.pattern}")
    return sorted(tokens)


def color_name(rgb):
    """Nearest palette name of an RGB triple"""
    rgb = np.asarray(rgb)
    names = list(PALETTE)
    dists = [float(np.sum((rgb - np.asarray(PALETTE[n])) ** 2)) for n in names]
    return names[int(np.argmin(dists))]


# === CAMERAS ===

def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """World-to-camera (R, t) for a camera at eye looking at target"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise DataValidationError("camera looks along the up vector")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ eye


def make_trajectory(n_views=49, radius=4.0, elevation_deg=20.0, azimuth_span_deg=120.0,
                    fov_deg=50.0, target=(0.0, 0.0, 0.0)):
    """
    Orbit trajectory sweeping the azimuth; pose 0 starts the sweep and is the reference

    Returns:
        CameraTrajectory
    """
    if n_views < 2:
        raise DataValidationError("n_views must be at least 2")
    elevation = np.deg2rad(elevation_deg)
    azimuths = np.deg2rad(np.linspace(-azimuth_span_deg / 2.0, azimuth_span_deg / 2.0, n_views))
    rotations, translations = [], []
    for az in azimuths:
        eye = (
            radius * np.cos(elevation) * np.sin(az),
            radius * np.sin(elevation),
            -radius * np.cos(elevation) * np.cos(az),
        )
        r, t = look_at(eye, target)
        rotations.append(r)
        translations.append(t)
    focal = 0.5 / np.tan(np.deg2rad(fov_deg) / 2.0)
    return CameraTrajectory(np.array(rotations), np.array(translations), Intrinsics(focal, focal))


# === RAY CASTING ===

def _pixel_rays(rotation, translation, intrinsics, res):
    """Camera centre and world-space ray directions scaled so that depth == ray parameter"""
    h, w = res
    fx, fy, cx, cy = intrinsics.pixel(res)
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing='ij')
    dirs_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ rotation      # rows: Rᵀ d
    origin = -rotation.T @ translation
    return origin, dirs_world


def _hit_sphere(origin, dirs, prim):
    center = np.asarray(prim.center)
    radius = prim.size[0]
    oc = origin - center
    a = np.einsum('ij,ij->i', dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    s_near = (-b - sq) / (2.0 * a)
    s_far = (-b + sq) / (2.0 * a)
    s = np.where(s_near > NEAR, s_near, s_far)
    hit &= s > NEAR
    points = origin + s[:, None] * dirs
    normals = (points - center) / radius
    return np.where(hit, s, np.inf), normals


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _hit_box(origin, dirs, prim):
    rot = _yaw_matrix(prim.yaw)
    half = np.asarray(prim.size)
    o_local = rot.T @ (origin - np.asarray(prim.center))
    d_local = dirs @ rot
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (-half - o_local) / d_local
        t2 = (half - o_local) / d_local
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    t_lo = np.where(np.isnan(t_lo), -np.inf, t_lo)
    t_hi = np.where(np.isnan(t_hi), np.inf, t_hi)
    t_enter = t_lo.max(axis=1)
    t_exit = t_hi.min(axis=1)
    s = np.where(t_enter > NEAR, t_enter, t_exit)
    hit = (t_exit >= t_enter) & (s > NEAR)
    axis = np.where(t_enter > NEAR, t_lo.argmax(axis=1), t_hi.argmin(axis=1))
    normals_local = np.zeros_like(dirs)
    rows = np.arange(dirs.shape[0])
    normals_local[rows, axis] = -np.sign(d_local[rows, axis])
    return np.where(hit, s, np.inf), normals_local @ rot.T


def _hit_plane(origin, dirs, prim):
    cx, cy, cz = prim.center
    with np.errstate(divide='ignore', invalid='ignore'):
        s = (cy - origin[1]) / dirs[:, 1]
    points = origin + np.nan_to_num(s, nan=0.0, posinf=0.0, neginf=0.0)[:, None] * dirs
    hit = np.isfinite(s) & (s > NEAR)
    hit &= (np.abs(points[:, 0] - cx) <= prim.size[0]) & (np.abs(points[:, 2] - cz) <= prim.size[2])
    normal = np.array([0.0, 1.0 if origin[1] > cy else -1.0, 0.0])
    return np.where(hit, s, np.inf), np.broadcast_to(normal, dirs.shape)


_HIT = {'sphere': _hit_sphere, 'box': _hit_box, 'plane': _hit_plane}


def shade(prim, points, normals):
    """Lambertian colour of surface points of one primitive under the fixed world light"""
    mat = prim.material
    albedo = np.broadcast_to(np.asarray(mat.albedo), points.shape).copy()
    if mat.pattern == 'stripes':
        weight = 0.3 * (1.0 + np.sin(2.0 * np.pi * mat.pattern_freq * points[:, 0]))
        albedo = albedo * (1.0 - weight[:, None]) + np.asarray(mat.pattern_color) * weight[:, None]
    lambert = np.clip(normals @ LIGHT_DIR, 0.0, None)
    return albedo * (AMBIENT + DIFFUSE * lambert)[:, None]


def render_view(scene, rotation, translation, intrinsics, res):
    """
    Ray-cast one view

    Returns:
        tuple: (image H×W×3, depth H×W with 0 on background, ids H×W with -1 on background)
    """
    h, w = res
    origin, dirs = _pixel_rays(rotation, translation, intrinsics, res)
    best = np.full(dirs.shape[0], np.inf)
    ids = np.full(dirs.shape[0], -1, dtype=np.int64)
    normals = np.zeros_like(dirs)
    for k, prim in enumerate(scene.primitives):
        s, n = _HIT[prim.kind](origin, dirs, prim)
        closer = s < best
        best = np.where(closer, s, best)
        ids = np.where(closer, k, ids)
        normals = np.where(closer[:, None], n, normals)

    image = np.broadcast_to(np.asarray(scene.background_color, dtype=np.float64), dirs.shape).copy()
    points = origin + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    for k, prim in enumerate(scene.primitives):
        sel = ids == k
        if np.any(sel):
            image[sel] = shade(prim, points[sel], normals[sel])
    depth = np.where(ids >= 0, best, 0.0)
    return image.reshape(h, w, 3), depth.reshape(h, w), ids.reshape(h, w)


def _check_cameras(scene, traj):
    centers = np.array([p.center for p in scene.primitives])
    for i in range(traj.n):
        z = centers @ traj.rotations[i][2] + traj.translations[i][2]
        if not np.any(z > NEAR):
            raise DegenerateCameraError(f"every primitive lies behind camera {i}")


def render_views(scene, traj, res, clip_length=25):
    """
    Render every pose of a trajectory with ground-truth depth and primitive ids

    Args:
        scene (Scene): the world
        traj (CameraTrajectory): poses, pose 0 is the reference
        res (tuple): (H, W), both ≥ 16
        clip_length (int): views per clip of the interleaved layout

    Returns:
        ViewSet
    """
    h, w = res
    if h < 16 or w < 16:
        raise DataValidationError(f"resolution must be at least 16×16, got {h}×{w}")
    _check_cameras(scene, traj)

    images, depths, ids = [], [], []
    for i in range(traj.n):
        img, dep, idx = render_view(scene, traj.rotations[i], traj.translations[i], traj.intrinsics, res)
        images.append(img)
        depths.append(dep)
        ids.append(idx)

    return ViewSet(
        images=np.stack(images),
        depths=np.stack(depths),
        poses=traj,
        ids=np.stack(ids),
        background_color=scene.background_color,
        ref_index=0,
        clip_layout=interleaved_clips(traj.n, clip_length),
    )


# === GEOMETRY WARPS ===

def unproject(depth, rotation, translation, intrinsics):
    """World points of every pixel of a depth map (H×W×3)"""
    h, w = depth.shape
    fx, fy, cx, cy = intrinsics.pixel((h, w))
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing='ij')
    cam = np.stack([(u - cx) / fx * depth, (v - cy) / fy * depth, depth], axis=-1)
    return (cam - translation) @ rotation


def project(points, rotation, translation, intrinsics, res):
    """Pixel coordinates (u, v) and camera depth z of world points (...×3)"""
    fx, fy, cx, cy = intrinsics.pixel(res)
    cam = points @ rotation.T + translation
    z = cam[..., 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    return fx * cam[..., 0] / safe + cx, fy * cam[..., 1] / safe + cy, z


def make_render_maps(views, ref_image=None):
    """
    Forward-warp the reference image into every pose through the reference depth

    A z-buffer keeps the nearest warped point per target pixel; pixels hit by no
    point keep exactly the background colour and are invalid.

    Args:
        views (ViewSet): needs the reference depth
        ref_image (np.ndarray, optional): H×W×3 image replacing the reference
            colours (used to warp an edited reference)

    Returns:
        RenderMap
    """
    ref = views.ref_index
    h, w = views.res
    traj = views.poses
    ref_depth = views.depths[ref]
    colors = views.images[ref] if ref_image is None else np.asarray(ref_image, dtype=np.float64)
    if colors.shape != views.images.shape[1:]:
        raise DataValidationError(f"reference image shape {colors.shape} != {views.images.shape[1:]}")

    fg = ref_depth > 0
    points = unproject(ref_depth, traj.rotations[ref], traj.translations[ref], traj.intrinsics)[fg]
    point_colors = colors[fg]
    background = np.asarray(views.background_color, dtype=np.float64)

    warped = np.broadcast_to(background, views.images.shape).copy()
    validity = np.zeros(views.images.shape[:3], dtype=bool)
    for i in range(views.n):
        u, v, z = project(points, traj.rotations[i], traj.translations[i], traj.intrinsics, (h, w))
        col = np.floor(u).astype(np.int64)
        row = np.floor(v).astype(np.int64)
        keep = (z > NEAR) & (col >= 0) & (col < w) & (row >= 0) & (row < h)
        flat = row[keep] * w + col[keep]
        zk = z[keep]
        ck = point_colors[keep]
        zbuf = np.full(h * w, np.inf)
        np.minimum.at(zbuf, flat, zk)
        winners = np.flatnonzero(zk == zbuf[flat])
        pix, first = np.unique(flat[winners], return_index=True)
        chosen = winners[first]
        img = warped[i].reshape(-1, 3)
        img[pix] = ck[chosen]
        validity[i].reshape(-1)[pix] = True
    return RenderMap(warped=warped, validity=validity)


def _snap(coords, tol=1e-6):
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < tol, rounded, coords)


def reproject(views, images, src, dst, depth_tol=1e-2):
    """
    Backward-warp images[src] into view dst with bilinear sampling

    A dst pixel is co-visible when its surface point projects inside src onto
    four neighbours that show the same primitive at a consistent depth.

    Returns:
        tuple: (warped H×W×C, covisible H×W bool)
    """
    h, w = views.res
    traj = views.poses
    depth_dst = views.depths[dst]
    points = unproject(depth_dst, traj.rotations[dst], traj.translations[dst], traj.intrinsics)
    u, v, z = project(points, traj.rotations[src], traj.translations[src], traj.intrinsics, (h, w))
    x = _snap(u - 0.5)
    y = _snap(v - 0.5)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx_ = x - x0
    fy_ = y - y0
    x1 = np.where(fx_ > 0.0, x0 + 1, x0)
    y1 = np.where(fy_ > 0.0, y0 + 1, y0)

    inside = (depth_dst > 0) & (z > NEAR) & (x0 >= 0) & (y0 >= 0) & (x1 < w) & (y1 < h)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)

    ids_src = views.ids[src]
    same = np.ones((h, w), dtype=bool)
    depth_ok = np.ones((h, w), dtype=bool)
    for yy, xx in ((y0c, x0c), (y0c, x1c), (y1c, x0c), (y1c, x1c)):
        same &= ids_src[yy, xx] == views.ids[dst]
        depth_ok &= np.abs(views.depths[src][yy, xx] - z) <= depth_tol * np.maximum(z, NEAR)
    covisible = inside & same & depth_ok

    img = np.asarray(images[src], dtype=np.float64)
    wx = fx_[..., None]
    wy = fy_[..., None]
    warped = ((1 - wy) * ((1 - wx) * img[y0c, x0c] + wx * img[y0c, x1c])
              + wy * ((1 - wx) * img[y1c, x0c] + wx * img[y1c, x1c]))
    warped = np.where(covisible[..., None], warped, 0.0)
    return warped, covisible


# === EDIT OPERATORS ===

def _recolor(color_key):
    def apply(scene):
        prims = list(scene.primitives)
        subject = prims[0]
        prims[0] = Primitive(subject.kind, subject.center, subject.size,
                             Material(albedo=PALETTE[color_key]), subject.yaw)
        return scene.with_primitives(prims)
    return apply


def _swap_material(scene):
    prims = list(scene.primitives)
    subject = prims[0]
    mat = subject.material
    pattern = 'solid' if mat.pattern == 'stripes' else 'stripes'
    prims[0] = Primitive(subject.kind, subject.center, subject.size,
                         Material(albedo=mat.albedo, pattern=pattern,
                                  pattern_color=(0.95, 0.95, 0.95), pattern_freq=0.6),
                         subject.yaw)
    return scene.with_primitives(prims)


def _add_primitive(scene):
    subject = scene.primitives[0]
    reach = float(max(subject.size))
    extra = Primitive(
        kind='sphere',
        center=(subject.center[0] + 0.55 * reach, subject.center[1] + reach + 0.2, subject.center[2] - 0.2),
        size=(0.38, 0.38, 0.38),
        material=Material(albedo=PALETTE['yellow']),
    )
    return scene.with_primitives(list(scene.primitives) + [extra])


EDIT_REGISTRY = {
    0: EditOracle(0, 'identity', 'identity', lambda s: s, lambda s: [], True,
                  "leave the scene unchanged"),
    1: EditOracle(1, 'recolor_red', 'appearance', _recolor('red'), lambda s: [0], True,
                  "make the subject red"),
    2: EditOracle(2, 'recolor_blue', 'appearance', _recolor('blue'), lambda s: [0], True,
                  "make the subject blue"),
    3: EditOracle(3, 'recolor_gold', 'appearance', _recolor('gold'), lambda s: [0], True,
                  "turn the subject to gold"),
    4: EditOracle(4, 'swap_material', 'appearance', _swap_material, lambda s: [0], False,
                  "toggle stripes on the subject (applying twice restores it)"),
    5: EditOracle(5, 'add_primitive', 'geometry', _add_primitive, lambda s: [len(s.primitives) - 1], False,
                  "add a small yellow ball above the subject (one per application)"),
}
N_EDIT_CODES = len(EDIT_REGISTRY)


def get_oracle(edit_code):
    """Registered edit operator for a code"""
    try:
        return EDIT_REGISTRY[int(edit_code)]
    except (KeyError, ValueError, TypeError):
        raise UnknownEditCodeError(f"unknown edit code {edit_code!r}", error_code="edit_code")


def apply_edit(scene, oracle):
    """
    Apply a ground-truth edit operator

    Renders of the result are used for evaluation and editor pretraining on
    other scenes, never to train the editor on the evaluation scene's targets.
    """
    registered = get_oracle(oracle.edit_code if isinstance(oracle, EditOracle) else oracle)
    return registered.apply(scene)


def gt_mask(scene, oracle, traj, res):
    """
    Pixels whose first visible surface belongs to an edited primitive (N×H×W bool)
    """
    oracle = get_oracle(oracle.edit_code if isinstance(oracle, EditOracle) else oracle)
    edited = oracle.apply(scene)
    targets = list(oracle.targets(edited))
    masks = []
    for i in range(traj.n):
        _, _, ids = render_view(edited, traj.rotations[i], traj.translations[i], traj.intrinsics, res)
        masks.append(np.isin(ids, targets))
    return np.stack(masks)


# === SERIALISATION ===

def save_scene_json(path, scene, traj):
    """Versioned JSON document: version, seed, primitives, background, poses, intrinsics"""
    document = {'version': SCENE_FORMAT_VERSION, **scene.to_dict(), **traj.to_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2)


def load_scene_json(path):
    """Inverse of save_scene_json → (Scene, CameraTrajectory)"""
    with open(path, 'r', encoding='utf-8') as f:
        document = json.load(f)
    if document.get('version') != SCENE_FORMAT_VERSION:
        raise DataProcessingError(f"unsupported scene document version {document.get('version')}")
    return Scene.from_dict(document), CameraTrajectory.from_dict(document)


def save_viewset(folder, views):
    """PNG frames + DC3D depth files + ids.npy + manifest.json"""
    folder = Path(folder)
    (folder / 'frames').mkdir(parents=True, exist_ok=True)
    (folder / 'depths').mkdir(parents=True, exist_ok=True)
    for i in range(views.n):
        save_png(folder / 'frames' / f'view_{i:03d}.png', views.images[i])
        write_depth(folder / 'depths' / f'view_{i:03d}.dc3d', views.depths[i])
    np.save(folder / 'ids.npy', views.ids)
    manifest = {
        'version': SCENE_FORMAT_VERSION,
        'n_views': views.n,
        'resolution': list(views.res),
        'ref_index': views.ref_index,
        'clip_layout': views.clip_layout,
        'background': list(views.background_color),
        **views.poses.to_dict(),
    }
    with open(folder / 'manifest.json', 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)


def load_viewset(folder):
    """Inverse of save_viewset (images come back quantised to 8 bits)"""
    folder = Path(folder)
    with open(folder / 'manifest.json', 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    n = manifest['n_views']
    images = np.stack([load_png(folder / 'frames' / f'view_{i:03d}.png') for i in range(n)])
    depths = np.stack([read_depth(folder / 'depths' / f'view_{i:03d}.dc3d') for i in range(n)]).astype(np.float64)
    return ViewSet(
        images=images, depths=depths, poses=CameraTrajectory.from_dict(manifest),
        ids=np.load(folder / 'ids.npy'), background_color=tuple(manifest['background']),
        ref_index=manifest['ref_index'], clip_layout=manifest['clip_layout'],
    )
