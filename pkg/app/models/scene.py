# app/models/scene.py
# Domain types of the procedural world: primitives, scenes, camera
# trajectories, rendered view sets, render maps and edit operators

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.utils.error_handler import DataValidationError

WORLD_HALF_EXTENT = 3.0   # every primitive lives inside [-3, 3]^3
SCENE_FORMAT_VERSION = 1

PRIMITIVE_KINDS = ('sphere', 'box', 'plane')
PATTERNS = ('solid', 'stripes')


@dataclass(frozen=True)
class Material:
    """
    Lambertian material

    albedo is the base colour; the 'stripes' pattern blends in pattern_color
    with a smooth sinusoid along world x so that shading stays continuous.
    """
    albedo: Tuple[float, float, float]
    pattern: str = 'solid'
    pattern_color: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    pattern_freq: float = 2.0

    def to_dict(self):
        return {
            'albedo': list(self.albedo),
            'pattern': self.pattern,
            'pattern_color': list(self.pattern_color),
            'pattern_freq': self.pattern_freq,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            albedo=tuple(float(v) for v in data['albedo']),
            pattern=data.get('pattern', 'solid'),
            pattern_color=tuple(float(v) for v in data.get('pattern_color', (1.0, 1.0, 1.0))),
            pattern_freq=float(data.get('pattern_freq', 2.0)),
        )


@dataclass(frozen=True)
class Primitive:
    """
    One solid of the scene

    sphere: size[0] is the radius
    box:    size holds the half extents, yaw rotates it about the world y axis
    plane:  horizontal quad at height center[1], half extents size[0] (x), size[2] (z)
    """
    kind: str
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    material: Material
    yaw: float = 0.0

    def to_dict(self):
        return {
            'kind': self.kind,
            'center': list(self.center),
            'size': list(self.size),
            'yaw': self.yaw,
            'material': self.material.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=data['kind'],
            center=tuple(float(v) for v in data['center']),
            size=tuple(float(v) for v in data['size']),
            yaw=float(data.get('yaw', 0.0)),
            material=Material.from_dict(data['material']),
        )


@dataclass(frozen=True)
class Scene:
    """
    Procedural scene

    Invariants: at least one primitive, every primitive inside the world box.
    """
    primitives: Tuple[Primitive, ...]
    background_color: Tuple[float, float, float]
    seed: int

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise DataValidationError("a scene needs at least one primitive")
        for prim in self.primitives:
            if prim.kind not in PRIMITIVE_KINDS:
                raise DataValidationError(f"unknown primitive kind {prim.kind!r}")
            if np.any(np.abs(np.asarray(prim.center)) > WORLD_HALF_EXTENT):
                raise DataValidationError(f"primitive centre {prim.center} outside the world box")

    def with_primitives(self, primitives):
        return replace(self, primitives=tuple(primitives))

    def to_dict(self):
        return {
            'seed': self.seed,
            'background': list(self.background_color),
            'primitives': [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            primitives=tuple(Primitive.from_dict(p) for p in data['primitives']),
            background_color=tuple(float(v) for v in data['background']),
            seed=int(data['seed']),
        )


@dataclass(frozen=True)
class Intrinsics:
    """
    Pinhole intrinsics normalised by image size

    fx, cx are fractions of the width, fy, cy fractions of the height, so one
    trajectory can be rendered at any resolution.
    """
    fx: float
    fy: float
    cx: float = 0.5
    cy: float = 0.5

    def pixel(self, res):
        """Pixel-unit (fx, fy, cx, cy) for res = (H, W)"""
        h, w = res
        return self.fx * w, self.fy * h, self.cx * w, self.cy * h

    def matrix(self, res):
        fx, fy, cx, cy = self.pixel(res)
        return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraTrajectory:
    """
    Ordered camera poses (world-to-camera, OpenCV axes: x right, y down, z forward)

    x_cam = R @ x_world + t. Pose 0 is the reference pose.
    """
    rotations: np.ndarray      # N×3×3
    translations: np.ndarray   # N×3
    intrinsics: Intrinsics

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64)
        trans = np.asarray(self.translations, dtype=np.float64)
        if rot.ndim != 3 or rot.shape[1:] != (3, 3) or trans.shape != (rot.shape[0], 3):
            raise DataValidationError(f"bad pose shapes {rot.shape} / {trans.shape}")
        if rot.shape[0] < 2:
            raise DataValidationError("a trajectory needs at least two poses")
        eye = np.eye(3)
        for i, r in enumerate(rot):
            if np.max(np.abs(r @ r.T - eye)) > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
                raise DataValidationError(f"pose {i} is not a proper rotation")
        object.__setattr__(self, 'rotations', rot)
        object.__setattr__(self, 'translations', trans)

    @property
    def n(self):
        return int(self.rotations.shape[0])

    def camera_center(self, i):
        return -self.rotations[i].T @ self.translations[i]

    def relative_pose(self, i, ref=0):
        """Pose of view i relative to the reference camera (x_i = R_rel x_ref + t_rel)"""
        r_rel = self.rotations[i] @ self.rotations[ref].T
        t_rel = self.translations[i] - r_rel @ self.translations[ref]
        return r_rel, t_rel

    def subset(self, indices):
        idx = list(indices)
        return CameraTrajectory(self.rotations[idx], self.translations[idx], self.intrinsics)

    def to_dict(self):
        return {
            'poses': [
                {'rotation': r.tolist(), 'translation': t.tolist()}
                for r, t in zip(self.rotations, self.translations)
            ],
            'intrinsics': {
                'fx': self.intrinsics.fx, 'fy': self.intrinsics.fy,
                'cx': self.intrinsics.cx, 'cy': self.intrinsics.cy,
            },
        }

    @classmethod
    def from_dict(cls, data):
        intr = data['intrinsics']
        return cls(
            rotations=np.array([p['rotation'] for p in data['poses']], dtype=np.float64),
            translations=np.array([p['translation'] for p in data['poses']], dtype=np.float64),
            intrinsics=Intrinsics(intr['fx'], intr['fy'], intr.get('cx', 0.5), intr.get('cy', 0.5)),
        )


def interleaved_clips(n_views, clip_length, ref_index=0):
    """
    Split n_views into interleaved clips that all start with the reference view

    With 49 views and 25-frame clips: [0, 1, 3, ..., 47] and [0, 2, 4, ..., 48].
    """
    if clip_length < 2:
        raise DataValidationError("clip length must be at least 2")
    others = [i for i in range(n_views) if i != ref_index]
    n_clips = max(1, int(np.ceil(len(others) / (clip_length - 1))))
    clips = []
    for c in range(n_clips):
        members = [v for k, v in enumerate(others) if k % n_clips == c]
        clips.append([ref_index] + members)
    return clips


@dataclass
class ViewSet:
    """
    Posed multi-view render of a scene

    images: N×H×W×C in [0, 1]; depths: N×H×W camera z (0 where no surface);
    ids: N×H×W index of the first visible primitive (-1 on background).
    """
    images: np.ndarray
    depths: np.ndarray
    poses: CameraTrajectory
    ids: np.ndarray
    background_color: Tuple[float, float, float]
    ref_index: int = 0
    clip_layout: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        n = self.images.shape[0]
        if self.depths.shape != self.images.shape[:3] or self.ids.shape != self.images.shape[:3]:
            raise DataValidationError("images, depths and ids must share N×H×W")
        if n != self.poses.n:
            raise DataValidationError(f"{n} images for {self.poses.n} poses")
        if not self.clip_layout:
            self.clip_layout = [list(range(n))]
        covered = set()
        for clip in self.clip_layout:
            if clip[0] != self.ref_index:
                raise DataValidationError("every clip must start with the reference view")
            if len(clip) > 25:
                raise DataValidationError("clips hold at most 25 views")
            covered.update(clip)
        if covered != set(range(n)):
            raise DataValidationError("the clip layout must cover every view")

    @property
    def n(self):
        return int(self.images.shape[0])

    @property
    def res(self):
        return int(self.images.shape[1]), int(self.images.shape[2])

    @property
    def foreground(self):
        return self.ids >= 0

    def with_images(self, images):
        """Same geometry, different pixels (edited views)"""
        return replace(self, images=np.asarray(images, dtype=np.float64))

    def subset(self, indices):
        idx = list(indices)
        return ViewSet(
            images=self.images[idx], depths=self.depths[idx], poses=self.poses.subset(idx),
            ids=self.ids[idx], background_color=self.background_color, ref_index=0,
            clip_layout=[list(range(len(idx)))] if len(idx) <= 25 else interleaved_clips(len(idx), 25),
        )


@dataclass
class RenderMap:
    """
    Reference view forward-warped into every pose

    Pixels outside validity hold exactly the background colour.
    """
    warped: np.ndarray     # N×H×W×C
    validity: np.ndarray   # N×H×W bool


@dataclass(frozen=True)
class EditOracle:
    """
    Ground-truth edit operator addressed by a small integer code

    apply maps a scene to its edited version; targets lists the indices of the
    edited primitives inside the edited scene. Geometry edits set kind='geometry'.
    """
    edit_code: int
    name: str
    kind: str                                   # 'appearance' | 'geometry' | 'identity'
    apply: Callable[[Scene], Scene]
    targets: Callable[[Scene], Sequence[int]]
    idempotent: bool
    instruction: str

    @property
    def is_geometry(self):
        return self.kind == 'geometry'
