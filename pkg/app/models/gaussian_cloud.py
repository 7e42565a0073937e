# app/models/gaussian_cloud.py
# Explicit scene representation: anisotropic 3D Gaussians with colour and
# opacity, plus the per-Gaussian frozen flags used by masked updates

import logging
from dataclasses import dataclass, fields

import numpy as np
import torch

from app.utils.error_handler import DataValidationError
from app.utils.formats import read_cloud_arrays, write_cloud_arrays

logger = logging.getLogger(__name__)

TRAINABLE = ('positions', 'log_scales', 'rotations', 'opacity_logits', 'colors')


@dataclass
class GaussianCloud:
    """
    M Gaussians stored in their optimisation parameterisation

    scales = exp(log_scales), opacities = sigmoid(opacity_logits), rotations
    are (w, x, y, z) quaternions, colours live in [0, 1].
    """
    positions: torch.Tensor        # M×3
    log_scales: torch.Tensor       # M×3
    rotations: torch.Tensor        # M×4
    opacity_logits: torch.Tensor   # M
    colors: torch.Tensor           # M×3
    frozen: torch.Tensor           # M bool

    def __post_init__(self):
        m = self.positions.shape[0]
        shapes = {
            'positions': (m, 3), 'log_scales': (m, 3), 'rotations': (m, 4),
            'opacity_logits': (m,), 'colors': (m, 3), 'frozen': (m,),
        }
        for name, shape in shapes.items():
            if tuple(getattr(self, name).shape) != shape:
                raise DataValidationError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")

    @property
    def m(self):
        return int(self.positions.shape[0])

    @property
    def scales(self):
        return torch.exp(self.log_scales)

    @property
    def opacities(self):
        return torch.sigmoid(self.opacity_logits)

    def parameters(self):
        return [getattr(self, name) for name in TRAINABLE]

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def clone(self):
        """Detached deep copy"""
        return GaussianCloud(**{f.name: getattr(self, f.name).detach().clone() for f in fields(self)})

    def with_frozen(self, frozen):
        cloud = self.clone()
        cloud.frozen = torch.as_tensor(frozen, dtype=torch.bool).clone()
        return cloud

    @torch.no_grad()
    def project_constraints(self):
        """Unit quaternions and colours in [0, 1] on the trainable rows"""
        live = ~self.frozen
        q = self.rotations[live]
        self.rotations[live] = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        self.colors[live] = self.colors[live].clamp(0.0, 1.0)

    # === PERSISTENCE ===

    def to_arrays(self):
        arrays = {name: getattr(self, name).detach().cpu().to(torch.float64).numpy() for name in TRAINABLE}
        arrays['frozen'] = self.frozen.cpu().numpy()
        return arrays

    @classmethod
    def from_arrays(cls, arrays, dtype=None):
        dtype = dtype or torch.get_default_dtype()
        values = {name: torch.as_tensor(np.asarray(arrays[name]), dtype=dtype).clone() for name in TRAINABLE}
        values['frozen'] = torch.as_tensor(np.asarray(arrays['frozen'], dtype=bool))
        return cls(**values)

    def save(self, path):
        write_cloud_arrays(path, self.to_arrays())
        logger.info(f"wrote {self.m} Gaussians to {path}")

    @classmethod
    def load(cls, path, dtype=None):
        return cls.from_arrays(read_cloud_arrays(path), dtype)


def empty_cloud(dtype=None):
    dtype = dtype or torch.get_default_dtype()
    return GaussianCloud(
        positions=torch.zeros(0, 3, dtype=dtype), log_scales=torch.zeros(0, 3, dtype=dtype),
        rotations=torch.zeros(0, 4, dtype=dtype), opacity_logits=torch.zeros(0, dtype=dtype),
        colors=torch.zeros(0, 3, dtype=dtype), frozen=torch.zeros(0, dtype=torch.bool),
    )


def quaternion_to_matrix(q):
    """M×4 (w, x, y, z) quaternions, normalised on the fly → M×3×3 rotations"""
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(-1, 3, 3)
