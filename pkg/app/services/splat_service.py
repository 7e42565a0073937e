# app/services/splat_service.py
# Stage 3: exact per-pixel Gaussian rasterisation, fitting of the source
# scene and reconstruction-based update from edited multi-view images

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.models.gaussian_cloud import GaussianCloud, quaternion_to_matrix
from app.services.base_service import BaseService
from app.services.worldgen_service import NEAR, unproject
from app.utils.error_handler import DataValidationError, ShapeMismatchError
from app.utils.helpers import images_to_tensor, psnr, tensor_to_images

logger = logging.getLogger(__name__)

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
DILATION = 0.3          # px², added to every projected covariance
PSNR_TARGET = 25.0


@dataclass
class RenderResult:
    image: torch.Tensor   # H×W×3
    alpha: torch.Tensor   # H×W


# === PERCEPTUAL FEATURES ===

class RandomConvFeatures(torch.nn.Module):
    """Fixed random conv stack; weights come from a seeded generator and never train"""

    def __init__(self, seed=0, widths=(8, 16, 32), dtype=None):
        super().__init__()
        dtype = dtype or torch.get_default_dtype()
        gen = torch.Generator().manual_seed(int(seed))
        self.weights = []
        in_ch = 3
        for width in widths:
            w = torch.randn(width, in_ch, 3, 3, generator=gen, dtype=dtype) / np.sqrt(9 * in_ch)
            self.weights.append(w)
            in_ch = width

    def forward(self, x):
        feats = []
        h = x
        for i, w in enumerate(self.weights):
            h = F.relu(F.conv2d(h, w.to(h.dtype), padding=1, stride=1 if i == 0 else 2))
            feats.append(h)
        return feats


_FEATURES = {}


def _features(seed, dtype):
    key = (int(seed), dtype)
    if key not in _FEATURES:
        _FEATURES[key] = RandomConvFeatures(seed, dtype=dtype)
    return _FEATURES[key]


def perceptual_loss(img_a, img_b, seed=0):
    """
    Mean squared distance between fixed random conv features, summed over layers

    Args:
        img_a, img_b (torch.Tensor): N×3×H×W or H×W×3 images of the same shape
    """
    if img_a.shape != img_b.shape:
        raise ShapeMismatchError(f"{tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    if img_a.dim() == 3:
        img_a = img_a.permute(2, 0, 1)[None]
        img_b = img_b.permute(2, 0, 1)[None]
    net = _features(seed, img_a.dtype)
    total = 0.0
    for fa, fb in zip(net(img_a), net(img_b)):
        total = total + torch.mean((fa - fb) ** 2)
    return total


@dataclass(frozen=True)
class ReconLoss:
    l1_weight: float = 1.0
    perceptual_weight: float = 0.2
    perceptual_kind: str = 'random_conv'
    perceptual_seed: int = 0

    def __post_init__(self):
        if self.l1_weight < 0 or self.perceptual_weight < 0:
            raise DataValidationError("loss weights must be non-negative")
        if self.l1_weight == 0 and self.perceptual_weight == 0:
            raise DataValidationError("l1 and perceptual weights cannot both be 0")
        if self.perceptual_kind != 'random_conv':
            raise DataValidationError(f"unknown perceptual kind {self.perceptual_kind!r}")

    def __call__(self, render, target):
        loss = 0.0
        if self.l1_weight:
            loss = loss + self.l1_weight * torch.mean(torch.abs(render - target))
        if self.perceptual_weight:
            loss = loss + self.perceptual_weight * perceptual_loss(render, target, self.perceptual_seed)
        return loss


# === RASTERISATION ===

def _pixel_grid(res, dtype):
    h, w = res
    v, u = torch.meshgrid(torch.arange(h, dtype=dtype) + 0.5, torch.arange(w, dtype=dtype) + 0.5, indexing='ij')
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


def project_gaussians(cloud, rotation, translation, intrinsics, res):
    """
    Screen-space means, inverse 2D covariances and depths

    Returns:
        tuple: (M×2 means, M×2×2 conics, M depths, M×2×2 covariances)
    """
    dtype = cloud.positions.dtype
    R = torch.as_tensor(rotation, dtype=dtype)
    t = torch.as_tensor(translation, dtype=dtype)
    fx, fy, cx, cy = intrinsics.pixel(res)

    cam = cloud.positions @ R.T + t
    x, y, z = cam.unbind(-1)
    z_safe = torch.where(z > NEAR, z, torch.full_like(z, NEAR))
    means = torch.stack([fx * x / z_safe + cx, fy * y / z_safe + cy], dim=-1)

    rot = quaternion_to_matrix(cloud.rotations)
    scale = cloud.scales
    cov3 = rot @ torch.diag_embed(scale ** 2) @ rot.transpose(1, 2)
    cov_cam = R @ cov3 @ R.T
    zeros = torch.zeros_like(z_safe)
    J = torch.stack([
        torch.stack([fx / z_safe, zeros, -fx * x / z_safe ** 2], dim=-1),
        torch.stack([zeros, fy / z_safe, -fy * y / z_safe ** 2], dim=-1),
    ], dim=1)
    cov2 = J @ cov_cam @ J.transpose(1, 2) + DILATION * torch.eye(2, dtype=dtype)
    return means, torch.linalg.inv(cov2), z, cov2


def rasterize(cloud, rotation, translation, intrinsics, res, background=(0.0, 0.0, 0.0)):
    """
    Render a cloud from one camera

    Gaussians are sorted by camera depth and alpha-composited front to back
    over the background; per-Gaussian alpha is opacity·exp(−½ dᵀΣ⁻¹d), capped
    at 0.99 and dropped below 1/255. Gaussians behind the near plane are skipped.

    Args:
        cloud (GaussianCloud): M ≥ 0 Gaussians
        rotation (np.ndarray): 3×3 world→camera rotation
        translation (np.ndarray): camera translation
        intrinsics (Intrinsics): normalised intrinsics
        res (tuple): (H, W)
        background (tuple): RGB

    Returns:
        RenderResult
    """
    h, w = res
    dtype = cloud.positions.dtype
    bg = torch.as_tensor(background, dtype=dtype)
    if cloud.m == 0:
        return RenderResult(bg.expand(h, w, 3).clone(), torch.zeros(h, w, dtype=dtype))

    means, conics, depth, _ = project_gaussians(cloud, rotation, translation, intrinsics, res)
    visible = depth > NEAR
    if not bool(visible.any()):
        return RenderResult(bg.expand(h, w, 3).clone(), torch.zeros(h, w, dtype=dtype))
    order = torch.argsort(depth[visible])
    idx = torch.nonzero(visible).reshape(-1)[order]

    pixels = _pixel_grid(res, dtype)
    d = pixels[None, :, :] - means[idx][:, None, :]                 # K×P×2
    power = -0.5 * torch.einsum('kpi,kij,kpj->kp', d, conics[idx], d)
    alpha = cloud.opacities[idx][:, None] * torch.exp(power)
    alpha = torch.clamp(alpha, max=ALPHA_MAX)
    alpha = torch.where(alpha < ALPHA_MIN, torch.zeros_like(alpha), alpha)

    transmittance = torch.cumprod(torch.cat([torch.ones_like(alpha[:1]), 1.0 - alpha[:-1]], dim=0), dim=0)
    weights = alpha * transmittance                                  # K×P
    color = weights.T @ cloud.colors[idx]                             # P×3
    coverage = 1.0 - transmittance[-1] * (1.0 - alpha[-1])
    image = color + (1.0 - coverage)[:, None] * bg
    return RenderResult(image.reshape(h, w, 3), coverage.reshape(h, w))


def render_all(cloud, views):
    """N×H×W×3 tensor of renders at every pose of a view set"""
    traj = views.poses
    return torch.stack([
        rasterize(cloud, traj.rotations[i], traj.translations[i], traj.intrinsics, views.res,
                  views.background_color).image
        for i in range(views.n)
    ])


# === MASK LIFTING ===

def lift_mask(cloud, views, mask, n_sigma=2.0):
    """
    Gaussians to freeze: those whose projected n_sigma ellipse misses the
    mask in every view

    Returns:
        torch.Tensor: M bool, True = freeze
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (views.n, *views.res):
        raise ShapeMismatchError(f"mask {mask.shape} for {views.n} views at {views.res}")
    touched = torch.zeros(cloud.m, dtype=torch.bool)
    traj = views.poses
    with torch.no_grad():
        for i in range(views.n):
            if not mask[i].any():
                continue
            means, conics, depth, _ = project_gaussians(cloud, traj.rotations[i], traj.translations[i],
                                                        traj.intrinsics, views.res)
            pixels = _pixel_grid(views.res, cloud.positions.dtype)[torch.as_tensor(mask[i].reshape(-1))]
            d = pixels[None, :, :] - means[:, None, :]
            mahal = torch.einsum('kpi,kij,kpj->kp', d, conics, d)
            touched |= (depth > NEAR) & (mahal <= n_sigma ** 2).any(dim=1)
    return ~touched


class SplatService(BaseService):
    """Fitting and updating Gaussian clouds against posed images"""

    def init_from_views(self, views, m, generator=None):
        """
        M Gaussians on foreground surface points of the views, coloured by
        the pixel they come from and sized by the pixel footprint
        """
        if m < 1:
            raise DataValidationError("a cloud needs at least one Gaussian")
        traj = views.poses
        points, colors, footprints = [], [], []
        for i in range(views.n):
            fg = views.depths[i] > 0
            if not fg.any():
                continue
            world = unproject(views.depths[i], traj.rotations[i], traj.translations[i], traj.intrinsics)
            fx = traj.intrinsics.pixel(views.res)[0]
            points.append(world[fg])
            colors.append(views.images[i][fg])
            footprints.append(views.depths[i][fg] / fx)
        if not points:
            raise DataValidationError("no foreground pixel to initialise Gaussians from")
        points = np.concatenate(points)
        colors = np.concatenate(colors)
        footprints = np.concatenate(footprints)

        pick = torch.randint(0, len(points), (m,), generator=generator).numpy()
        dtype = torch.get_default_dtype()
        density = np.sqrt(max(len(points) / views.n, 1.0) / m)
        scales = np.clip(footprints[pick] * density, 1e-3, None)
        jitter = 0.25 * scales[:, None] * torch.randn(m, 3, generator=generator, dtype=torch.float64).numpy()
        return GaussianCloud(
            positions=torch.as_tensor(points[pick] + jitter, dtype=dtype),
            log_scales=torch.as_tensor(np.log(np.repeat(scales[:, None], 3, axis=1)), dtype=dtype),
            rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=dtype).repeat(m, 1),
            opacity_logits=torch.full((m,), float(np.log(0.8 / 0.2)), dtype=dtype),
            colors=torch.as_tensor(colors[pick], dtype=dtype),
            frozen=torch.zeros(m, dtype=torch.bool),
        )

    def _optimize(self, cloud, views, targets, loss_fn, iters, lr, generator, desc):
        """
        Adam over the trainable rows, views visited in a shuffled order per epoch

        Frozen rows get zero gradients and are restored after every step.
        """
        cloud.requires_grad_(True)
        params = cloud.parameters()
        snapshot = [p.detach().clone() for p in params]
        frozen = cloud.frozen
        optimizer = torch.optim.Adam(params, lr=lr)
        traj = views.poses
        history = []
        order = []
        for it in tqdm(range(iters), desc=desc, disable=not self.show_progress):
            if not order:
                order = torch.randperm(views.n, generator=generator).tolist()
            i = order.pop()
            render = rasterize(cloud, traj.rotations[i], traj.translations[i], traj.intrinsics, views.res,
                               views.background_color).image
            loss = loss_fn(render, targets[i])
            self._check_finite(f"{desc} loss", loss, iteration=it, view=i)
            optimizer.zero_grad()
            loss.backward()
            if bool(frozen.any()):
                for p in params:
                    if p.grad is not None:
                        p.grad[frozen] = 0.0
            optimizer.step()
            with torch.no_grad():
                for p, saved in zip(params, snapshot):
                    p[frozen] = saved[frozen]
            cloud.project_constraints()
            history.append(float(loss.detach()))
        cloud.requires_grad_(False)
        return history

    def fit_initial(self, views, m=500, iters=2000, lr=1e-2, loss=None, generator=None):
        """
        Fit a cloud to the source views

        A mean training PSNR below 25 dB is logged as a warning.

        Returns:
            tuple: (GaussianCloud, list of losses)
        """
        cloud = self.init_from_views(views, m, generator)
        if iters == 0:
            return cloud, []
        loss = loss or ReconLoss(1.0, 0.0)
        targets = images_to_tensor(views.images).permute(0, 2, 3, 1)
        self._log_operation("fit_initial", f"M={m}, {iters} iters, lr={lr}")
        history = self._optimize(cloud, views, targets, loss, iters, lr, generator, "fit")
        score = self.mean_psnr(cloud, views)
        if score < PSNR_TARGET:
            logger.warning(f"fit_initial reached {score:.2f} dB, below the {PSNR_TARGET} dB target")
        else:
            logger.info(f"fit_initial reached {score:.2f} dB")
        return cloud, history

    def update_with_edits(self, cloud, views, edited_images, loss=None, mask=None, iters=300, lr=5e-3,
                          generator=None):
        """
        Refine a cloud against edited views posed like the source views

        With a mask, Gaussians whose 2σ footprint misses it in every view are
        frozen first; a mask covering every pixel counts as no mask. No
        Gaussian is added or removed.

        Args:
            cloud (GaussianCloud): source cloud (not modified)
            views (ViewSet): poses of the edited images
            edited_images (np.ndarray): N×H×W×3
            mask (np.ndarray, optional): N×H×W bool

        Returns:
            tuple: (GaussianCloud, list of losses)
        """
        edited_images = np.asarray(edited_images)
        if edited_images.shape != views.images.shape:
            raise ShapeMismatchError(f"edited images {edited_images.shape} vs views {views.images.shape}")
        updated = cloud.clone()
        if mask is not None and not np.asarray(mask, dtype=bool).all():
            updated.frozen = updated.frozen | lift_mask(updated, views, mask)
            logger.info(f"masked update: {int(updated.frozen.sum())}/{updated.m} Gaussians frozen")
        loss = loss or ReconLoss()
        targets = images_to_tensor(edited_images).permute(0, 2, 3, 1)
        self._log_operation("update_with_edits", f"M={updated.m}, {iters} iters, lr={lr}, "
                                                 f"mask={'none' if mask is None else 'given'}")
        history = self._optimize(updated, views, targets, loss, iters, lr, generator, "stage3")
        return updated, history

    def mean_psnr(self, cloud, views, targets=None):
        targets = views.images if targets is None else targets
        with torch.no_grad():
            renders = tensor_to_images(render_all(cloud, views).permute(0, 3, 1, 2))
        return float(np.mean([psnr(renders[i], targets[i]) for i in range(views.n)]))

    def render_images(self, cloud, views):
        """Renders as an N×H×W×3 array in [0, 1]"""
        with torch.no_grad():
            return tensor_to_images(render_all(cloud, views).permute(0, 3, 1, 2))
