# app/models/nets.py
# Small denoisers: a multi-view NVS denoiser (the teacher) and a per-view
# instruction editor (the student), built on one conv/attention backbone,
# plus low-rank adapters that wrap attention projections

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.utils.error_handler import DataValidationError, LoRAError, ShapeMismatchError

logger = logging.getLogger(__name__)

CAMERA_TAG_DIM = 12

# layer_filter name -> module name segment that selects the wrapped projections
LORA_FILTERS = {
    'temporal': 'temporal_attn',
    'self_attention': 'self_attn',
}


@dataclass(frozen=True)
class DenoiserConfig:
    """
    Sizes of a toy denoiser

    channels is the width of the first level and doubles at every downsampling
    level; depth counts the attention stages at the bottleneck; latent_downscale
    (a power of two) is the bottleneck stride.
    """
    channels: int = 32
    depth: int = 2
    heads: int = 4
    latent_downscale: int = 4
    cond_dims: tuple = (64, 32)       # (reference embedding, edit-code embedding)
    image_channels: int = 3
    timesteps: int = 1000

    def __post_init__(self):
        values = (self.channels, self.depth, self.heads, self.latent_downscale,
                  self.image_channels, self.timesteps, *self.cond_dims)
        if any(int(v) <= 0 for v in values):
            raise DataValidationError(f"denoiser sizes must be positive: {self}")
        if self.latent_downscale & (self.latent_downscale - 1):
            raise DataValidationError("latent_downscale must be a power of two")
        if self.bottleneck_width % self.heads:
            raise DataValidationError("heads must divide the bottleneck width")

    @property
    def levels(self):
        return int(math.log2(self.latent_downscale))

    @property
    def bottleneck_width(self):
        return self.channels * self.latent_downscale

    @property
    def ref_dim(self):
        return self.cond_dims[0]

    @property
    def code_dim(self):
        return self.cond_dims[1]

    def check_resolution(self, h, w):
        if h % self.latent_downscale or w % self.latent_downscale:
            raise ShapeMismatchError(f"{h}×{w} is not divisible by latent_downscale={self.latent_downscale}")

    def to_dict(self):
        return {
            'channels': self.channels, 'depth': self.depth, 'heads': self.heads,
            'latent_downscale': self.latent_downscale, 'cond_dims': list(self.cond_dims),
            'image_channels': self.image_channels, 'timesteps': self.timesteps,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{**data, 'cond_dims': tuple(data['cond_dims'])})


# === CONDITIONING ===

@dataclass
class ConditionSignal:
    """
    Teacher conditioning for one clip

    render_maps stacks the warped reference colours and the validity mask
    (V×4×H×W); ref_image is the reference view the network embeds for
    cross-attention (None for the unconditional branch); camera_tag holds
    each view's pose relative to the reference (V×12).
    """
    render_maps: torch.Tensor
    ref_image: Optional[torch.Tensor]
    camera_tag: torch.Tensor

    @property
    def n_views(self):
        return int(self.render_maps.shape[0])

    def null_like(self):
        """Unconditional branch: no render maps, no reference, poses kept"""
        return ConditionSignal(torch.zeros_like(self.render_maps), None, self.camera_tag)

    def subset(self, indices):
        idx = list(indices)
        return ConditionSignal(self.render_maps[idx], self.ref_image, self.camera_tag[idx])

    def detach(self):
        ref = None if self.ref_image is None else self.ref_image.detach()
        return ConditionSignal(self.render_maps.detach(), ref, self.camera_tag.detach())


@dataclass
class EditCondition:
    """
    Editor conditioning: source views (None drops the image) and an edit code
    (None drops the code; a tensor gives one code per view)
    """
    source: Optional[torch.Tensor]
    code: Union[int, torch.Tensor, None]


# === BUILDING BLOCKS ===

def _groups(channels):
    return math.gcd(8, channels)


def timestep_embedding(t, dim, dtype, max_period=10000.0):
    """Sinusoidal embedding of (possibly fractional) steps, one row per entry of t"""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """
    Multi-head attention with a residual connection

    Self-attention when context is None, cross-attention otherwise.
    """
    def __init__(self, dim, heads, context_dim=None):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim or dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim or dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None):
        h = self.norm(x)
        ctx = h if context is None else context
        q, k, v = self._split(self.to_q(h)), self._split(self.to_k(ctx)), self._split(self.to_v(ctx))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(x.shape)
        return x + self.to_out(out)


class AttentionStage(nn.Module):
    """
    Per-view self-attention, cross-attention to the conditioning tokens and,
    for the multi-view model, attention across the view axis at every position
    """
    def __init__(self, dim, heads, context_dim, temporal):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.cross_attn = Attention(dim, heads, context_dim)
        self.temporal_attn = Attention(dim, heads) if temporal else None

    def forward(self, h, context):
        v, c, height, width = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        tokens = self.self_attn(tokens)
        tokens = self.cross_attn(tokens, context)
        if self.temporal_attn is not None:
            tokens = self.temporal_attn(tokens.transpose(0, 1)).transpose(0, 1)
        return tokens.transpose(1, 2).reshape(v, c, height, width)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode='nearest'))


class UNetBackbone(nn.Module):
    """Conv encoder → attention stages at the bottleneck → conv decoder with skips"""

    def __init__(self, config, in_channels, context_dim, temporal):
        super().__init__()
        c = config.channels
        temb_dim = 4 * c
        self.in_conv = nn.Conv2d(in_channels, c, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = c
        for _ in range(config.levels):
            self.down_blocks.append(ResBlock(ch, ch, temb_dim))
            self.downsamples.append(nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1))
            ch *= 2
        self.mid = ResBlock(ch, ch, temb_dim)
        self.blocks = nn.ModuleList(
            [AttentionStage(ch, config.heads, context_dim, temporal) for _ in range(config.depth)]
        )
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for _ in range(config.levels):
            self.upsamples.append(Upsample(ch, ch // 2))
            ch //= 2
            self.up_blocks.append(ResBlock(2 * ch, ch, temb_dim))
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, config.image_channels, 3, padding=1)

    def forward(self, x, temb, context):
        h = self.in_conv(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for stage in self.blocks:
            h = stage(h, context)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


class TimeEmbedding(nn.Module):
    def __init__(self, channels, timesteps):
        super().__init__()
        self.channels = channels
        self.scale = 1000.0 / timesteps
        self.mlp = nn.Sequential(nn.Linear(channels, 4 * channels), nn.SiLU(), nn.Linear(4 * channels, 4 * channels))

    def forward(self, t, n, dtype):
        if not torch.is_tensor(t):
            t = torch.full((n,), float(t))
        t = t.reshape(-1).expand(n) if t.numel() == 1 else t.reshape(-1)
        return self.mlp(timestep_embedding(t * self.scale, self.channels, dtype))


class RefEncoder(nn.Module):
    """Reference image → bottleneck-resolution tokens plus one pooled token"""

    def __init__(self, config):
        super().__init__()
        layers = [nn.Conv2d(config.image_channels, config.channels, 3, padding=1), nn.SiLU()]
        ch = config.channels
        for _ in range(config.levels):
            layers += [nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.SiLU()]
            ch *= 2
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(ch, config.ref_dim)
        self.norm = nn.LayerNorm(config.ref_dim)

    def forward(self, image):
        feats = self.convs(image[None]).flatten(2).transpose(1, 2)[0]
        tokens = torch.cat([feats, feats.mean(dim=0, keepdim=True)], dim=0)
        return self.norm(self.proj(tokens))


# === DENOISERS ===

class MultiViewDenoiser(nn.Module):
    """
    NVS denoiser over a clip of views

    Input channels: noisy latent (3) + warped reference (3) + validity (1).
    No per-view positional embedding, so permuting views permutes outputs.
    """
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.time_embed = TimeEmbedding(config.channels, config.timesteps)
        self.camera_proj = nn.Linear(CAMERA_TAG_DIM, 4 * config.channels)
        self.ref_encoder = RefEncoder(config)
        self.null_context = nn.Parameter(torch.zeros(1, config.ref_dim))
        self.backbone = UNetBackbone(config, config.image_channels + 4, config.ref_dim, temporal=True)

    def embed_reference(self, ref_image):
        if ref_image is None:
            return self.null_context
        return self.ref_encoder(ref_image)

    def forward(self, z_t, t, cond):
        n = z_t.shape[0]
        x = torch.cat([z_t, cond.render_maps.to(z_t.dtype)], dim=1)
        temb = self.time_embed(t, n, z_t.dtype) + self.camera_proj(cond.camera_tag.to(z_t.dtype))
        context = self.embed_reference(cond.ref_image)
        return self.backbone(x, temb, context[None].expand(n, -1, -1))


class EditorDenoiser(nn.Module):
    """
    Per-view instruction editor

    Input channels: noisy latent (3) + source image (3). The edit code is a
    learned token read through cross-attention; index n_codes is the null code.

    The backbone output F is preconditioned the EDM way on the schedule's
    noise level s = σ_t/α_t: D = c_skip·x + c_out·F(c_in·x) with x = z_t/α_t,
    and ε̂ = (z_t − α_t·D)/σ_t, so few-step x0 predictions stay well scaled.
    """
    def __init__(self, config, n_codes, schedule, sigma_data=0.5):
        super().__init__()
        self.config = config
        self.n_codes = int(n_codes)
        self.sigma_data = float(sigma_data)
        self.time_embed = TimeEmbedding(config.channels, config.timesteps)
        self.code_embed = nn.Embedding(self.n_codes + 1, config.code_dim)
        self.backbone = UNetBackbone(config, 2 * config.image_channels, config.code_dim, temporal=False)
        dtype = torch.get_default_dtype()
        self.register_buffer('alphas', torch.as_tensor(schedule.alphas, dtype=dtype))
        self.register_buffer('sigmas', torch.as_tensor(schedule.sigmas, dtype=dtype))

    def _coefficients(self, t, n, dtype):
        idx = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        idx = idx.expand(n) if idx.numel() == 1 else idx
        if bool((idx < 1).any()) or bool((idx >= self.alphas.shape[0]).any()):
            raise ShapeMismatchError(f"editor steps must lie in [1, {self.alphas.shape[0] - 1}]")
        alpha = self.alphas[idx].to(dtype)[:, None, None, None]
        sigma = self.sigmas[idx].to(dtype)[:, None, None, None]
        return alpha, sigma

    def denoised(self, z_t, t, cond):
        """
        x0 prediction D and its output scale c_out

        Returns:
            tuple: (D, c_out), c_out broadcastable to D
        """
        n = z_t.shape[0]
        alpha, sigma = self._coefficients(t, n, z_t.dtype)
        level = sigma / alpha
        sd2 = self.sigma_data ** 2
        c_in = 1.0 / torch.sqrt(level ** 2 + sd2)
        c_skip = sd2 / (level ** 2 + sd2)
        c_out = level * self.sigma_data / torch.sqrt(level ** 2 + sd2)
        x = z_t / alpha

        source = torch.zeros_like(z_t) if cond.source is None else cond.source.to(z_t.dtype)
        h = torch.cat([c_in * x, source], dim=1)
        temb = self.time_embed(t, n, z_t.dtype)
        context = self.code_embed(self.code_indices(cond.code, n, z_t.device)).to(z_t.dtype)[:, None, :]
        return c_skip * x + c_out * self.backbone(h, temb, context), c_out

    def code_indices(self, code, n, device):
        if code is None:
            return torch.full((n,), self.n_codes, dtype=torch.long, device=device)
        if torch.is_tensor(code):
            return code.to(device=device, dtype=torch.long).reshape(-1).expand(n) if code.numel() == 1 \
                else code.to(device=device, dtype=torch.long)
        return torch.full((n,), int(code), dtype=torch.long, device=device)

    def forward(self, z_t, t, cond):
        alpha, sigma = self._coefficients(t, z_t.shape[0], z_t.dtype)
        x0_hat, _ = self.denoised(z_t, t, cond)
        return (z_t - alpha * x0_hat) / sigma


def denoise(model, z_t, t, cond):
    """
    Predict the noise of z_t

    Args:
        model (MultiViewDenoiser | EditorDenoiser): denoiser
        z_t (torch.Tensor): V×C×H×W noisy latents
        t (int | torch.Tensor): step, or one step per view
        cond (ConditionSignal | EditCondition): conditioning

    Returns:
        torch.Tensor: ε̂, same shape as z_t
    """
    config = model.config
    if z_t.dim() != 4 or z_t.shape[1] != config.image_channels:
        raise ShapeMismatchError(f"expected V×{config.image_channels}×H×W latents, got {tuple(z_t.shape)}")
    config.check_resolution(z_t.shape[2], z_t.shape[3])
    if isinstance(cond, ConditionSignal):
        if cond.render_maps.shape != (z_t.shape[0], 4, *z_t.shape[2:]):
            raise ShapeMismatchError(f"render maps {tuple(cond.render_maps.shape)} do not match latents {tuple(z_t.shape)}")
        if cond.camera_tag.shape != (z_t.shape[0], CAMERA_TAG_DIM):
            raise ShapeMismatchError(f"camera tags {tuple(cond.camera_tag.shape)} for {z_t.shape[0]} views")
    elif cond.source is not None and cond.source.shape != z_t.shape:
        raise ShapeMismatchError(f"source {tuple(cond.source.shape)} does not match latents {tuple(z_t.shape)}")
    return model(z_t, t, cond)


# === LOW-RANK ADAPTERS ===

class LoRALinear(nn.Module):
    """
    Linear layer with a low-rank delta: W0 + scale·B·A

    B (d×r) starts at zero so the wrapped layer initially reproduces the base.
    """
    def __init__(self, base, r, scale=1.0, generator=None):
        super().__init__()
        d, k = base.out_features, base.in_features
        if r < 1 or r >= min(d, k):
            raise LoRAError(f"rank {r} must satisfy 1 <= r < min({d}, {k})")
        self.base = base
        self.r = int(r)
        self.scale = float(scale)
        dtype = base.weight.dtype
        bound = 1.0 / math.sqrt(k)
        init = (torch.rand(r, k, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound
        self.lora_A = nn.Parameter(init)
        self.lora_B = nn.Parameter(torch.zeros(d, r, dtype=dtype))

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def delta_weight(self):
        return self.scale * self.lora_B @ self.lora_A

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def get_parent_module(model, full_name):
    parent = model
    for part in full_name.split('.')[:-1]:
        parent = getattr(parent, part)
    return parent


def attach_lora(model, layer_filter, r, scale=1.0, generator=None):
    """
    Wrap the attention projections selected by layer_filter with LoRALinear

    Every parameter that is not part of an adapter is frozen.

    Args:
        model (nn.Module): denoiser, modified in place
        layer_filter (str): 'temporal' or 'self_attention'
        r (int): adapter rank
        generator (torch.Generator, optional): RNG for the A matrices

    Returns:
        nn.Module: the same model
    """
    if layer_filter not in LORA_FILTERS:
        raise LoRAError(f"unknown layer filter {layer_filter!r}")
    segment = LORA_FILTERS[layer_filter]
    wrapped = {name for name, m in model.named_modules() if isinstance(m, LoRALinear)}
    targets = [
        name for name, module in model.named_modules()
        if isinstance(module, nn.Linear)
        and segment in name.split('.')
        and name.rsplit('.', 1)[0] not in wrapped
    ]
    if not targets:
        raise LoRAError(f"no linear layer matches filter {layer_filter!r}")

    for param in model.parameters():
        param.requires_grad_(False)
    for name in targets:
        parent = get_parent_module(model, name)
        child = name.rsplit('.', 1)[-1]
        setattr(parent, child, LoRALinear(getattr(parent, child), r, scale, generator))

    logger.info(f"LoRA rank {r} attached to {len(targets)} layers ({layer_filter})")
    return model


def lora_parameters(model):
    """Adapter parameters of a model, in registration order"""
    return [p for name, p in model.named_parameters() if '.lora_' in name or name.startswith('lora_')]


def lora_parameter_names(model):
    return [name for name, _ in model.named_parameters() if '.lora_' in name or name.startswith('lora_')]


def count_parameters(model, trainable_only=False):
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _canonical(name):
    return '.'.join(part for part in name.split('.') if part != 'base')


def parameter_diff(model_a, model_b):
    """
    Names of parameters present in both models that are not bitwise equal

    A wrapped projection ('to_q.base.weight') is matched with its unwrapped
    original ('to_q.weight'); adapters present in only one model are skipped.
    """
    params_b = {_canonical(name): p for name, p in model_b.named_parameters()}
    changed = []
    for name, p in model_a.named_parameters():
        other = params_b.get(_canonical(name))
        if other is not None and not torch.equal(p.detach(), other.detach()):
            changed.append(_canonical(name))
    return changed
