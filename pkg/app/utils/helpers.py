# app/utils/helpers.py
# Small helpers shared by the services: RNG streams, dtype handling,
# image conversions and image grids

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def default_dtype():
    """Torch dtype currently used for new tensors"""
    return torch.get_default_dtype()


def torch_generator(seed, device="cpu"):
    """
    Build a seeded torch.Generator

    Every stochastic operation takes its own generator so that two clips or
    two workers never share an RNG stream.
    """
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed))
    return gen


def derive_seed(seed, *labels):
    """
    Derive a child seed from a parent seed and a few labels

    Stable across processes (no reliance on Python's salted hash()).
    """
    payload = json.dumps([int(seed), *[str(label) for label in labels]]).encode('utf-8')
    return int.from_bytes(hashlib.sha256(payload).digest()[:4], 'little')


def randint(low, high, generator):
    """Uniform integer in [low, high] (both inclusive)"""
    return int(torch.randint(low, high + 1, (1,), generator=generator).item())


def images_to_tensor(images, dtype=None):
    """
    N×H×W×C numpy array in [0, 1] → N×C×H×W tensor
    """
    dtype = dtype or default_dtype()
    return torch.as_tensor(np.ascontiguousarray(images)).to(dtype).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(tensor, clamp=True):
    """
    N×C×H×W tensor → N×H×W×C float64 numpy array

    Clamping to [0, 1] happens here, at export time only.
    """
    array = tensor.detach().cpu().to(torch.float64).permute(0, 2, 3, 1).numpy()
    if clamp:
        array = np.clip(array, 0.0, 1.0)
    return array


def to_uint8(image):
    """Float image in [0, 1] → uint8 image"""
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, image):
    """Write an H×W×3 float image as PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def load_png(path):
    """Read a PNG into an H×W×3 float64 array in [0, 1]"""
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0


def make_grid(rows, pad=1, pad_value=1.0):
    """
    Tile a list of rows of H×W×3 images into one image

    Args:
        rows: list of lists of images (all the same size)
        pad: pixels between tiles

    Returns:
        np.ndarray: the grid image
    """
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    h, w, c = rows[0][0].shape
    grid = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad, c), pad_value)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y = pad + i * (h + pad)
            x = pad + j * (w + pad)
            grid[y:y + h, x:x + w] = img
    return grid


def cosine(a, b, eps=1e-12):
    """
    Cosine similarity of two vectors, None when either has zero norm
    """
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < eps or nb < eps:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def psnr(a, b):
    """Peak signal-to-noise ratio (dB) of two images in [0, 1]"""
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float('inf')
    return float(10.0 * np.log10(1.0 / mse))


def to_latent(images):
    """Images in [0, 1] → denoiser latents in [-1, 1] (pixel space, no autoencoder)"""
    return images * 2.0 - 1.0


def from_latent(latents):
    """Inverse of to_latent (no clamping)"""
    return (latents + 1.0) * 0.5
