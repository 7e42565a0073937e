# app/services/metrics_service.py
# Evaluation metrics: toy image/description embedder (contrastive), embedding
# similarity scores, cross-view reprojection inconsistency and PSNR
# Reports are pandas tables so the pipeline can write them straight to CSV

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from app.models.scene import PRIMITIVE_KINDS
from app.services.base_service import BaseService
from app.services.worldgen_service import (
    EDIT_REGISTRY, PALETTE, describe_scene, generate_scene, make_trajectory, render_views, reproject,
)
from app.utils.error_handler import DataValidationError, ShapeMismatchError
from app.utils.helpers import cosine, images_to_tensor, psnr

logger = logging.getLogger(__name__)

TOKEN_VOCAB = tuple(
    [f"{kind}:{color}" for kind in PRIMITIVE_KINDS for color in PALETTE]
    + [f"{kind}:stripes" for kind in PRIMITIVE_KINDS]
)
TOKEN_INDEX = {token: i for i, token in enumerate(TOKEN_VOCAB)}
PAIR_MODES = ('adjacent', 'all')


def view_pairs(n, mode='adjacent'):
    """Consecutive trajectory indices, or every unordered pair"""
    if mode not in PAIR_MODES:
        raise DataValidationError(f"pairs must be one of {PAIR_MODES}, got {mode!r}")
    if mode == 'adjacent':
        return [(i, i + 1) for i in range(n - 1)]
    return list(combinations(range(n), 2))


# === TOY EMBEDDER ===

class ToyEmbedder(nn.Module):
    """
    Joint embedding of renders and scene-factor descriptions

    Images go through a small conv encoder; descriptions are bags of
    "<shape>:<colour>" tokens. Both land on the unit sphere.
    """
    def __init__(self, embed_dim=32, channels=16):
        super().__init__()
        self.embed_dim = int(embed_dim)
        self.image_encoder = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1), nn.SiLU(),
            nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * channels, 2 * channels, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * channels, embed_dim),
        )
        self.token_embed = nn.EmbeddingBag(len(TOKEN_VOCAB), embed_dim, mode='mean')
        self.text_proj = nn.Linear(embed_dim, embed_dim)
        self.log_temperature = nn.Parameter(torch.tensor(float(np.log(1 / 0.07))))

    def encode_images(self, images):
        return F.normalize(self.image_encoder(images), dim=-1)

    def encode_tokens(self, descriptions):
        flat, offsets = [], []
        for tokens in descriptions:
            offsets.append(len(flat))
            known = [TOKEN_INDEX[t] for t in tokens if t in TOKEN_INDEX]
            if not known:
                raise DataValidationError(f"description {tokens} has no known token")
            flat.extend(known)
        bag = self.token_embed(torch.as_tensor(flat, dtype=torch.long), torch.as_tensor(offsets, dtype=torch.long))
        return F.normalize(self.text_proj(bag), dim=-1)

    def embed_images(self, images):
        """N×H×W×3 array → N×D unit vectors (numpy)"""
        with torch.no_grad():
            return self.encode_images(images_to_tensor(np.asarray(images))).cpu().to(torch.float64).numpy()

    def embed_descriptions(self, descriptions):
        with torch.no_grad():
            return self.encode_tokens(descriptions).cpu().to(torch.float64).numpy()


def info_nce(image_emb, text_emb, log_temperature):
    """Symmetric contrastive loss over matching rows"""
    logits = image_emb @ text_emb.T * log_temperature.exp()
    target = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


# === REPORTS ===

@dataclass
class ReprojResult:
    value: float
    per_pair: pd.DataFrame
    skipped: int = 0


@dataclass
class MetricReport:
    """
    Per-view and per-pair metric tables with their aggregates

    Aggregates are means of the table columns, skipped entries (NaN) excluded.
    """
    per_view: pd.DataFrame
    per_pair: pd.DataFrame
    skipped: dict = field(default_factory=dict)

    @property
    def aggregate(self):
        values = {}
        for column in ('embed_sim', 'embed_dir_sim', 'psnr'):
            values[column] = _mean(self.per_view, column)
        for column in ('embed_dir_consistency', 'reproj_inconsistency'):
            values[column] = _mean(self.per_pair, column)
        return values

    def summary_frame(self, **labels):
        """One-row table: labels, aggregates and skip counts"""
        row = {**labels, **self.aggregate}
        row.update({f"skipped_{k}": v for k, v in sorted(self.skipped.items())})
        return pd.DataFrame([row])


def _mean(frame, column):
    if column not in frame or frame[column].dropna().empty:
        return float('nan')
    return float(frame[column].dropna().mean())


class MetricsService(BaseService):
    """Embedder training and metric computation"""

    # === EMBEDDER ===

    def embedder_dataset(self, n_scenes, seed, res, n_views=6):
        """
        Renders of procedural scenes and of their edited versions with their
        descriptions

        Returns:
            tuple: (N×H×W×3 images, list of token lists)
        """
        images, descriptions = [], []
        traj = make_trajectory(n_views=n_views)
        for k in range(n_scenes):
            scene = generate_scene(seed + k, 'small' if k % 2 else 'medium')
            for oracle in EDIT_REGISTRY.values():
                edited = oracle.apply(scene)
                views = render_views(edited, traj, res)
                images.append(views.images)
                descriptions.extend([describe_scene(edited)] * views.n)
        return np.concatenate(images), descriptions

    def train_embedder(self, steps=1500, embed_dim=32, res=(32, 32), n_scenes=24, seed=5000,
                       batch=32, lr=1e-3, generator=None):
        """
        Fit the toy embedder with the symmetric InfoNCE objective

        Rows of a batch sharing a description are not treated specially; with
        the small vocabulary that only softens the targets.
        """
        images, descriptions = self.embedder_dataset(n_scenes, seed, res)
        tensor = images_to_tensor(images)
        seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator).item())
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = ToyEmbedder(embed_dim)
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        self._log_operation("train_embedder", f"{len(images)} renders, {steps} steps")
        for step in tqdm(range(steps), desc="embedder", disable=not self.show_progress):
            idx = torch.randperm(len(images), generator=generator)[:batch]
            loss = info_nce(model.encode_images(tensor[idx]),
                            model.encode_tokens([descriptions[int(i)] for i in idx]),
                            model.log_temperature)
            self._check_finite("embedder loss", loss, step=step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step % 500 == 0:
                logger.info(f"embedder step {step}: loss {float(loss):.4f}")
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model

    # === METRICS ===

    def embed_metrics(self, edited, source, src_desc, tgt_desc, embedder, pairs='adjacent'):
        """
        Embedding-space edit scores

        similarity = cos(edited view, target description); directional
        similarity = cos(edited − source, target − source description);
        directional consistency = cos(Δ_i, Δ_j) over view pairs with
        Δ_i = edited_i − source_i. Zero-norm directions skip the entry.

        Args:
            edited (ViewSet | np.ndarray): edited views
            source (ViewSet | np.ndarray): source views
            src_desc (list[str]): source description tokens
            tgt_desc (list[str]): target description tokens
            embedder (ToyEmbedder): fixed embedder
            pairs (str): 'adjacent' or 'all'

        Returns:
            tuple: (per-view DataFrame, per-pair DataFrame, skip counts)
        """
        edited_images = getattr(edited, 'images', edited)
        source_images = getattr(source, 'images', source)
        if edited_images.shape != source_images.shape:
            raise ShapeMismatchError(f"edited {edited_images.shape} vs source {source_images.shape}")
        e_edit = embedder.embed_images(edited_images)
        e_src = embedder.embed_images(source_images)
        t_src, t_tgt = embedder.embed_descriptions([src_desc, tgt_desc])
        text_dir = t_tgt - t_src
        deltas = e_edit - e_src

        rows = []
        skipped_dir = 0
        for i in range(len(e_edit)):
            dir_sim = cosine(deltas[i], text_dir)
            skipped_dir += dir_sim is None
            rows.append({
                'view': i,
                'embed_sim': cosine(e_edit[i], t_tgt),
                'embed_dir_sim': np.nan if dir_sim is None else dir_sim,
            })

        pair_rows = []
        skipped_pairs = 0
        for i, j in view_pairs(len(e_edit), pairs):
            value = cosine(deltas[i], deltas[j])
            skipped_pairs += value is None
            pair_rows.append({'src': i, 'dst': j, 'embed_dir_consistency': np.nan if value is None else value})

        if skipped_pairs:
            logger.info(f"directional consistency: {skipped_pairs} pairs skipped (zero edit direction)")
        return pd.DataFrame(rows), pd.DataFrame(pair_rows), {
            'embed_dir_sim': skipped_dir, 'embed_dir_consistency': skipped_pairs,
        }

    def reproj_inconsistency(self, edited, pairs='adjacent', depth_tol=1e-2):
        """
        Mean absolute photometric error of warping edited view i onto view j
        over the co-visible pixels, averaged over view pairs

        Args:
            edited (ViewSet): edited images with the ground-truth geometry

        Returns:
            ReprojResult: value is NaN when every pair was skipped
        """
        rows = []
        skipped = 0
        for i, j in view_pairs(edited.n, pairs):
            warped, covisible = reproject(edited, edited.images, i, j, depth_tol)
            if not covisible.any():
                skipped += 1
                rows.append({'src': i, 'dst': j, 'reproj_inconsistency': np.nan, 'covisible': 0})
                continue
            error = np.abs(warped - edited.images[j])[covisible]
            rows.append({'src': i, 'dst': j, 'reproj_inconsistency': float(error.mean()),
                         'covisible': int(covisible.sum())})
        frame = pd.DataFrame(rows)
        value = _mean(frame, 'reproj_inconsistency')
        if skipped:
            logger.info(f"reprojection: {skipped} pairs without co-visible pixels skipped")
        return ReprojResult(value, frame, skipped)

    def evaluate(self, edited, source, src_desc, tgt_desc, embedder, reference=None, pairs='adjacent'):
        """
        Full metric report of an edited view set

        Args:
            reference (np.ndarray, optional): images the PSNR is measured against

        Returns:
            MetricReport
        """
        per_view, per_pair, skipped = self.embed_metrics(edited, source, src_desc, tgt_desc, embedder, pairs)
        reproj = self.reproj_inconsistency(edited, pairs)
        per_pair = per_pair.merge(reproj.per_pair[['src', 'dst', 'reproj_inconsistency']], on=['src', 'dst'])
        skipped['reproj_inconsistency'] = reproj.skipped
        if reference is not None:
            per_view['psnr'] = [psnr(edited.images[i], reference[i]) for i in range(edited.n)]
        else:
            per_view['psnr'] = np.nan
        report = MetricReport(per_view, per_pair, skipped)
        self._log_operation("evaluate", ", ".join(f"{k}={v:.4f}" for k, v in report.aggregate.items()))
        return report


def jitter_hue(images, amount, generator):
    """
    Independent per-view colour jitter (channel gains in [1 − amount, 1 + amount])
    """
    out = np.array(images, dtype=np.float64)
    for i in range(len(out)):
        gains = 1.0 + amount * (2.0 * torch.rand(3, generator=generator, dtype=torch.float64).numpy() - 1.0)
        out[i] = np.clip(out[i] * gains, 0.0, 1.0)
    return out
