# tests/test_metrics.py

import math

import numpy as np
import pytest
import torch

from app.services.metrics_service import (
    TOKEN_VOCAB, MetricsService, ToyEmbedder, info_nce, jitter_hue, view_pairs,
)
from app.services.worldgen_service import apply_edit, describe_scene, render_views
from app.utils.error_handler import DataValidationError, ShapeMismatchError
from app.utils.helpers import torch_generator


@pytest.fixture
def metrics():
    return MetricsService()


@pytest.fixture
def embedder():
    torch.manual_seed(0)
    return ToyEmbedder(embed_dim=8, channels=4).eval()


def test_view_pairs():
    assert view_pairs(4) == [(0, 1), (1, 2), (2, 3)]
    assert len(view_pairs(5, 'all')) == 10
    with pytest.raises(DataValidationError):
        view_pairs(4, 'random')


# === REPROJECTION ===

def test_source_renders_are_nearly_consistent(metrics, views):
    clean = metrics.reproj_inconsistency(views)
    jittered = metrics.reproj_inconsistency(views.with_images(jitter_hue(views.images, 0.4, torch_generator(0))))
    assert clean.skipped == 0
    assert len(clean.per_pair) == views.n - 1
    assert 0.0 <= clean.value < jittered.value
    assert clean.value <= 1 / 255


def test_ground_truth_edit_stays_consistent(metrics, world):
    scene, traj, views = world
    for code in (1, 3):
        edited = views.with_images(render_views(apply_edit(scene, code), traj, views.res).images)
        result = metrics.reproj_inconsistency(edited)
        assert result.skipped == 0
        assert result.value <= 2 / 255


def test_identical_images_on_one_view_pair(metrics, views):
    result = metrics.reproj_inconsistency(views.subset([0, 0]))
    assert result.value == pytest.approx(0.0, abs=1e-12)


# === EMBEDDINGS ===

def test_embeddings_are_unit_vectors(embedder, world):
    scene, _, views = world
    image_emb = embedder.embed_images(views.images)
    text_emb = embedder.embed_descriptions([describe_scene(scene)])
    assert np.allclose(np.linalg.norm(image_emb, axis=1), 1.0)
    assert np.allclose(np.linalg.norm(text_emb, axis=1), 1.0)
    with pytest.raises(DataValidationError):
        embedder.embed_descriptions([['teapot:red']])
    assert all(':' in token for token in TOKEN_VOCAB)


def test_info_nce(embedder):
    a = torch.nn.functional.normalize(torch.randn(4, 8, generator=torch_generator(0)), dim=-1)
    aligned = info_nce(a, a, torch.tensor(math.log(10.0)))
    shuffled = info_nce(a, a[[1, 2, 3, 0]], torch.tensor(math.log(10.0)))
    assert float(aligned) > 0.0
    assert float(aligned) < float(shuffled)


def test_unchanged_views_skip_directional_scores(metrics, embedder, world):
    scene, _, views = world
    desc = describe_scene(scene)
    per_view, per_pair, skipped = metrics.embed_metrics(views, views, desc, ['sphere:red'], embedder)
    assert skipped == {'embed_dir_sim': views.n, 'embed_dir_consistency': views.n - 1}
    assert per_view['embed_dir_sim'].isna().all()
    assert per_view['embed_sim'].notna().all()
    assert per_pair['embed_dir_consistency'].isna().all()
    with pytest.raises(ShapeMismatchError):
        metrics.embed_metrics(views.images[:2], views.images, desc, desc, embedder)


def test_evaluate_report(metrics, embedder, world):
    scene, _, views = world
    edited = views.with_images(np.clip(views.images * 1.3, 0.0, 1.0))
    desc = describe_scene(scene)
    report = metrics.evaluate(edited, views, desc, ['sphere:red'], embedder, reference=edited.images)
    aggregate = report.aggregate
    assert set(aggregate) == {'embed_sim', 'embed_dir_sim', 'psnr', 'embed_dir_consistency',
                              'reproj_inconsistency'}
    assert aggregate['psnr'] == math.inf
    assert list(report.per_pair.columns) == ['src', 'dst', 'embed_dir_consistency', 'reproj_inconsistency']

    summary = report.summary_frame(condition='distilled', seed=0)
    assert summary.loc[0, 'condition'] == 'distilled'
    assert summary.loc[0, 'skipped_reproj_inconsistency'] == 0

    unreferenced = metrics.evaluate(edited, views, desc, ['sphere:red'], embedder)
    assert math.isnan(unreferenced.aggregate['psnr'])


def test_embedder_dataset(metrics):
    images, descriptions = metrics.embedder_dataset(n_scenes=1, seed=0, res=(16, 16), n_views=2)
    assert images.shape == (12, 16, 16, 3)
    assert len(descriptions) == 12


@pytest.mark.slow
def test_trained_embedder_matches_renders_to_their_descriptions(metrics):
    model = metrics.train_embedder(steps=600, embed_dim=16, res=(16, 16), n_scenes=8, seed=100,
                                   generator=torch_generator(0))
    images, descriptions = metrics.embedder_dataset(n_scenes=4, seed=900, res=(16, 16), n_views=2)
    image_emb = model.embed_images(images)
    text_emb = model.embed_descriptions(descriptions)
    matched = np.sum(image_emb * text_emb, axis=1)
    mismatched = np.sum(image_emb * np.roll(text_emb, 7, axis=0), axis=1)
    assert np.mean(matched > mismatched) > 0.6
