import numpy as np
import pytest

from tempogs.confidence import (
    ConfidenceMap,
    build_confidence_maps,
    coverage,
    expand_to_pixels,
    patch_edges,
    patch_means,
    refine_confidence_maps,
    threshold_scores,
)
from tempogs.splat import GaussianModel, render

from conftest import ring_camera


def test_patch_edges_tile_the_image():
    e = patch_edges(96, 16)
    assert e[0] == 0 and e[-1] == 96 and len(e) == 17
    uneven = patch_edges(50, 16)
    assert uneven[-1] == 50 and np.all(np.diff(uneven) >= 3)
    with pytest.raises(ValueError):
        patch_edges(10, 11)


def test_patch_means_and_expand_are_consistent(rng):
    grid = rng.uniform(size=(4, 5))
    pix = expand_to_pixels(grid, 22, 27)
    np.testing.assert_allclose(patch_means(pix, (4, 5)), grid)


def test_threshold_example_grid():
    scores = np.array([[0.85, 0.50], [0.92, 0.79]])
    np.testing.assert_array_equal(threshold_scores(scores, 0.8), [[1, 0], [1, 0]])
    assert threshold_scores(np.array([[0.92]]), 0.92)[0, 0] == 1.0  # non-strict comparison


def test_map_validation():
    with pytest.raises(ValueError):
        ConfidenceMap(0, np.array([[1.5]]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        ConfidenceMap(0, np.ones((2, 2)), np.ones((2, 3)))


def test_record_round_trip(rng):
    m = ConfidenceMap(3, (rng.uniform(size=(4, 4)) > 0.5).astype(float), rng.uniform(size=(4, 4)))
    back = ConfidenceMap.from_record(m.to_record())
    np.testing.assert_array_equal(back.values, m.values)
    assert back.view_id == 3


def test_resample_to_finer_grid_keeps_coverage(rng):
    coarse = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    m = ConfidenceMap(0, coarse, coarse)
    fine = m.resample((32, 32), 96, 128)
    assert fine.shape == (32, 32)
    assert fine.mean() == pytest.approx(coarse.mean())


def _scene_views(rng, n_views=3):
    model = GaussianModel.isotropic(rng.uniform(-0.5, 0.5, size=(120, 3)), rng.uniform(0.03, 0.08, 120), 0.9,
                                    rng.uniform(size=(120, 3)))
    cams = [ring_camera(i, 120.0 * i) for i in range(n_views)]
    return model, [(c, render(model, c)) for c in cams]


def test_exact_model_is_fully_confident(rng):
    model, views = _scene_views(rng)
    maps = build_confidence_maps(model, views, (8, 8), 0.8)
    assert coverage(maps) == 1.0


def test_noise_render_is_not_confident(rng):
    model, views = _scene_views(rng, 1)
    noise = GaussianModel.isotropic(rng.uniform(-1, 1, size=(400, 3)), 0.01, 0.9, rng.uniform(size=(400, 3)))
    rendered = render(noise, views[0][0])
    gt = views[0][1]
    from tempogs.confidence import patch_scores

    scores = patch_scores(rendered + rng.uniform(0, 0.3, size=rendered.shape), gt, (8, 8))
    assert threshold_scores(scores, 0.8).mean() < 0.1


def test_refinement_is_monotone_and_unions(rng):
    model, views = _scene_views(rng, 2)
    prev = [ConfidenceMap(c.id, np.zeros((8, 8)), np.zeros((8, 8))) for c, _ in views]
    prev[0].values[:4] = 1.0
    # with an exact model every fine patch clears the threshold
    out = refine_confidence_maps(prev, model, views, (16, 16), 0.92)
    assert all(m.coverage() == 1.0 for m in out)
    # an empty model only matches the background, but earlier confident patches are kept
    empty = refine_confidence_maps(prev, GaussianModel.empty(), views, (16, 16), 0.92)
    assert empty[0].coverage() >= prev[0].coverage()
    assert np.all(empty[0].values[:8] == 1.0)
    assert empty[1].coverage() < 1.0


def test_refine_rejects_coarser_grid(rng):
    model, views = _scene_views(rng, 1)
    prev = [ConfidenceMap(views[0][0].id, np.zeros((8, 8)), np.zeros((8, 8)))]
    with pytest.raises(ValueError):
        refine_confidence_maps(prev, model, views, (4, 4), 0.92)
