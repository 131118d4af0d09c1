import numpy as np
import pytest

from tempogs.confidence import ConfidenceMap
from tempogs.config import TrainConfig
from tempogs.geometry import PointCloud
from tempogs.optimizer import (
    TERMINATION_REASONS,
    TrainReport,
    _interleave,
    baseline_optimize,
    camera_extent,
    finetune_optimize,
    init_model_from_cloud,
    progressive_optimize,
    static_mask,
)
from tempogs.splat import GaussianModel, render

from conftest import ring_camera

SMALL = TrainConfig(max_iterations=40, adaptation_steps=10, refine_interval_epochs=2, initial_grid=(4, 4),
                    fine_grid=(8, 8), densify_from=10, densify_until=30, densify_interval=10)


def scene(rng, n=80):
    return GaussianModel.isotropic(rng.uniform(-0.5, 0.5, size=(n, 3)), rng.uniform(0.04, 0.09, n), 0.8,
                                   rng.uniform(size=(n, 3)))


def views_of(model, azimuths, start_id=0):
    cams = [ring_camera(start_id + i, a) for i, a in enumerate(azimuths)]
    return [(c, render(model, c)) for c in cams]


# -- initialization --------------------------------------------------------------


def test_one_gaussian_per_point(rng):
    cloud = PointCloud(rng.uniform(size=(57, 3)), rng.uniform(size=(57, 3)))
    model = init_model_from_cloud(cloud, TrainConfig(init_opacity=0.1))
    assert len(model) == 57
    np.testing.assert_allclose(model.means, cloud.points)
    np.testing.assert_allclose(model.colors, cloud.colors)
    np.testing.assert_allclose(model.opacities, 0.1)
    assert np.all(model.scales[:, 0] == model.scales[:, 1])


def test_single_point_gets_lower_clamp():
    model = init_model_from_cloud(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    assert len(model) == 1 and np.all(model.scales > 0)
    np.testing.assert_allclose(model.colors, 0.5)


def test_grid_spacing_sets_scale():
    g = np.arange(10) * 0.05
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    model = init_model_from_cloud(PointCloud(pts))
    interior = np.all((pts > 0.01) & (pts < 0.44), axis=1)
    np.testing.assert_allclose(model.scales[interior], 0.05, rtol=0.2)


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        init_model_from_cloud(PointCloud(np.zeros((0, 3))))


def test_camera_extent():
    cams = [ring_camera(i, 90.0 * i, radius=2.0) for i in range(4)]
    assert camera_extent(cams) == pytest.approx(2.2)


def test_interleave_keeps_each_order(rng):
    a, b = list(range(10)), list("abcde")
    out = _interleave(a, b, rng)
    assert [x for x in out if isinstance(x, int)] == a
    assert [x for x in out if isinstance(x, str)] == b
    assert _interleave(a, [], rng) == a


# -- report ----------------------------------------------------------------------


def test_report_check():
    TrainReport(coverage=[0.2, 0.3], iterations=5).check(5)
    with pytest.raises(AssertionError):
        TrainReport(coverage=[0.3, 0.2]).check(5)
    with pytest.raises(AssertionError):
        TrainReport(iterations=6).check(5)
    with pytest.raises(AssertionError):
        TrainReport(termination="tired").check(5)


# -- training loops ----------------------------------------------------------------


@pytest.fixture
def problem(rng):
    truth = scene(rng)
    t0 = views_of(truth, np.arange(0, 360, 30.0))
    tn = views_of(truth, [15.0, 105.0, 195.0, 285.0], start_id=100)
    cloud = PointCloud(truth.means + rng.normal(0, 0.01, truth.means.shape), truth.colors)
    return truth, cloud, t0, tn


def test_max_iterations_one(problem):
    _, cloud, t0, tn = problem
    cfg = SMALL.replace(max_iterations=1)
    model, report = baseline_optimize(cloud, tn, cfg)
    assert report.iterations == 1 and len(report.losses) == 1
    assert report.termination in TERMINATION_REASONS


def test_zero_confidence_matches_baseline(problem):
    truth, cloud, t0, tn = problem
    zero = [ConfidenceMap(c.id, np.zeros(SMALL.initial_grid), np.zeros(SMALL.initial_grid)) for c, _ in t0]
    prog, _, _ = progressive_optimize(truth, cloud, t0, tn, SMALL, maps=zero, refine=False)
    base, _ = baseline_optimize(cloud, tn, SMALL)
    np.testing.assert_array_equal(prog.param_vector(), base.param_vector())


def test_baseline_is_deterministic(problem):
    _, cloud, _, tn = problem
    a, ra = baseline_optimize(cloud, tn, SMALL)
    b, rb = baseline_optimize(cloud, tn, SMALL)
    np.testing.assert_array_equal(a.param_vector(), b.param_vector())
    assert ra.losses == rb.losses


def test_empty_views_rejected(problem):
    truth, cloud, t0, tn = problem
    with pytest.raises(ValueError):
        baseline_optimize(cloud, [], SMALL)
    with pytest.raises(ValueError):
        progressive_optimize(truth, cloud, [], tn, SMALL)
    with pytest.raises(ValueError):
        finetune_optimize(truth, [], SMALL)


def test_unchanged_scene_converges_early(problem):
    truth, cloud, t0, _ = problem
    # tn data identical to t0: everything is confident and coverage stops changing
    tn = views_of(truth, [0.0, 90.0, 180.0, 270.0], start_id=100)
    cfg = SMALL.replace(max_iterations=400)
    _, report, maps = progressive_optimize(truth, cloud, t0, tn, cfg)
    assert report.coverage[0] >= 0.9
    assert report.termination == "coverage_converged"
    assert report.iterations < cfg.max_iterations
    assert all(b >= a for a, b in zip(report.coverage, report.coverage[1:]))
    assert len(maps) == len(t0)


def test_static_freeze_keeps_static_gaussians(problem):
    truth, cloud, t0, _ = problem
    tn = views_of(truth, [0.0, 90.0, 180.0, 270.0], start_id=100)
    cfg = SMALL.replace(max_iterations=120, static_freeze=True, densify=False)
    model, report, maps = progressive_optimize(truth, cloud, t0, tn, cfg)
    assert report.termination == "max_iterations" and report.iterations == 120
    assert report.frozen > 0


def test_static_mask_full_confidence(problem):
    truth, _, t0, _ = problem
    maps = [ConfidenceMap(c.id, np.ones((4, 4)), np.ones((4, 4))) for c, _ in t0]
    assert static_mask(truth, maps, t0).all()
    maps = [ConfidenceMap(c.id, np.zeros((4, 4)), np.zeros((4, 4))) for c, _ in t0]
    assert not static_mask(truth, maps, t0).any()


def test_finetune_starts_from_g0(problem):
    truth, _, _, tn = problem
    model, report = finetune_optimize(truth, tn, SMALL.replace(max_iterations=5, densify=False))
    assert len(model) == len(truth) and report.iterations == 5
    assert not np.shares_memory(model.means, truth.means)
