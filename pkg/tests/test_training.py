import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempogs.config import TrainConfig
from tempogs.confidence import adaptation_phase
from tempogs.splat import GaussianModel, render
from tempogs.ssim import DEFAULT, ssim_map
from tempogs.training import NonFiniteLossError, Trainer, loss_init

from conftest import ring_camera


def images(rng, h=24, w=32):
    return rng.uniform(0.1, 0.8, size=(h, w, 3)), rng.uniform(0.1, 0.8, size=(h, w, 3))


def test_zero_confidence_gives_zero_loss(rng):
    r, t = images(rng)
    loss, grad = loss_init(r, t, np.zeros((4, 4)))
    assert loss == 0.0 and not grad.any()


def test_identical_images_give_zero_loss(rng):
    r, _ = images(rng)
    loss, _ = loss_init(r, r, np.ones((4, 4)))
    assert abs(loss) < 1e-9


def test_constant_offset_single_patch(rng):
    t, _ = images(rng)
    r = t + 0.1
    loss, _ = loss_init(r, t, np.ones((1, 1)), lam=0.2)
    # the SSIM of a constant shift follows from the windowed means alone
    expected_ssim = ssim_map(r, t, DEFAULT).mean()
    assert loss == pytest.approx(0.1 + 0.2 * (1 - expected_ssim), abs=1e-12)


def test_loss_is_nonnegative_and_gradient_matches_fd(rng):
    r, t = images(rng, 12, 16)
    conf = rng.uniform(size=(3, 4))
    for literal in (False, True):
        loss, grad = loss_init(r, t, conf, 0.2, literal=literal)
        assert loss >= 0
        h = 1e-6
        for _ in range(15):
            idx = tuple(int(rng.integers(0, s)) for s in r.shape)
            rp, rm = r.copy(), r.copy()
            rp[idx] += h
            rm[idx] -= h
            fd = (loss_init(rp, t, conf, 0.2, literal=literal)[0] - loss_init(rm, t, conf, 0.2, literal=literal)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_dimension_mismatch(rng):
    r, t = images(rng)
    with pytest.raises(ValueError):
        loss_init(r, t[:, :-1], np.ones((2, 2)))
    with pytest.raises(ValueError):
        loss_init(r, t, np.ones(4))


def _toy(rng, n=60):
    model = GaussianModel.isotropic(rng.uniform(-0.4, 0.4, size=(n, 3)), 0.08, 0.6, rng.uniform(size=(n, 3)))
    cams = [ring_camera(i, 90.0 * i) for i in range(4)]
    return model, cams


def test_training_reduces_loss(rng):
    truth, cams = _toy(rng)
    views = [(c, render(truth, c)) for c in cams]
    start = truth.copy()
    start.colors[:] = 0.5
    cfg = TrainConfig(max_iterations=120, densify=False)
    trainer = Trainer(start, cfg, extent=1.0)
    for i in range(120):
        trainer.step(*views[i % 4])
    assert np.mean(trainer.losses[-8:]) < 0.5 * np.mean(trainer.losses[:8])
    with pytest.raises(RuntimeError):
        trainer.step(*views[0])


def test_non_finite_loss_raises_with_snapshot(rng):
    truth, cams = _toy(rng)
    target = render(truth, cams[0])
    target[0, 0, 0] = np.nan
    trainer = Trainer(truth.copy(), TrainConfig(max_iterations=3), extent=1.0)
    with pytest.raises(NonFiniteLossError) as info:
        trainer.step(cams[0], target)
    assert info.value.snapshot["iteration"] == 0


def test_adaptation_fixed_point_and_input_untouched(rng):
    truth, cams = _toy(rng)
    views = [(c, render(truth, c)) for c in cams]
    before = truth.param_vector().copy()
    adapted = adaptation_phase(truth, views, steps=20, config=TrainConfig(max_iterations=20))
    np.testing.assert_array_equal(truth.param_vector(), before)
    # roundoff gradients still move parameters under Adam, but the renders stay put
    for cam, image in views:
        assert np.abs(render(adapted, cam) - image).mean() < 2e-3


def test_adaptation_rejects_zero_steps(rng):
    truth, cams = _toy(rng)
    with pytest.raises(ValueError):
        adaptation_phase(truth, [(cams[0], render(truth, cams[0]))], steps=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 6), cols=st.integers(1, 6),
       literal=st.booleans())
def test_loss_properties(seed, rows, cols, literal):
    rng = np.random.default_rng(seed)
    r, t = images(rng, 18, 20)
    conf = rng.uniform(size=(rows, cols)) * (rng.uniform(size=(rows, cols)) > 0.3)
    assert loss_init(r, t, conf, literal=literal)[0] >= 0.0
    assert abs(loss_init(t, t, conf, literal=literal)[0]) < 1e-9
