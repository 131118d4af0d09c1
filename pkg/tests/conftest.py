import math

import numpy as np
import pytest

from tempogs.geometry import Camera, look_at
from tempogs.splat import PARAM_NAMES, GaussianModel, backward, rasterize


def ring_camera(cid: int, azimuth_deg: float, radius: float = 3.0, height: float = 1.0,
                width: int = 64, height_px: int = 48, focal: float = 60.0) -> Camera:
    a = math.radians(azimuth_deg)
    rot, t = look_at((radius * math.cos(a), radius * math.sin(a), height), (0.0, 0.0, 0.0))
    return Camera(cid, width, height_px, focal, focal, width / 2, height_px / 2, rot, t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_camera(size=32):
    rot, t = look_at((0.3, -2.5, 0.8), (0.0, 0.0, 0.0))
    return Camera(0, size, size, 30.0, 30.0, size / 2 - 0.5, size / 2 - 0.3, rot, t)


def random_scene(rng, n):
    return GaussianModel(
        rng.normal(size=(n, 3)) * 0.3,
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(0.05, 0.25, size=(n, 3))),
        rng.uniform(-1.5, 1.5, size=n),
        rng.uniform(0.1, 0.9, size=(n, 3)),
    )


def finite_difference_errors(model, cam, bg, dl, h=1e-4):
    """Largest relative error and the absolute error at that entry, over every raw parameter."""
    grads = backward(rasterize(model, cam, bg), dl).as_dict()
    worst = (0.0, 0.0)
    for name in PARAM_NAMES:
        p = getattr(model, name)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = float(np.sum(rasterize(model, cam, bg).image * dl))
            p[idx] = old - h
            lm = float(np.sum(rasterize(model, cam, bg).image * dl))
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            abs_err = abs(fd - an)
            if abs_err <= 1e-6:
                continue
            rel = abs_err / max(abs(fd), abs(an))
            if rel > worst[0]:
                worst = (rel, abs_err)
    return worst


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
