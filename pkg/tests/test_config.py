import pytest

from tempogs.config import TrainConfig


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.max_iterations, cfg.adaptation_steps, cfg.refine_interval_epochs) == (7000, 500, 108)
    assert (cfg.tau, cfg.tau_iter, cfg.coverage_convergence) == (0.8, 0.92, 0.02)
    assert cfg.initial_grid == (16, 16) and cfg.fine_grid == (32, 32)


@pytest.mark.parametrize("changes", [
    {"tau": 0.95}, {"tau_iter": 1.0}, {"refine_interval_epochs": 0}, {"coverage_convergence": 0.0},
    {"max_iterations": 0},
])
def test_invalid_values_rejected(changes):
    with pytest.raises(ValueError):
        TrainConfig().replace(**changes)


def test_toml_overlay(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("max_iterations = 300\ntau = 0.7\n[lr]\ncolor = 0.01\n[ssim]\ncontrast_exponent = 0.25\n")
    cfg = TrainConfig.from_toml(path)
    assert cfg.max_iterations == 300 and cfg.tau == 0.7
    assert cfg.lr.color == 0.01 and cfg.lr.rotation == 1e-3
    assert cfg.ssim.contrast_exponent == 0.25 and cfg.ssim.window == 11


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("max_iteration = 3\n")
    with pytest.raises(KeyError, match="max_iteration"):
        TrainConfig.from_toml(path)


def test_dict_round_trip():
    cfg = TrainConfig(seed=5).replace(initial_grid=(8, 8))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
