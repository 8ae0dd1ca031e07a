"""Config parsing, validation, round-trips, and benchmark builders."""

import numpy as np
import pytest

from diffrs.config import (
    ConfigError,
    ExperimentConfig,
    TargetSpec,
    ModelErrorSpec,
    apply_model_error,
    build_model,
    build_schedule,
    build_target,
    config_from_dict,
    config_to_toml,
    dump_config,
    parse_config,
)


def test_minimal_config_applies_defaults(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text("seed = 7\n")
    cfg = parse_config(path)
    assert cfg.seed == 7
    assert cfg.gamma == 80.0
    assert cfg.schedule.steps == 32
    assert cfg.resolved_max_evals() == 96
    assert cfg.strategies == ["FullDiffRS", "NoRejection"]


def test_missing_seed_names_the_key(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('out_dir = "x"\n')
    with pytest.raises(ConfigError, match="seed"):
        parse_config(path)


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="wat"):
        config_from_dict({"seed": 1, "wat": 2})


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError, match="schedule"):
        config_from_dict({"seed": 1, "schedule": {"steps": 4, "warmup": 1}})


def test_type_and_range_validation():
    with pytest.raises(ConfigError, match="gamma"):
        config_from_dict({"seed": 1, "gamma": 120.0})
    with pytest.raises(ConfigError, match="strategy"):
        config_from_dict({"seed": 1, "strategies": ["Bogus"]})
    with pytest.raises(ConfigError, match="estimator"):
        config_from_dict({"seed": 1, "estimator": "magic"})
    with pytest.raises(ConfigError, match="max_evals"):
        config_from_dict({"seed": 1, "max_evals": "sometimes"})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": "seven"})


def test_malformed_toml_reports_path(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("seed = [unclosed\n")
    with pytest.raises(ConfigError, match="broken.toml"):
        parse_config(path)


def test_roundtrip_preserves_all_fields(tmp_path):
    cfg = config_from_dict(
        {
            "seed": 3,
            "gamma": 85.0,
            "max_evals": "unbounded",
            "n_chains": 17,
            "strategies": ["FullDiffRS"],
            "target": {"preset": "pair1d", "separation": 3.0, "component_std": 0.4},
            "model_error": {"mean_shift": 0.25, "weight_tilt": 0.1},
            "schedule": {"steps": 6, "beta_start": 0.05, "beta_end": 0.5},
            "evaluation": {"n_reference": 500},
        }
    )
    path = tmp_path / "exp.toml"
    dump_config(cfg, path)
    assert parse_config(path) == cfg


def test_roundtrip_with_custom_components(tmp_path):
    cfg = config_from_dict(
        {
            "seed": 5,
            "target": {
                "preset": "custom",
                "dim": 1,
                "components": [
                    {"weight": 0.5, "mean": [0.0], "cov": [[1.0]]},
                    {"weight": 0.5, "mean": [2.0], "cov": [[0.5]]},
                ],
            },
        }
    )
    path = tmp_path / "exp.toml"
    dump_config(cfg, path)
    again = parse_config(path)
    assert again == cfg
    g = build_target(again.target)
    assert g.n_components == 2


def test_ring_target():
    g = build_target(TargetSpec(preset="ring", n_modes=8, radius=2.0, component_std=0.3))
    assert g.n_components == 8
    np.testing.assert_allclose(np.linalg.norm(g.means, axis=1), 2.0)
    np.testing.assert_allclose(g.covs[0], 0.09 * np.eye(2))
    with pytest.raises(ConfigError, match="two-dimensional"):
        build_target(TargetSpec(preset="ring", dim=3))


def test_pair1d_target():
    g = build_target(TargetSpec(preset="pair1d", separation=2.0, component_std=0.5))
    np.testing.assert_allclose(g.means.ravel(), [-1.0, 1.0])


def test_custom_target_requires_components():
    with pytest.raises(ConfigError, match="components"):
        build_target(TargetSpec(preset="custom"))


def test_apply_model_error_geometry():
    g = build_target(TargetSpec(preset="ring", n_modes=4, radius=1.5, component_std=0.3))
    err = ModelErrorSpec(mean_shift=0.5, weight_tilt=0.4, cov_scale=2.0)
    p = apply_model_error(g, err)
    # the shift vector has Euclidean length mean_shift
    np.testing.assert_allclose(
        np.linalg.norm(p.means[0] - g.means[0]), 0.5, atol=1e-12
    )
    assert p.weights.sum() == pytest.approx(1.0)
    assert not np.allclose(p.weights, g.weights)
    np.testing.assert_allclose(p.covs, 2.0 * g.covs)


def test_apply_model_error_identity():
    g = build_target(TargetSpec(preset="pair1d"))
    p = apply_model_error(g, ModelErrorSpec(mean_shift=0.0, weight_tilt=0.0, cov_scale=1.0))
    np.testing.assert_allclose(p.means, g.means)
    np.testing.assert_allclose(p.weights, g.weights)


def test_build_schedule_and_model():
    cfg = config_from_dict({"seed": 1, "schedule": {"steps": 5}})
    sched = build_schedule(cfg.schedule)
    assert sched.T == 5
    q0 = build_target(cfg.target)
    model = build_model(cfg, q0)
    assert model.kernel_mode == "exact_reverse"
    assert model.p0.dim == q0.dim


def test_toml_writer_escapes_strings():
    cfg = ExperimentConfig(seed=1, out_dir='runs/"quoted"')
    text = config_to_toml(cfg)
    assert '\\"quoted\\"' in text
