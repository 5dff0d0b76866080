"""Tests for config module."""

import json
import os
from pathlib import Path
from unittest.mock import patch

import pytest

from senseflow.config import OUTPUT_ROOT_ENV, ExperimentConfig, from_dict, load_config
from senseflow.errors import ConfigError
from senseflow.models import MotionClass, OperatorPath

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    """Test default config values."""
    cfg = ExperimentConfig()
    assert cfg.n == 64
    assert cfg.readout == 64
    assert cfg.spokes_per_excitation == 16
    assert cfg.sampling is OperatorPath.DFFT
    assert cfg.correct.levels == 2


def test_shipped_profiles_load():
    """Test the bundled desk and full profiles parse."""
    desk = load_config(CONFIGS / "desk.toml")
    full = load_config(CONFIGS / "full.toml")
    assert desk.name == "desk"
    assert full.n == 192
    assert full.spokes_per_excitation == 12
    assert desk.correct.steps == full.correct.steps == 3
    assert sorted(p.name for p in CONFIGS.glob("*.toml")) == ["desk.toml", "full.toml"]


def test_toml_sections(tmp_path: Path):
    """Test section tables map onto their config classes."""
    path = tmp_path / "c.toml"
    path.write_text(
        'name = "t"\nn = 32\nn_spokes = 32\nn_exc = 4\nsampling = "nufft"\n'
        '[motion]\nmotion_class = "ffd"\nregion = [0.2, 0.1]\n'
        '[recon]\nn_cg = 3\n'
    )
    cfg = load_config(path)
    assert cfg.sampling is OperatorPath.NUFFT
    assert cfg.motion.motion_class is MotionClass.FFD
    assert cfg.motion.region == (0.2, 0.1)
    assert cfg.recon.n_cg == 3


def test_unknown_key_rejected(tmp_path: Path):
    """Test unknown keys at top level or in a section raise ConfigError."""
    path = tmp_path / "c.toml"
    path.write_text("colour = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[correct]\nlevelz = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize("data", [
    {"n": 7},
    {"n_spokes": 10, "n_exc": 3},
    {"noise_level": -0.1},
    {"sampling": "spiral"},
    {"projector": "wavelet"},
    {"n": 16, "correct": {"levels": 2}},
    {"recon": {"n_cg": 0}},
    {"motion": "rigid"},
])
def test_invalid_values_rejected(data):
    """Test invalid settings surface as ConfigError."""
    with pytest.raises(ConfigError):
        from_dict(data)


def test_bad_toml_and_missing_file(tmp_path: Path):
    """Test unreadable or malformed files raise ConfigError."""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("n = = 3\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_manifest_config_roundtrip(tmp_path: Path):
    """Test a manifest's config object reproduces the experiment config."""
    cfg = ExperimentConfig(name="m", n=32, n_spokes=32, n_exc=4).replace(**{"motion.motion_class": "affine"})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"version": "0.1.0", "config": cfg.to_dict()}))
    assert load_config(path) == cfg
    path.write_text(json.dumps({"version": "0.1.0"}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_replace_section_keys():
    """Test dotted overrides reach section configs and are validated."""
    cfg = ExperimentConfig().replace(**{"correct.levels": 1, "recon.tv_lambda": 0.01, "seed": 7})
    assert cfg.correct.levels == 1
    assert cfg.recon.tv_lambda == 0.01
    assert cfg.seed == 7
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(**{"correct.levels": -1})


def test_output_root_env_override():
    """Test the environment variable replaces the configured output root."""
    cfg = ExperimentConfig(name="x", output="runs")
    with patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/tmp/elsewhere"}):
        assert cfg.run_dir() == Path("/tmp/elsewhere/x")
    with patch.dict(os.environ, {OUTPUT_ROOT_ENV: ""}):
        assert cfg.run_dir() == Path("runs/x")
