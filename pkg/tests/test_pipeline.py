"""Tests for pipeline module."""

import csv
from pathlib import Path

import pytest

from senseflow.config import ExperimentConfig, from_dict
from senseflow.errors import ConfigError, StageError
from senseflow.manifest import MANIFEST_NAME, RunManifest
from senseflow.pipeline import (
    HISTORY_CSV,
    REPORT_CSV,
    REPORT_TXT,
    RIGID_CSV,
    Run,
    merge_reports,
    simulate_data,
    write_comparison,
)


def _config(tmp_path: Path, name: str = "tiny", **changes) -> ExperimentConfig:
    base = from_dict({
        "name": name, "n": 16, "n_spokes": 16, "n_exc": 2, "n_coils": 2, "output": str(tmp_path),
        "correct": {"levels": 1, "n_iter": 1, "n_cg": 3},
        "recon": {"n_cg": 3},
        "estimate": {"n_iter": 1, "levels": 1},
    })
    return base.replace(**changes) if changes else base


def _rows(path: Path) -> list[dict]:
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def test_simulate_is_bit_identical(tmp_path: Path):
    """Test two simulations of one config write byte-identical arrays."""
    cfg = _config(tmp_path)
    first = Run(cfg, tmp_path / "a")
    second = Run(cfg, tmp_path / "b")
    first.simulate()
    second.simulate()
    names = sorted(p.name for p in (tmp_path / "a").glob("*.snfl"))
    assert names == sorted(["s_ref.snfl", "U_ref.snfl", "coils.snfl", "trajectory.snfl", "y_clean.snfl", "y.snfl"])
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = RunManifest.load(tmp_path / "a")
    assert "simulate" in manifest.stages
    assert sorted(manifest.arrays) == names


def test_simulate_spoke_timing_and_noise(tmp_path: Path):
    """Test continuous motion keeps the reference state and noise is recorded."""
    cfg = _config(tmp_path, motion_timing="spoke", noise_level=0.05)
    data = simulate_data(cfg)
    assert data.U_ref.n_exc == 2
    assert data.problem.data.noise_level == 0.05
    assert data.problem.data.noise_power > 0


def test_full_pipeline_with_rigid_baseline(tmp_path: Path):
    """Test every stage runs and the report lists each method."""
    cfg = _config(tmp_path, **{"recon.tv_lambda": 0.01})
    run = Run(cfg)
    rows = run.run_all(baseline="rigid")
    names = [r.name for r in rows]
    assert names == ["static", "rigid", "estimate", "estimate+correct", "+TV"]
    run_dir = tmp_path / "tiny"
    assert [r["name"] for r in _rows(run_dir / REPORT_CSV)] == names
    assert "estimate+correct" in (run_dir / REPORT_TXT).read_text()
    assert len(_rows(run_dir / HISTORY_CSV)) == 2
    assert len(_rows(run_dir / RIGID_CSV)) == 2
    for png in ("s_ref.png", "s_final.png", "U_ref.png", "U_est.png", "grad_y.png", "precond_grad_y.png"):
        assert (run_dir / png).exists()
    manifest = RunManifest.load(run_dir)
    for stage in ("simulate", "per_excitation", "estimate", "rigid", "correct", "reconstruct", "evaluate"):
        assert stage in manifest.stages
    assert all(r.consistent(data_range=float(run.dataset.s_ref.values.max())) for r in rows)


def test_stages_resume_from_disk(tmp_path: Path):
    """Test a reopened run continues from the arrays of earlier stages."""
    cfg = _config(tmp_path)
    Run(cfg).simulate()
    reopened = Run.open(tmp_path / "tiny", **{"recon.n_cg": 2})
    assert reopened.config.recon.n_cg == 2
    reopened.estimate()
    assert reopened.has("s_exc") and reopened.has("U_est")
    assert reopened.sequence("U_est").n_exc == 2


def test_open_without_manifest(tmp_path: Path):
    """Test reopening a directory with no manifest raises ConfigError."""
    with pytest.raises(ConfigError):
        Run.open(tmp_path)


def test_stage_failure_is_wrapped(tmp_path: Path):
    """Test a stage missing its inputs raises StageError with an I/O exit code."""
    run = Run(_config(tmp_path))
    with pytest.raises(StageError) as info:
        run.per_excitation()
    assert info.value.stage == "per_excitation"
    assert info.value.exit_code == 3
    assert (tmp_path / "tiny" / MANIFEST_NAME).exists()


def _fake_run(root: Path, name: str, psnr: str, seconds: float) -> Path:
    run_dir = root / name
    run_dir.mkdir()
    (run_dir / REPORT_CSV).write_text(f"name,res,ssim,psnr,mse\nstatic,1.0,0.5,{psnr},2.0\n")
    manifest = RunManifest({"name": name})
    with manifest.stage("correct"):
        pass
    manifest.stages["correct"].seconds = seconds
    manifest.save(run_dir)
    return run_dir


def test_merge_reports_sorted_with_timings(tmp_path: Path):
    """Test merged rows are sorted by config and carry stage timings."""
    b = _fake_run(tmp_path, "beta", "20", 2.0)
    a = _fake_run(tmp_path, "alpha", "30", 1.0)
    rows, columns = merge_reports([b, a])
    assert [r["config"] for r in rows] == ["alpha", "beta"]
    assert rows[0]["t_correct"] == 1.0
    assert columns[0] == "config" and "t_correct" in columns
    out = tmp_path / "merged"
    text = write_comparison([a, b], out)
    assert "alpha" in text
    assert [r["config"] for r in _rows(out / REPORT_CSV)] == ["alpha", "beta"]


def test_merge_reports_missing_report(tmp_path: Path):
    """Test a run without report.csv is an error."""
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        merge_reports([tmp_path / "empty"])


def test_simulate_nufft_path(tmp_path: Path):
    """Test the gridding path stores samples per spoke and readout."""
    data = simulate_data(_config(tmp_path, sampling="nufft"))
    assert data.problem.data.values.shape == (2, 2, 8 * 16)
    assert data.clean.values.shape == data.problem.data.values.shape
