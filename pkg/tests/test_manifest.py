"""Tests for manifest module."""

import json
from pathlib import Path
from unittest.mock import patch

import pytest

from senseflow import __version__
from senseflow.manifest import MANIFEST_NAME, RunManifest, _safe_write_json, read_json


def test_safe_write_and_read(tmp_path: Path):
    """Test atomic writes leave only the target file and read back."""
    path = tmp_path / "sub" / "doc.json"
    assert _safe_write_json(path, {"a": 1})
    assert read_json(path) == {"a": 1}
    assert not list(path.parent.glob("*.tmp"))


def test_read_json_missing_or_corrupt(tmp_path: Path):
    """Test missing, corrupt and non-object files read as None."""
    assert read_json(tmp_path / "none.json") is None
    (tmp_path / "bad.json").write_text("{not json")
    assert read_json(tmp_path / "bad.json") is None
    (tmp_path / "list.json").write_text("[1, 2]")
    assert read_json(tmp_path / "list.json") is None


def test_safe_write_reports_failure(tmp_path: Path):
    """Test a failing rename returns False and cleans up the temp file."""
    with patch("pathlib.Path.rename", side_effect=OSError("read-only")):
        assert not _safe_write_json(tmp_path / "doc.json", {"a": 1})
    assert not list(tmp_path.glob("*.tmp"))


def test_manifest_save_and_load(tmp_path: Path):
    """Test a manifest survives save and load with arrays sorted."""
    manifest = RunManifest({"name": "t"})
    manifest.add_array("y.snfl")
    manifest.add_array("s_ref.snfl")
    manifest.add_array("y.snfl")
    manifest.save(tmp_path)
    data = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert data["arrays"] == ["s_ref.snfl", "y.snfl"]
    assert data["version"] == __version__
    loaded = RunManifest.load(tmp_path)
    assert loaded.config == {"name": "t"}
    assert loaded.arrays == ["s_ref.snfl", "y.snfl"]


def test_manifest_load_missing(tmp_path: Path):
    """Test loading from an empty directory returns None."""
    assert RunManifest.load(tmp_path) is None


def test_manifest_save_failure_raises(tmp_path: Path):
    """Test save raises OSError when the write fails."""
    with patch("senseflow.manifest._safe_write_json", return_value=False):
        with pytest.raises(OSError):
            RunManifest({}).save(tmp_path)


def test_stage_records_time_and_memory():
    """Test stage timing accumulates and memory is positive, even on error."""
    manifest = RunManifest({})
    with patch("senseflow.manifest.time.perf_counter", side_effect=[10.0, 12.5, 20.0, 21.0]):
        with manifest.stage("estimate"):
            pass
        with pytest.raises(RuntimeError):
            with manifest.stage("estimate"):
                raise RuntimeError("boom")
    record = manifest.stages["estimate"]
    assert record.seconds == pytest.approx(3.5)
    assert record.rss_mb > 0
    roundtrip = RunManifest.from_dict(manifest.to_dict())
    assert roundtrip.stages["estimate"].seconds == pytest.approx(3.5)
