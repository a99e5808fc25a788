"""Tests for configuration resolution."""

import pytest
import yaml

from rcdmkit import DEFAULT_CONFIG, __version__, get_version
from rcdmkit.config import Config, merge_config, parse_override
from rcdmkit.exceptions import ArtifactError, ConfigurationError

pytestmark = pytest.mark.unit


def test_import():
    """Test that the package can be imported."""
    assert __version__ is not None
    assert get_version() == __version__


def test_defaults_resolve():
    config = Config()
    assert config.get("schedule.steps") == DEFAULT_CONFIG["schedule"]["steps"]
    assert config.get("runtime.missing", "fallback") == "fallback"


def test_precedence_file_then_set_then_flags(tmp_path):
    path = tmp_path / "c.yaml"
    user = {"kde": {"sigma": 0.5}, "runtime": {"seed": 4}}
    path.write_text(yaml.safe_dump(user), encoding="utf-8")
    config = Config.load(
        path,
        ["kde.sigma=0.25", "runtime.seed=5"],
        {"runtime.seed": 6, "sample.count": None},
    )
    assert config.get("kde.sigma") == 0.25
    assert config.get("runtime.seed") == 6
    assert config.get("sample.count") == DEFAULT_CONFIG["sample"]["count"]


def test_override_values_are_typed():
    override = parse_override("attack.epsilons=[0.0, 0.1]")
    assert override == {"attack": {"epsilons": [0.0, 0.1]}}
    assert parse_override("runtime.progress=false") == {"runtime": {"progress": False}}
    with pytest.raises(ConfigurationError):
        parse_override("noequals")
    with pytest.raises(ConfigurationError):
        parse_override("nosection=1")


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError):
        merge_config(DEFAULT_CONFIG, {"kde": {"bandwidth": 1.0}})
    with pytest.raises(ConfigurationError):
        Config.load(None, ["nosuch.key=1"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ArtifactError):
        Config.load(tmp_path / "absent.yaml")


def test_save_and_reload_keeps_fingerprint(tmp_path):
    config = Config.load(None, ["kde.sigma=0.2"])
    config.save(tmp_path / "snapshot.yaml")
    assert Config.load(tmp_path / "snapshot.yaml").fingerprint() == config.fingerprint()


def test_bundled_presets_resolve(smoke_config):
    for name in ("default_config.yaml", "desk_config.yaml", "smoke_config.yaml"):
        Config.load(smoke_config.parent / name)
