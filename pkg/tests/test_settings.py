from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from src.config import OUTPUT_DIR_ENV, InnerKind, StrategyKind
from src.errors import ConfigError
from src.settings import config_from_dict, config_hash, derive, load_config, parse_override

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _raw(**changes):
    raw = {
        "name": "tiny",
        "seed": 3,
        "cluster": {
            "regions": ["r"],
            "bandwidth_gbps": [[10.0]],
            "workers": [{"region": "r", "speed": 1.0}, {"region": "r", "speed": 2.0}],
            "lps": [{"region": "r", "members": [0, 1]}],
            "gps_region": "r",
            "profiled_step_s": 0.1,
            "message_bytes": 1000,
        },
        "strategy": {"preset": "halos-paper", "accumulation": 2, "inner": {"kind": "sgd", "lr": 0.05}},
        "workload": {"kind": "quadratic", "dim": 4, "num_sources": 2},
        "stop": {"max_worker_steps": 40},
    }
    raw.update(changes)
    return raw


@pytest.fixture(autouse=True)
def _no_output_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


class TestLoading:
    def test_reference_config(self):
        config = load_config(CONFIGS / "reference-quadratic.yaml")
        assert len(config.cluster.workers) == 16
        assert len(config.cluster.lps) == 4
        assert config.strategy.kind is StrategyKind.HALOS
        assert config.strategy.merge_alpha == 0.25
        assert config.strategy.inner.kind is InnerKind.ADAMW

    @pytest.mark.parametrize(
        "name", ["reference-quadratic.yaml", "charlm-non-iid.yaml", "runtime-breakdown.yaml", "heterogeneous.yaml"]
    )
    def test_shipped_configs_validate(self, name):
        load_config(CONFIGS / name)

    def test_heterogeneous_config_uses_consistent_grouping(self):
        config = load_config(CONFIGS / "heterogeneous.yaml")
        assert [len(s.members) for s in config.cluster.lps] == [2] * 8
        assert config.strategy.accumulation == 8
        assert config.strategy.local_server.delay == 4

    def test_preset_fields_can_be_overridden(self):
        config = config_from_dict(_raw())
        assert config.strategy.accumulation == 2
        assert config.strategy.local_server.delay == 16

    def test_missing_latency_means_zero(self):
        config = config_from_dict(_raw())
        assert config.cluster.latency("r", "r") == 0.0

    def test_out_of_range_field_is_named(self):
        raw = _raw()
        raw["strategy"]["merge_alpha"] = 1.5
        with pytest.raises(ConfigError) as info:
            config_from_dict(raw)
        assert info.value.path == "strategy.merge_alpha"

    def test_unknown_key_is_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict(_raw(colour="blue"))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict(_raw(cluster="moon-base"))
        assert info.value.path == "cluster"

    def test_stop_needs_a_budget(self):
        with pytest.raises(ConfigError):
            config_from_dict(_raw(stop={}))

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("name: [unterminated\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_is_os_error(self, tmp_path):
        with pytest.raises(OSError):
            load_config(tmp_path / "absent.yaml")


class TestOverrides:
    def test_dotted_path(self):
        config = config_from_dict(_raw(), ["strategy.local_steps=4", "cluster.workers.0.speed=2.5"])
        assert config.strategy.local_steps == 4
        assert config.cluster.workers[0].speed == 2.5

    def test_alias(self):
        config = config_from_dict(_raw(), ["beta_g=0.7", "alpha=0.5"])
        assert config.strategy.server.beta == 0.7
        assert config.strategy.merge_alpha == 0.5

    def test_values_are_yaml_scalars(self):
        assert parse_override("replay.stop_at_loss=null") == ("replay.stop_at_loss", None)
        assert parse_override("strategy.dyn_updates=false") == ("strategy.dyn_updates", False)

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            parse_override("strategy.local_steps")

    def test_bad_list_index(self):
        with pytest.raises(ConfigError):
            config_from_dict(_raw(), ["cluster.workers.9.speed=2"])

    def test_output_dir_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
        assert config_from_dict(_raw()).output.dir == str(tmp_path)

    def test_override_file_round_trip(self, tmp_path):
        path = tmp_path / "tiny.yaml"
        path.write_text(yaml.safe_dump(_raw()), encoding="utf-8")
        assert load_config(path, ["seed=9"]).seed == 9


class TestDerive:
    def test_applies_changes(self):
        base = config_from_dict(_raw())
        changed = derive(base, {"K": 4, "name": "other"})
        assert changed.strategy.accumulation == 4
        assert changed.name == "other"
        assert base.strategy.accumulation == 2

    def test_validates(self):
        with pytest.raises(ConfigError):
            derive(config_from_dict(_raw()), {"alpha": -0.1})


class TestConfigHash:
    def test_format_and_stability(self):
        first = config_hash(config_from_dict(_raw()))
        assert len(first) == 16
        int(first, 16)
        assert config_hash(config_from_dict(_raw())) == first

    def test_ignores_output_and_thread_count(self):
        base = config_from_dict(_raw())
        moved = derive(base, {"output.dir": "/elsewhere", "replay.parallelism": 8})
        assert config_hash(moved) == config_hash(base)

    def test_tracks_semantic_changes(self):
        base = config_from_dict(_raw())
        assert config_hash(derive(base, {"seed": 4})) != config_hash(base)
        assert config_hash(derive(base, {"alpha": 0.5})) != config_hash(base)
