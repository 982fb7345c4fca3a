import json

import pytest

from flowcascade.cli import main
from flowcascade.config import (
    ConfigError,
    PipelineConfig,
    config_hash,
    load_config,
    parse_config,
    save_config,
)


class TestConfig:
    def test_empty_config_gives_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{}")
        config = load_config(path)
        assert config == PipelineConfig()
        assert config.flow_state.ttl_ms == 10_000
        assert config.assignment.metric == "lc"

    def test_negative_ttl_names_key(self):
        with pytest.raises(ConfigError, match="ttl_ms"):
            parse_config({"flow_state": {"ttl_ms": -1}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key flow_state.ttl"):
            parse_config({"flow_state": {"ttl": 5}})
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config({"flowstate": {}})

    def test_missing_path_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="paths.cascade"):
            parse_config({"paths": {"cascade": str(tmp_path / "nope.json")}})

    def test_bad_metric_and_mode(self):
        with pytest.raises(ConfigError, match="metric"):
            parse_config({"assignment": {"metric": "variance"}})
        with pytest.raises(ConfigError, match="mode"):
            parse_config({"assignment": {"mode": "vibes"}})

    def test_round_trip_is_stable(self, tmp_path):
        original = tmp_path / "a.json"
        original.write_text(json.dumps({
            "flow_state": {"ttl_ms": 500, "n_slow_packets": 4},
            "assignment": {"metric": "entropy"},
            "harness": {"consumers": 3, "rates": [200.0, 400.0]},
        }))
        config = load_config(original)
        serialized = tmp_path / "b.json"
        save_config(config, serialized)
        again = load_config(serialized)
        assert again == config
        assert config_hash(again) == config_hash(config)

    def test_hash_changes_with_content(self):
        a = PipelineConfig()
        b = parse_config({"flow_state": {"ttl_ms": 123}})
        assert config_hash(a) != config_hash(b)

    def test_quantile_grid(self):
        grid = PipelineConfig().quantile_grid()
        assert grid[0] == pytest.approx(0.01)
        assert grid[-1] == pytest.approx(0.99)
        assert len(grid) == 99


@pytest.fixture(scope="module")
def workflow_dir(tmp_path_factory):
    """synth -> craft -> calibrate, shared by the CLI end-to-end tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    models = root / "models"
    assert main(["synth", "--out", str(data), "--seed", "3", "--flows", "600",
                 "--classes", "4", "--difficulty", "0.3", "--rate", "600"]) == 0
    assert main(["craft", "--dataset", str(data), "--out", str(models),
                 "--families", "dt,gbt", "--depths", "1,3",
                 "--gbt-rounds", "15", "--gbt-learning-rate", "0.25", "--gbt-leaves", "15",
                 "--f1-floor", "0.3"]) == 0
    cascade = root / "cascade.json"
    assert main(["calibrate", "--models", str(models), "--dataset", str(data),
                 "--out", str(cascade)]) == 0
    return root, data, models, cascade


class TestCliWorkflow:
    def test_craft_artifacts_exist(self, workflow_dir):
        _, _, models, _ = workflow_dir
        assert (models / "profiles.csv").exists()
        assert (models / "cascade_plan.json").exists()
        assert (models / "mask_d1.json").exists()
        plan = json.loads((models / "cascade_plan.json").read_text())
        assert plan["fastest"] is not None
        assert "config_hash" in plan

    def test_cascade_spec_loads(self, workflow_dir):
        _, _, _, cascade = workflow_dir
        from flowcascade.pipeline import load_cascade

        spec, n_slow = load_cascade(cascade)
        spec.validate()
        assert n_slow == 10 or n_slow == spec.slow.model.packet_depth if spec.slow else True

    def test_serve_writes_outcomes(self, workflow_dir, tmp_path):
        root, data, _, cascade = workflow_dir
        out = tmp_path / "outcomes.csv"
        doc = json.loads(cascade.read_text())
        n_slow = doc["n_slow_packets"] if doc.get("slow") else 1
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"flow_state": {"n_slow_packets": n_slow}}))
        rc = main(["serve", "--cascade", str(cascade), "--pcap", str(data / "bench.pcap"),
                   "--consumers", "2", "--speed", "0", "--out", str(out), "--config", str(config)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("key,label,decided_by")
        assert len(lines) == 601

    def test_bench_report(self, workflow_dir, tmp_path):
        root, data, _, cascade = workflow_dir
        out = tmp_path / "report.json"
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"harness": {"speed": 40.0}}))
        rc = main(["bench", "--cascade", str(cascade), "--trace", str(data / "bench.pcap"),
                   "--labels", str(data / "labels.csv"), "--consumers", "2",
                   "--out", str(out), "--config", str(config)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["admitted_flows"] == 600
        assert report["f1_weighted"] is not None
        assert sum(report["decided_by_histogram"].values()) == report["admitted_flows"]
        assert report["config_hash"]


class TestExitCodes:
    def test_validation_error_is_one(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"flow_state": {"ttl_ms": -5}}))
        data = tmp_path / "d"
        rc = main(["synth", "--out", str(data)])  # make inputs so only config is bad
        assert rc == 0
        rc = main(["serve", "--cascade", "x.json", "--pcap", "y.pcap",
                   "--out", str(tmp_path / "o.csv"), "--config", str(bad)])
        assert rc == 1

    def test_runtime_error_is_two(self, tmp_path):
        rc = main(["serve", "--cascade", str(tmp_path / "missing.json"),
                   "--pcap", str(tmp_path / "missing.pcap"), "--out", str(tmp_path / "o.csv")])
        assert rc == 2
