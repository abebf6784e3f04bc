import json
import shutil

import pytest

from oga.cli import main
from oga.pipeline import (DEFAULT_CONFIG, ConfigError, cmd_report, load_config,
                          parse_config_text)

FAST_OVERRIDES = {
    "epochs = 300": "epochs = 25",
    "nodes_per_class = 60": "nodes_per_class = 24",
}


def write_config(tmp_path, out_dir, extra=None, drop=None):
    text = DEFAULT_CONFIG
    for old, new in FAST_OVERRIDES.items():
        text = text.replace(old, new)
    text = text.replace("output_dir = run", f"output_dir = {out_dir}")
    for old, new in (extra or {}).items():
        text = text.replace(old, new)
    if drop:
        text = "\n".join(line for line in text.splitlines()
                         if not line.startswith(drop + " "))
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


class TestConfig:
    def test_default_config_parses_and_validates(self, tmp_path):
        path = write_config(tmp_path, tmp_path / "out")
        config = load_config(path)
        assert config["k"] == 5
        assert config["lambda"] == 10.0
        assert config["gamma"] == 0.6
        assert config["epsilon"] == 0.6

    def test_missing_epochs_key_is_named(self, tmp_path):
        path = write_config(tmp_path, tmp_path / "out", drop="epochs")
        with pytest.raises(ConfigError, match="epochs"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, tmp_path / "out")
        path.write_text(path.read_text() + "\nbogus_key = 1\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            load_config(path)

    def test_http_mode_without_endpoint_fails_before_compute(self, tmp_path, monkeypatch):
        monkeypatch.delenv("OGA_LLM_ENDPOINT", raising=False)
        monkeypatch.delenv("OGA_LLM_API_KEY", raising=False)
        path = write_config(tmp_path, tmp_path / "out",
                            extra={"llm_mode = mock": "llm_mode = http"})
        with pytest.raises((ConfigError, ValueError), match="endpoint"):
            load_config(path)

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("a = 1\na = 2\n")

    def test_overrides_replace_file_values(self, tmp_path):
        path = write_config(tmp_path, tmp_path / "out")
        config = load_config(path, {"seed": 123})
        assert config["seed"] == 123


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    out = tmp_path / "out"
    path = write_config(tmp_path, out)
    assert main(["pipeline", "--config", str(path)]) == 0
    return tmp_path, out, path


class TestPipelineRun:
    def test_all_artifacts_present(self, finished_run):
        _, out, _ = finished_run
        for name in ("nodes.csv", "edges.csv", "embeddings.bin", "truth.json",
                     "alt_model.bin", "rejection.csv", "communities.json",
                     "ledger.json", "llm_calls.json", "augmented_labels.csv",
                     "metrics.json", "run_manifest.json"):
            assert (out / name).exists(), name

    def test_metrics_shape_and_ranges(self, finished_run):
        _, out, _ = finished_run
        m = json.loads((out / "metrics.json").read_text())
        assert set(m) == {"accuracy", "coverage", "precision", "quality",
                          "backbone", "llm_calls"}
        for key in ("accuracy", "coverage", "precision"):
            assert 0.0 <= m[key] <= 1.0
        assert m["llm_calls"]["reduction"] == 1 - m["llm_calls"]["actual"] / m["llm_calls"]["pure"]
        assert m["backbone"]["lower"] <= m["backbone"]["ours"]

    def test_manifest_echoes_full_config(self, finished_run):
        _, out, path = finished_run
        manifest = json.loads((out / "run_manifest.json").read_text())
        config = load_config(path)
        assert manifest["config"] == config.values
        assert set(manifest["timings_seconds"]) == {
            "synth", "ingest", "alt-train", "alt-infer", "communities",
            "annotate", "evaluate"}

    def test_rerun_is_byte_identical(self, finished_run, tmp_path):
        src_tmp, out, path = finished_run
        out2 = tmp_path / "again"
        assert main(["pipeline", "--config", str(path), "--out", str(out2)]) == 0
        assert (out2 / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()
        assert (out2 / "rejection.csv").read_bytes() == (out / "rejection.csv").read_bytes()
        assert (out2 / "ledger.json").read_bytes() == (out / "ledger.json").read_bytes()

    def test_worker_count_does_not_change_metrics(self, finished_run, tmp_path):
        _, out, path = finished_run
        cfg = path.read_text().replace("llm_workers = 4", "llm_workers = 1")
        alt_path = tmp_path / "workers1.cfg"
        alt_path.write_text(cfg)
        out2 = tmp_path / "w1"
        assert main(["pipeline", "--config", str(alt_path), "--out", str(out2)]) == 0
        assert (out2 / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()

    def test_ledger_schema(self, finished_run):
        _, out, _ = finished_run
        ledger = json.loads((out / "ledger.json").read_text())
        assert set(ledger) == {"nodes", "communities", "fusion_trace"}
        assert all(set(rec) == {"id", "label", "provenance"} for rec in ledger["nodes"])
        assert all(rec["provenance"] in ("llm", "allocated", "distilled", "fused")
                   for rec in ledger["nodes"])

    def test_call_identity_in_llm_calls(self, finished_run):
        _, out, _ = finished_run
        calls = json.loads((out / "llm_calls.json").read_text())
        assert calls["total"] == (calls["low_seeds"] + calls["fallbacks"]
                                  + calls["distill"] + calls["fuse"])


class TestStages:
    def test_single_stage_failure_names_stage(self, finished_run, tmp_path):
        _, out, path = finished_run
        broken = tmp_path / "broken"
        broken.mkdir()
        shutil.copy(out / "nodes.csv", broken / "nodes.csv")
        shutil.copy(out / "edges.csv", broken / "edges.csv")
        shutil.copy(out / "embeddings.bin", broken / "embeddings.bin")
        # alt-infer without a trained model must fail, leaving inputs intact
        code = main(["alt-infer", "--config", str(path), "--out", str(broken)])
        assert code != 0
        assert (broken / "nodes.csv").exists()

    def test_stagewise_run_matches_pipeline(self, finished_run, tmp_path):
        _, out, path = finished_run
        staged = tmp_path / "staged"
        for stage in ("synth", "ingest", "alt-train", "alt-infer",
                      "communities", "annotate", "evaluate"):
            assert main([stage, "--config", str(path), "--out", str(staged)]) == 0
        assert (staged / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()


class TestReport:
    def test_summary_includes_reduction(self, finished_run):
        _, out, _ = finished_run
        text = cmd_report(out)
        assert "reduction" in text
        assert "Aspect 4" in text

    def test_json_flag_echoes_metrics(self, finished_run):
        _, out, _ = finished_run
        assert json.loads(cmd_report(out, as_json=True)) == \
            json.loads((out / "metrics.json").read_text())

    def test_missing_metrics_is_an_error(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="metrics.json"):
            cmd_report(tmp_path)

    def test_cli_report_missing_dir_exit_code(self, tmp_path):
        assert main(["report", str(tmp_path / "nope")]) == 3


class TestCliExitCodes:
    def test_config_error_is_exit_2(self, tmp_path):
        path = write_config(tmp_path, tmp_path / "out", drop="epochs")
        assert main(["pipeline", "--config", str(path)]) == 2

    def test_default_config_prints(self, capsys):
        assert main(["default-config"]) == 0
        out = capsys.readouterr().out
        assert "epochs = 300" in out
        assert "lambda = 10.0" in out
