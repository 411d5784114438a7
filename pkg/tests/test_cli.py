"""End-to-end pipeline runs of the staged CLI on a desk-scale synthetic dataset."""

import json

import pytest

from trajmine.cli import load_config, main
from trajmine.errors import ConfigError

TINY = {
    "seed": 3,
    "data": {"n_examples": 30, "rare_rate": 0.2, "stride": 50},
    "features": {"scheme": "fixsegnum:3"},
    "mining": {"lambda": 0.5, "r": [0.2]},
    "flow": {"n_couplings": 2, "hidden": 16},
    "training": {"epochs": 2, "batch_size": 8, "patience": 2},
}


def write_config(tmp_path, payload=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_pipeline(out, config, stages=("gen", "ingest", "features", "train", "score", "mine", "eval")):
    for stage in stages:
        code = main([stage, "--config", config, "--out", str(out)])
        assert code == 0, f"stage {stage} failed"


class TestPipeline:
    def test_full_pipeline_produces_artifacts(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        run_pipeline(out, config)
        for name in (
            "tracks.csv", "rare_flags.json", "examples.jsonl",
            "features_x.bin", "features_z.bin",
            "model_x.flow", "model_z.flow", "trainlog_x.csv", "trainlog_z.csv",
            "scores.csv", "mined_r0.2.csv", "mined_r0.2.json",
            "report_r0.2.json", "errors.csv", "histograms.csv",
        ):
            assert (out / name).exists(), name
        report = json.loads((out / "report_r0.2.json").read_text())
        assert set(report["subsets"]) == {"rare_hist", "rare_full", "hard", "random", "reference"}
        assert report["subsets"]["hard"]["size"] == 6  # floor(0.2 * 30)

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_pipeline(out_a, config)
        run_pipeline(out_b, config)
        for name in ("scores.csv", "mined_r0.2.csv", "mined_r0.2.json",
                     "report_r0.2.json", "errors.csv", "model_x.flow"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    def test_mine_before_score_is_prerequisite_error(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["mine", "--config", config, "--out", str(tmp_path / "out")]) == 3

    def test_bad_config_file_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "out")]) == 2

    def test_unknown_config_key_exit_2(self, tmp_path):
        config = write_config(tmp_path, {"data": {"n_exmaples": 10}})
        assert main(["gen", "--config", config, "--out", str(tmp_path / "out")]) == 2

    def test_changed_config_refused_downstream(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        run_pipeline(out, config, stages=("gen", "ingest", "features", "train", "score"))
        # touching a pipeline-hash field invalidates the scored artifacts
        changed = dict(TINY)
        changed["flow"] = {"n_couplings": 3, "hidden": 16}
        config2 = write_config(tmp_path, changed, name="cfg2.json")
        assert main(["mine", "--config", config2, "--out", str(out)]) == 2

    def test_lambda_and_r_overrides(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        run_pipeline(out, config, stages=("gen", "ingest", "features", "train"))
        assert main(["score", "--config", config, "--out", str(out), "--lambda", "0.0"]) == 0
        assert main(["mine", "--config", config, "--out", str(out), "--r", "0.1,0.3"]) == 0
        assert (out / "mined_r0.1.csv").exists() and (out / "mined_r0.3.csv").exists()
        mined = json.loads((out / "mined_r0.3.json").read_text())
        assert mined["lambda"] == 0.0 and mined["sizes"]["hard"] == 9

    def test_external_error_file_adds_coverage(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        run_pipeline(out, config)
        # feed the pipeline's own Kalman errors back in as a "downstream model"
        payload = json.loads(json.dumps(TINY))
        payload["eval"] = {"external_errors": str(out / "errors.csv")}
        config2 = write_config(tmp_path, payload, name="ext.json")
        assert main(["eval", "--config", config2, "--out", str(out)]) == 0
        report = json.loads((out / "report_r0.2.json").read_text())
        for metrics in report["subsets"].values():
            assert metrics["cov_ext"] == metrics["cov_ref"]

    def test_csv_source_roundtrip(self, tmp_path):
        # generate with one config, then re-ingest the CSV as an external file
        gen_config = write_config(tmp_path)
        gen_out = tmp_path / "gen_out"
        run_pipeline(gen_out, gen_config, stages=("gen",))
        payload = json.loads(json.dumps(TINY))
        payload["data"].update(
            source="csv",
            csv=str(gen_out / "tracks.csv"),
            rare_flags=str(gen_out / "rare_flags.json"),
        )
        config = write_config(tmp_path, payload, name="csv_cfg.json")
        out = tmp_path / "csv_out"
        run_pipeline(out, config, stages=("ingest", "features", "train", "score", "mine", "eval"))
        assert (out / "report_r0.2.json").exists()


class TestAblate:
    def test_ablation_grid(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        run_pipeline(out, config)
        assert main(["ablate", "--config", config, "--out", str(out)]) == 0
        lambda_cells = sorted(p.name for p in (out / "ablate").glob("lambda_*"))
        scheme_cells = sorted(p.name for p in (out / "ablate").glob("scheme_*"))
        assert len(lambda_cells) == 11
        assert scheme_cells == [
            "scheme_fixseglen_0.6", "scheme_fixseglen_1", "scheme_fixseglen_1.4",
            "scheme_fixsegnum_1", "scheme_fixsegnum_3", "scheme_fixsegnum_5",
        ]
        summary = (out / "ablate" / "summary.csv").read_text().splitlines()
        # header + 17 cells * 1 ratio * 5 subsets
        assert len(summary) == 1 + 17 * 5
        # lambda=0 cell: hard mining degenerates to the full-trajectory subset
        cell = out / "ablate" / "lambda_0"
        mined = json.loads((cell / "mined_r0.2.json").read_text())
        assert mined["lambda"] == 0.0


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config(None)
        assert cfg["mining"]["lambda"] == 0.5
        assert cfg["features"]["scheme"] == "fixsegnum:5"

    def test_toml_config(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text('seed = 9\n[mining]\nlambda = 0.25\nr = [0.1]\n')
        cfg = load_config(path)
        assert cfg["seed"] == 9 and cfg["mining"]["lambda"] == 0.25

    def test_toml_parse_error_mentions_line(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("seed = \n")
        with pytest.raises(ConfigError, match="line"):
            load_config(path)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/cfg.toml")
