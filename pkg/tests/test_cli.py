import hashlib
from pathlib import Path

import pytest
import yaml

from serbeam.cli import (EXIT_IO, EXIT_SCHEMA, RunConfig, load_config, main)

BASE_DOC = {
    "seed": 3,
    "system": {
        "n_tx": 8, "n_rf_tx": 4, "n_users": 2, "n_rx_per_user": 4,
        "n_rf_rx_per_user": 2, "streams_per_user": 1, "snr_db": -4.0,
    },
    "constellation": {"kind": "qpsk"},
    "channel": {"n_clusters": 2, "n_rays": 3, "train_count": 6,
                "test_count": 4, "val_count": 2},
    "gd": {"max_iters": 8, "sample_size": 8, "restarts": 1},
    "unfold": {"layers": 2, "batch_size": 3, "max_iters": 3,
               "sample_size": 8, "step_base": 0.002},
}


def write_config(tmp_path, doc=None, **overrides):
    doc = dict(doc or BASE_DOC)
    doc.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestConfigValidation:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_config(tmp_path, typo_section={})
        assert main(["-c", str(path), "--out", str(tmp_path / "o"),
                     "generate"]) == EXIT_SCHEMA

    def test_unknown_nested_key_rejected(self, tmp_path):
        doc = dict(BASE_DOC)
        doc["gd"] = {"max_iters": 8, "bogus": 1}
        path = write_config(tmp_path, doc)
        assert main(["-c", str(path), "--out", str(tmp_path / "o"),
                     "generate"]) == EXIT_SCHEMA

    def test_invalid_user_count_writes_nothing(self, tmp_path):
        doc = dict(BASE_DOC)
        doc["system"] = dict(doc["system"], n_users=0)
        path = write_config(tmp_path, doc)
        out = tmp_path / "o"
        assert main(["-c", str(path), "--out", str(out),
                     "generate"]) == EXIT_SCHEMA
        assert not (out / "channels_train.bin").exists()

    def test_resolved_config_is_echoed(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["-c", str(path), "--out", str(out), "generate"]) == 0
        resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
        assert resolved["system"]["n_tx"] == 8
        assert resolved["gd"]["max_iters"] == 8


class TestGenerate:
    def test_writes_train_and_test(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["-c", str(path), "--out", str(out), "generate"]) == 0
        assert (out / "channels_train.bin").exists()
        assert (out / "channels_test.bin").exists()

    def test_seed_repeat_gives_identical_files(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["-c", str(path), "--out", str(out1), "generate"]) == 0
        assert main(["-c", str(path), "--out", str(out2), "generate"]) == 0
        assert sha(out1 / "channels_train.bin") == sha(out2 / "channels_train.bin")


class TestPipeline:
    @pytest.fixture
    def generated(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "data"
        assert main(["-c", str(cfg), "--out", str(out), "generate"]) == 0
        return cfg, out

    def test_gd_writes_traces_and_csv(self, generated, tmp_path):
        cfg, data = generated
        out = tmp_path / "gd"
        assert main(["-c", str(cfg), "--out", str(out), "gd",
                     "--dataset", str(data / "channels_test.bin"),
                     "--limit", "2"]) == 0
        assert (out / "gd_ser.csv").exists()
        assert (out / "gd_trace_0000.csv").exists()

    def test_train_then_test(self, generated, tmp_path):
        cfg, data = generated
        out = tmp_path / "train"
        assert main(["-c", str(cfg), "--out", str(out), "train",
                     "--dataset", str(data / "channels_train.bin")]) == 0
        assert (out / "network.bin").exists()
        assert (out / "train_trace.csv").exists()
        out2 = tmp_path / "test"
        assert main(["-c", str(cfg), "--out", str(out2), "test",
                     "--dataset", str(data / "channels_test.bin"),
                     "--network", str(out / "network.bin"),
                     "--limit", "2"]) == 0
        assert (out2 / "test_ser.csv").exists()

    def test_test_with_mismatched_model_dims(self, generated, tmp_path):
        cfg, data = generated
        out = tmp_path / "train"
        assert main(["-c", str(cfg), "--out", str(out), "train",
                     "--dataset", str(data / "channels_train.bin")]) == 0
        doc = dict(BASE_DOC)
        doc["system"] = dict(doc["system"], n_tx=16)
        cfg2 = tmp_path / "other.yaml"
        cfg2.write_text(yaml.safe_dump(doc))
        assert main(["-c", str(cfg2), "--out", str(tmp_path / "t2"), "test",
                     "--dataset", str(data / "channels_test.bin"),
                     "--network", str(out / "network.bin")]) == EXIT_IO

    def test_missing_dataset_is_io_error(self, generated, tmp_path):
        cfg, _ = generated
        assert main(["-c", str(cfg), "--out", str(tmp_path / "x"), "gd",
                     "--dataset", str(tmp_path / "nope.bin")]) == EXIT_IO


class TestExperimentCommand:
    def test_single_point_snr_sweep(self, tmp_path):
        doc = dict(BASE_DOC)
        doc["experiment"] = {
            "scenario": "snr_sweep", "snr_db": [-5.0],
            "n_train_channels": 6, "n_val_channels": 2,
            "n_eval_channels": 2, "gd_iters": 10, "gd_restarts": 1,
            "unfold_layers": 2, "train_iters": 3, "train_batch": 3,
            "sample_size": 8,
        }
        path = write_config(tmp_path, doc)
        out = tmp_path / "exp"
        assert main(["-c", str(path), "--out", str(out), "--threads", "1",
                     "experiment"]) == 0
        assert (out / "results.csv").exists()
        assert (out / "results.svg").exists()


class TestGradcheck:
    def test_gradcheck_passes(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["-c", str(path), "--out", str(tmp_path / "g"),
                     "gradcheck"]) == 0


class TestRunConfig:
    def test_snr_and_noise_conflict(self, tmp_path):
        doc = dict(BASE_DOC)
        doc["system"] = dict(doc["system"], noise_std=0.1)
        with pytest.raises(Exception):
            RunConfig(doc)

    def test_loads_defaults(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path)
        assert cfg.system.n_users == 2
        assert cfg.constellation.kind == "qpsk"
        assert cfg.gd.max_iters == 8
