"""End-to-end tests of the command-line pipeline: config validation, exit
codes, artifact layout, determinism and the self-consistency of emitted logs
and reports."""

import csv
import json
import os

import numpy as np
import pytest

from kssdiag import cli, config as configmod, data, metrics

TINY = {
    "seed": 7,
    "data": {
        "synthetic": {
            "n_classes": 5, "n_attributes": 4, "n_features": 10,
            "train_per_class": 40, "test_per_class": 10, "n_unseen": 1,
        }
    },
    "generator": {
        "feature_dim": 4, "extractor_hidden": [8], "recognizer_hidden": [6],
        "reconstructor_lift": 8, "disc_hidden": [16], "disc_embed": 8,
        "disc_head_hidden": [4], "pretrain_epochs": 2, "epochs": 2,
        "batch_per_class": 4,
    },
    "gate": {"ap_hidden": [16], "ap_epochs": 10, "ap_batch": 64, "n_components": 2},
}


def write_config(tmp_path, name="config.json", **overrides):
    payload = json.loads(json.dumps(TINY))
    payload["out_dir"] = str(tmp_path / "out")
    for key, value in overrides.items():
        if value is None:
            payload.pop(key, None)
        else:
            payload[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


class TestConfigLoading:
    def test_missing_seed_rejected(self, tmp_path):
        path = write_config(tmp_path, seed=None)
        with pytest.raises(configmod.ConfigError, match="seed"):
            configmod.load_config(path)

    def test_seed_override_satisfies_requirement(self, tmp_path):
        path = write_config(tmp_path, seed=None)
        cfg = configmod.load_config(path, seed_override=5)
        assert cfg.seed == 5

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_config(tmp_path, extra_knob=1)
        with pytest.raises(configmod.ConfigError, match="unknown"):
            configmod.load_config(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(configmod.ConfigError, match="JSON"):
            configmod.load_config(str(path))

    def test_missing_data_files_rejected(self, tmp_path):
        path = write_config(tmp_path, data={
            "train_csv": "absent.csv", "test_csv": "absent.csv",
            "attributes_csv": "absent.csv", "split": {"seen": [1], "unseen": [2]},
        })
        with pytest.raises(configmod.ConfigError, match="do not exist"):
            configmod.load_config(path)

    def test_builtin_group_split_resolves(self, tmp_path):
        for stem in ("train", "test"):
            (tmp_path / f"{stem}.csv").write_text("0.0,1\n")
        rows = ["class," + ",".join(f"att_{k}" for k in range(1, 6))]
        for cid in range(1, 16):
            bits = [(cid >> b) & 1 for b in range(5)]  # distinct by construction
            rows.append(f"{cid}," + ",".join(str(b) for b in bits))
        (tmp_path / "attributes.csv").write_text("\n".join(rows) + "\n")
        path = write_config(tmp_path, data={
            "train_csv": "train.csv", "test_csv": "test.csv",
            "attributes_csv": "attributes.csv", "split": "a",
        })
        cfg = configmod.load_config(path)
        assert cfg.split.unseen == (1, 7, 15)

    def test_hash_tracks_hyperparams_and_losses(self, tmp_path):
        cfg = configmod.load_config(write_config(tmp_path))
        base = configmod.config_hash(cfg, "m" * 64)
        assert base == configmod.config_hash(cfg, "m" * 64)
        other_cfg = configmod.load_config(write_config(
            tmp_path, name="other.json",
            gate={**TINY["gate"], "n_components": 3}))
        assert configmod.config_hash(other_cfg, "m" * 64) != base
        assert configmod.config_hash(cfg, "m" * 64, frozenset({"ar"})) != base
        assert configmod.config_hash(cfg, "x" * 64) != base


class TestSynth:
    def test_deterministic_files(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["synth", "--config", path]) == 0
        first = {f: (out / f).read_bytes()
                 for f in ("train.csv", "test.csv", "attributes.csv", "split.json")}
        assert cli.main(["synth", "--config", path]) == 0
        for name, blob in first.items():
            assert (out / name).read_bytes() == blob

    def test_written_files_reload_to_same_matrix(self, tmp_path):
        path = write_config(tmp_path)
        cli.main(["synth", "--config", path])
        out = tmp_path / "out"
        cfg = configmod.load_config(path)
        matrix, _, _ = configmod.resolve_data(cfg)
        loaded = data.load_attribute_matrix(str(out / "attributes.csv"))
        split = json.loads((out / "split.json").read_text())
        loaded = loaded.with_split(split["seen"], split["unseen"])
        assert data.matrix_fingerprint(loaded) == data.matrix_fingerprint(matrix)

    def test_requires_synthetic_block(self, tmp_path, capsys):
        for stem in ("train", "test", "attributes"):
            (tmp_path / f"{stem}.csv").write_text("1,2\n")
        path = write_config(tmp_path, data={
            "train_csv": "train.csv", "test_csv": "test.csv",
            "attributes_csv": "attributes.csv",
            "split": {"seen": [1], "unseen": [2]},
        })
        assert cli.main(["synth", "--config", path]) == 2
        assert "synthetic" in capsys.readouterr().err


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("e2e")
    path = write_config(tmp_path)
    rc = cli.main(["e2e", "--config", path])
    assert rc == 0
    return tmp_path, path, tmp_path / "out"


class TestPipelineArtifacts:
    EXPECTED = (
        "discriminator.json", "generator.json", "gate.json",
        "pretrain_log.json", "generator_log.json",
        "predictions.csv", "report.json", "projections.csv",
        "pretrain_loss.png", "generator_loss.png",
        "confusion.png", "accuracy.png", "projections.png",
    )

    def test_all_artifacts_written(self, e2e_run):
        _, _, out = e2e_run
        for name in self.EXPECTED:
            assert (out / name).is_file(), name
            assert (out / name).stat().st_size > 0, name

    def test_report_self_consistency(self, e2e_run):
        _, _, out = e2e_run
        payload = json.loads((out / "report.json").read_text())
        acc = {int(c): v for c, v in payload["acc_per_class"].items()}
        seen = [c for c in acc if c <= 4]
        unseen = [c for c in acc if c == 5]
        acc_s = np.mean([acc[c] for c in seen])
        acc_u = np.mean([acc[c] for c in unseen])
        assert payload["acc_s"] == pytest.approx(acc_s)
        assert payload["acc_u"] == pytest.approx(acc_u)
        assert payload["har"] == pytest.approx(
            metrics.harmonic_mean(acc_s, acc_u), abs=1e-12)

    def test_predictions_table(self, e2e_run):
        _, _, out = e2e_run
        rows = list(csv.reader((out / "predictions.csv").read_text().splitlines()))
        assert rows[0] == ["sample_index", "true_label", "predicted_label", "path"]
        assert len(rows) == 1 + 50  # 5 classes x 10 test samples
        assert {r[3] for r in rows[1:]} <= {"coarse", "fine-seen", "fine-unseen"}
        payload = json.loads((out / "report.json").read_text())
        assert sum(payload["path_counts"].values()) == 50

    def test_projections_table(self, e2e_run):
        _, _, out = e2e_run
        rows = list(csv.reader((out / "projections.csv").read_text().splitlines()))
        assert rows[0] == ["z_1", "z_2", "z_3", "z_4", "label"]
        assert len(rows) == 1 + 50

    def test_loss_log_columns_sum_to_total(self, e2e_run):
        _, _, out = e2e_run
        payload = json.loads((out / "generator_log.json").read_text())
        assert len(payload["epochs"]) == TINY["generator"]["epochs"]
        for row in payload["epochs"]:
            parts = row["ar"] + row["av"] + row["au"] + row["r"] + row["g"]
            assert parts == pytest.approx(row["total"], abs=1e-9)

    def test_checkpoints_carry_config_hash_and_counts(self, e2e_run):
        _, path, out = e2e_run
        cfg = configmod.load_config(path)
        matrix, _, _ = configmod.resolve_data(cfg)
        chash = configmod.config_hash(cfg, data.matrix_fingerprint(matrix))
        for name in ("discriminator.json", "generator.json", "gate.json"):
            assert json.loads((out / name).read_text())["config_hash"] == chash
        gate_payload = json.loads((out / "gate.json").read_text())
        counts = gate_payload["generation_counts"]
        assert counts == {"1": 40, "2": 40, "3": 40, "4": 40, "5": 40}

    def test_rerun_is_byte_identical(self, e2e_run, tmp_path):
        base, _, out = e2e_run
        path = write_config(tmp_path)
        assert cli.main(["e2e", "--config", path]) == 0
        for name in ("report.json", "predictions.csv", "projections.csv",
                     "discriminator.json", "generator.json", "gate.json"):
            assert (tmp_path / "out" / name).read_bytes() == (out / name).read_bytes(), name

    def test_diagnose_rerun_reuses_checkpoint(self, e2e_run):
        _, path, out = e2e_run
        before = (out / "report.json").read_bytes()
        assert cli.main(["diagnose", "--config", path]) == 0
        assert (out / "report.json").read_bytes() == before


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["e2e", "--config", str(tmp_path / "nope.json")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_train_generator_without_pretrain(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli.main(["train-generator", "--config", path]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_stage_with_changed_config_refused(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli.main(["pretrain", "--config", path]) == 0
        tampered = write_config(tmp_path, name="tampered.json",
                                gate={**TINY["gate"], "n_components": 3})
        assert cli.main(["train-generator", "--config", tampered]) == 3
        assert "different configuration" in capsys.readouterr().err

    def test_mismatched_loss_flags_refused(self, tmp_path):
        path = write_config(tmp_path)
        assert cli.main(["pretrain", "--config", path, "--losses",
                         "ad,ar,r"]) == 0
        assert cli.main(["train-generator", "--config", path]) == 3

    def test_unknown_loss_flag(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert cli.main(["pretrain", "--config", path, "--losses", "ar,zz"]) == 2
        assert "loss flag" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore:attribute 0 has a single value")
    def test_donor_unavailable(self, tmp_path, capsys):
        # unseen class 3 needs att_1=1 but no seen class carries that value
        (tmp_path / "attributes.csv").write_text(
            "class,att_1,att_2\n1,0,0\n2,0,1\n3,1,1\n")
        rng = np.random.default_rng(0)
        def rows(cids):
            return "".join(
                ",".join(repr(float(v)) for v in rng.normal(size=3)) + f",{c}\n"
                for c in cids for _ in range(8))
        (tmp_path / "train.csv").write_text(rows([1, 2]))
        (tmp_path / "test.csv").write_text(rows([1, 2, 3]))
        path = write_config(tmp_path, data={
            "train_csv": "train.csv", "test_csv": "test.csv",
            "attributes_csv": "attributes.csv",
            "split": {"seen": [1, 2], "unseen": [3]},
        }, generator={**TINY["generator"], "batch_per_class": 2,
                      "pretrain_epochs": 1, "epochs": 1})
        assert cli.main(["pretrain", "--config", path]) == 0
        assert cli.main(["train-generator", "--config", path]) == 0
        assert cli.main(["train-gate", "--config", path]) == 4
        err = capsys.readouterr().err
        assert "class 3" in err and "attribute" in err


class TestAblations:
    def test_skip_generator_runs_without_generator_stage(self, tmp_path):
        path = write_config(tmp_path)
        assert cli.main(["e2e", "--config", path, "--skip-generator"]) == 0
        out = tmp_path / "out"
        assert not (out / "generator.json").exists()
        assert (out / "gate.json").is_file()
        payload = json.loads((out / "gate.json").read_text())
        assert payload["skip_generator"] is True
        assert (out / "report.json").is_file()

    def test_loss_subset_zeroes_components(self, tmp_path):
        path = write_config(tmp_path)
        assert cli.main(["e2e", "--config", path, "--losses", "ar,r"]) == 0
        out = tmp_path / "out"
        pre = json.loads((out / "pretrain_log.json").read_text())
        assert pre["l_ad"] == []  # 'ad' dropped -> pretraining skipped
        log = json.loads((out / "generator_log.json").read_text())
        assert log["discriminator"] == []
        for row in log["epochs"]:
            assert row["g"] == 0.0 and row["au"] == 0.0 and row["av"] == 0.0
            assert row["ar"] + row["r"] == pytest.approx(row["total"], abs=1e-9)


class TestEmptyTestFile:
    def test_empty_test_yields_zero_count_report(self, tmp_path):
        synth_cfg = write_config(tmp_path)
        assert cli.main(["synth", "--config", synth_cfg]) == 0
        out = tmp_path / "out"
        split = json.loads((out / "split.json").read_text())
        (out / "test.csv").write_text("")
        path = write_config(tmp_path, name="csv.json", data={
            "train_csv": str(out / "train.csv"),
            "test_csv": str(out / "test.csv"),
            "attributes_csv": str(out / "attributes.csv"),
            "split": {"seen": split["seen"], "unseen": split["unseen"]},
        })
        assert cli.main(["e2e", "--config", path]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["acc_per_class"] == {}
        assert report["har"] == 0.0
        assert sum(report["path_counts"].values()) == 0
        rows = (out / "predictions.csv").read_text().splitlines()
        assert len(rows) == 1
