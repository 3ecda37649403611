"""Command-line tests: artifacts, manifests, exit codes, model files."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from otfusion import autodiff as ad
from otfusion.cli import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    load_model,
    main,
    save_model,
)
from otfusion.synthdoc import GeneratorConfig, generate, save_jsonl
from otfusion.trainer import TrainConfig, forward_document, init_model


def write_json(path: Path, obj: dict) -> str:
    path.write_text(json.dumps(obj) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture()
def tiny_data(tmp_path):
    cfg = GeneratorConfig(n_docs=15, seed=21)
    path = tmp_path / "docs.jsonl"
    save_jsonl(generate(cfg), path)
    return path


class TestGenerate:
    def test_writes_n_docs_lines_and_manifest(self, tmp_path, capsys):
        cfg_path = write_json(tmp_path / "gen.json", {"n_docs": 9, "seed": 4})
        out = tmp_path / "data.jsonl"
        assert main(["generate", "--config", cfg_path, "--out", str(out)]) == EXIT_OK
        assert len(out.read_text().splitlines()) == 9
        manifest = json.loads((tmp_path / "data.jsonl.manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["config"]["n_docs"] == 9
        assert "sha256" in capsys.readouterr().out

    def test_same_config_gives_identical_checksums(self, tmp_path, capsys):
        cfg_path = write_json(tmp_path / "gen.json", {"n_docs": 5, "seed": 8})
        for name in ("a.jsonl", "b.jsonl"):
            assert main(["generate", "--config", cfg_path, "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_out_of_range_cue_strength_rejected(self, tmp_path, capsys):
        cfg_path = write_json(tmp_path / "gen.json", {"visual_cue_strength": 1.5})
        assert main(["generate", "--config", cfg_path, "--out", str(tmp_path / "x.jsonl")]) == EXIT_VALIDATION
        assert "visual_cue_strength out of range" in capsys.readouterr().err

    def test_unknown_key_rejected_by_name(self, tmp_path, capsys):
        cfg_path = write_json(tmp_path / "gen.json", {"n_docs": 4, "vizual_cue": 0.3})
        assert main(["generate", "--config", cfg_path, "--out", str(tmp_path / "x.jsonl")]) == EXIT_VALIDATION
        assert "vizual_cue" in capsys.readouterr().err


class TestTrain:
    def test_one_epoch_run_produces_artifacts(self, tiny_data, tmp_path, capsys):
        out_dir = tmp_path / "run"
        started = time.perf_counter()
        code = main(
            ["train", "--data", str(tiny_data), "--out", str(out_dir), "--epochs", "1", "--seed", "3"]
        )
        elapsed = time.perf_counter() - started
        assert code == EXIT_OK
        assert elapsed < 10.0
        lines = (out_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "task_loss", "kl_loss", "total_loss", "eval_f1", "mean_gate", "mean_conf"}
        assert (out_dir / "model.bin").exists()
        assert json.loads((out_dir / "manifest.json").read_text())["config"]["epochs"] == 1

    def test_disable_ot_recorded_in_manifest(self, tiny_data, tmp_path):
        out_dir = tmp_path / "run"
        code = main(
            ["train", "--data", str(tiny_data), "--out", str(out_dir), "--epochs", "1", "--disable-ot"]
        )
        assert code == EXIT_OK
        assert json.loads((out_dir / "manifest.json").read_text())["config"]["disable_ot"] is True

    def test_rerun_from_manifest_reproduces_metrics(self, tiny_data, tmp_path):
        first = tmp_path / "first"
        assert main(["train", "--data", str(tiny_data), "--out", str(first), "--epochs", "2"]) == EXIT_OK
        second = tmp_path / "second"
        code = main(
            ["train", "--config", str(first / "manifest.json"), "--data", str(tiny_data), "--out", str(second)]
        )
        assert code == EXIT_OK
        assert (first / "metrics.jsonl").read_bytes() == (second / "metrics.jsonl").read_bytes()

    def test_missing_dataset_is_validation_error(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "out")])
        assert code == EXIT_VALIDATION

    @pytest.mark.filterwarnings("ignore:")
    def test_divergence_exits_numerical(self, tiny_data, tmp_path, capsys):
        code = main(
            [
                "train",
                "--data",
                str(tiny_data),
                "--out",
                str(tmp_path / "run"),
                "--epochs",
                "2",
                "--learning-rate",
                "1e155",
            ]
        )
        assert code == EXIT_NUMERICAL
        assert "diverged" in capsys.readouterr().err


class TestAblate:
    def test_table_schema_and_manifest_seeds(self, tiny_data, tmp_path, capsys):
        out_dir = tmp_path / "abl"
        code = main(
            [
                "ablate",
                "--data",
                str(tiny_data),
                "--out",
                str(out_dir),
                "--epochs",
                "1",
                "--seeds",
                "2",
                "--seed",
                "5",
            ]
        )
        assert code == EXIT_OK
        table = json.loads((out_dir / "ablation.json").read_text())
        assert [row["variant"] for row in table["rows"]] == ["full", "no_ot", "no_vib", "no_gate"]
        for row in table["rows"]:
            assert {"f1_mean", "f1_std", "f1", "seeds"} <= set(row)
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["seeds"] == [5, 6]
        text = (out_dir / "ablation.txt").read_text().splitlines()
        assert len(text) == 5 and text[0].startswith("variant")


class TestDiagnose:
    def test_report_fields_and_ranges(self, tiny_data, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert main(["train", "--data", str(tiny_data), "--out", str(run_dir), "--epochs", "1"]) == EXIT_OK
        report_path = tmp_path / "report.json"
        code = main(
            ["diagnose", "--model", str(run_dir / "model.bin"), "--data", str(tiny_data), "--out", str(report_path)]
        )
        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["max_marginal_violation"] <= 1e-6
        assert report["kl_signal_noise_ratio"] is not None
        assert len(report["kl_profile"]) == TrainConfig().d
        for doc in report["documents"]:
            gates = np.array(doc["gate"])
            assert ((gates > 0) & (gates < 1)).all()
            entropies = np.array(doc["alignment_entropy"])
            assert ((entropies >= 0) & (entropies <= np.log(16) + 1e-12)).all()
            assert max(doc["plan_marginal_violations"]) <= 1e-6

    def test_version_mismatch_rejected(self, tiny_data, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert main(["train", "--data", str(tiny_data), "--out", str(run_dir), "--epochs", "1"]) == EXIT_OK
        blob = bytearray((run_dir / "model.bin").read_bytes())
        blob[4] = 99  # bump the format version field
        (run_dir / "model.bin").write_bytes(bytes(blob))
        code = main(["diagnose", "--model", str(run_dir / "model.bin"), "--data", str(tiny_data)])
        assert code == EXIT_VALIDATION
        assert "version" in capsys.readouterr().err


class TestModelFile:
    def test_roundtrip_restores_every_tensor(self, tmp_path):
        cfg = TrainConfig(seed=9).validate()
        rng = np.random.default_rng(3)
        model = init_model(cfg, patch_dim=16, rng=rng)
        path = tmp_path / "model.bin"
        save_model(path, model, cfg, patch_dim=16)
        loaded, loaded_cfg, patch_dim = load_model(path)
        assert patch_dim == 16
        assert loaded_cfg == cfg
        for (name, a), (_, b) in zip(model.named_tensors(), loaded.named_tensors()):
            assert np.array_equal(a.values, b.values), name

    def test_loaded_model_predicts_identically(self, tmp_path):
        gen = GeneratorConfig(n_docs=3, seed=31)
        docs = generate(gen)
        cfg = TrainConfig(seed=1).validate()
        model = init_model(cfg, patch_dim=gen.patch_dim, rng=np.random.default_rng(7))
        path = tmp_path / "model.bin"
        save_model(path, model, cfg, patch_dim=gen.patch_dim)
        loaded, _, _ = load_model(path)
        for doc in docs:
            a = forward_document(doc, model, cfg, epsilon=None)
            b = forward_document(doc, loaded, cfg, epsilon=None)
            assert np.array_equal(a.probs, b.probs)


class TestCheckGradients:
    def test_passes_and_is_deterministic(self, capsys):
        assert main(["check-gradients"]) == EXIT_OK
        first = capsys.readouterr().out
        assert "all gradient checks passed" in first
        assert main(["check-gradients"]) == EXIT_OK
        assert capsys.readouterr().out == first

    def test_sign_flipped_sigmoid_fails_naming_the_op(self, monkeypatch, capsys):
        from otfusion.autodiff import as_tensor, record_op

        def broken_sigmoid(a):
            a = as_tensor(a)
            out = 1.0 / (1.0 + np.exp(-a.values))

            def bwd(g):
                return (-g * out * (1.0 - out),)  # wrong sign

            return record_op(out, "sigmoid", (a,), bwd)

        monkeypatch.setattr(ad, "sigmoid", broken_sigmoid)
        assert main(["check-gradients"]) == EXIT_NUMERICAL
        out = capsys.readouterr().out
        assert any("FAIL" in line and "sigmoid" in line for line in out.splitlines())
