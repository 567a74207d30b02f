"""End-to-end CLI pipeline tests on a small experiment configuration."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from n2c import cli

SMALL_CONFIG = {
    "output_dir": "out",
    "global_seed": 0,
    "phantom": {"dims": [10, 16, 16], "n_ellipsoids": 3, "hu_range": [-80, 120],
                "z_smoothness": 3, "seed": 5},
    "noise": [
        {"model": "gaussian", "sigma": 25.0, "seed": 11},
        {"model": "gaussian", "sigma": 50.0, "seed": 12},
    ],
    "model": {"levels": 2, "base_features": 4, "init_seed": 42},
    "train": {"epochs": 2, "shuffle_seed": 3, "log_every": 0},
    "methods": ["noisy", "tv", "n2c_s", "n2c_m", "supervised"],
    "corpus_seeds": [101, 102],
    "verify": {"identity_trials": 20, "coupling_realizations": 10},
}


def write_config(tmp_path, overrides=None, name="exp.json"):
    payload = json.loads(json.dumps(SMALL_CONFIG))
    payload["output_dir"] = str(tmp_path / "out")
    for key, value in (overrides or {}).items():
        payload[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(payload, indent=2))
    return path


def run(command, config, **kw):
    argv = [command, "--config", str(config)]
    for flag, value in kw.items():
        argv += [f"--{flag}", str(value)]
    return cli.main(argv)


def run_pipeline(config, upto="report"):
    stages = ["phantom", "corrupt", "train", "denoise", "eval", "report"]
    for stage in stages[: stages.index(upto) + 1]:
        code = run(stage, config)
        assert code == 0, f"stage {stage} exited {code}"


def hash_outputs(out_dir):
    """Hash pipeline artifacts, skipping wall-clock-bearing train logs."""
    digests = {}
    for path in sorted(Path(out_dir).rglob("*")):
        if path.is_dir() or path.name.startswith("train_log"):
            continue
        digests[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


class TestPipeline:
    def test_full_pipeline_produces_all_artifacts(self, tmp_path):
        config = write_config(tmp_path)
        run_pipeline(config)
        out = tmp_path / "out"
        for name in (
            "clean.vol", "noisy_gaussian25.vol", "noise_gaussian50.vol",
            "model_n2c_s_gaussian25.ckpt", "train_log_supervised_gaussian50.csv",
            "denoised_tv_gaussian25.vol", "eval_noisy_gaussian25.json",
            "report.md", "report.json",
        ):
            assert (out / name).exists(), name

    def test_every_artifact_has_provenance(self, tmp_path):
        config = write_config(tmp_path)
        run_pipeline(config)
        out = tmp_path / "out"
        for vol_file in out.glob("*.vol"):
            assert (out / (vol_file.name + ".provenance.json")).exists(), vol_file
        for eval_file in out.glob("eval_*.json"):
            assert "provenance" in json.loads(eval_file.read_text())
        report = json.loads((out / "report.json").read_text())
        assert report["provenance"]["tool"] == "n2c"

    def test_report_marks_best_and_second(self, tmp_path):
        config = write_config(tmp_path)
        run_pipeline(config)
        md = (tmp_path / "out" / "report.md").read_text()
        assert md.count("(best)") >= 2  # one per metric column at least
        assert "(2nd)" in md
        payload = json.loads((tmp_path / "out" / "report.json").read_text())
        for label, methods in payload["noise_levels"].items():
            ranks = sorted(m["rmse_rank"] for m in methods.values())
            assert ranks == list(range(len(methods)))

    def test_rerun_is_bit_identical(self, tmp_path):
        import shutil

        config = write_config(tmp_path)
        run_pipeline(config)
        first = hash_outputs(tmp_path / "out")
        shutil.rmtree(tmp_path / "out")
        run_pipeline(config)
        second = hash_outputs(tmp_path / "out")
        assert set(first) == set(second)
        for name, digest in first.items():
            assert second[name] == digest, f"artifact {name} differs between reruns"

    def test_seed_override_changes_volumes(self, tmp_path):
        config = write_config(tmp_path)
        assert run("phantom", config) == 0
        base = (tmp_path / "out" / "clean.vol").read_bytes()
        assert run("phantom", config, seed=99) == 0
        assert (tmp_path / "out" / "clean.vol").read_bytes() != base


class TestValidationErrors:
    def test_missing_config_file(self, tmp_path):
        assert run("phantom", tmp_path / "nope.json") == cli.EXIT_VALIDATION

    def test_invalid_field_reports_section(self, tmp_path, caplog):
        config = write_config(tmp_path, {"noise": [{"model": "poisson", "sigma": 5}]})
        assert run("phantom", config) == cli.EXIT_VALIDATION
        assert any("noise[0]" in rec.message for rec in caplog.records)

    def test_unknown_method_rejected(self, tmp_path):
        config = write_config(tmp_path, {"methods": ["noisy", "bm3d"]})
        assert run("phantom", config) == cli.EXIT_VALIDATION

    def test_n2c_m_requires_corpus(self, tmp_path):
        config = write_config(tmp_path, {"methods": ["n2c_m"], "corpus_seeds": []})
        assert run("phantom", config) == cli.EXIT_VALIDATION

    def test_corrupt_before_phantom_fails(self, tmp_path):
        config = write_config(tmp_path)
        assert run("corrupt", config) == cli.EXIT_VALIDATION

    def test_report_refuses_missing_provenance(self, tmp_path):
        config = write_config(tmp_path)
        run_pipeline(config, upto="eval")
        eval_file = next((tmp_path / "out").glob("eval_*.json"))
        payload = json.loads(eval_file.read_text())
        del payload["provenance"]
        eval_file.write_text(json.dumps(payload))
        assert run("report", config) == cli.EXIT_VALIDATION

    def test_report_rejects_inconsistent_method_sets(self, tmp_path):
        config = write_config(tmp_path)
        run_pipeline(config, upto="eval")
        next((tmp_path / "out").glob("eval_tv_gaussian25.*json")).unlink()
        assert run("report", config) == cli.EXIT_VALIDATION


class TestVerifyCommand:
    def test_small_config_defect_check_flags(self, tmp_path):
        # thresholds are calibrated for the desk phantom; the 16x16 smoke
        # config has a proportionally larger curvature term and must exit 3
        config = write_config(tmp_path)
        assert run("verify", config) == cli.EXIT_VERIFY
        report = json.loads((tmp_path / "out" / "verify.json").read_text())
        assert report["checks"]["identity"]["pass"]
        assert report["checks"]["gradients"]["pass"]
        assert not report["passed"]

    def test_tampered_decompose_fails_identity_check(self, tmp_path, monkeypatch):
        from n2c import losses, verify

        real = losses.decompose

        def flipped(triplet, f_out):
            bd = real(triplet, f_out)
            bd.t_cross_x = -bd.t_cross_x  # sign flip
            bd.residual = bd.lhs - (bd.t_sup + bd.t_cross_f + bd.t_cross_x + bd.t_const)
            return bd

        monkeypatch.setattr(losses, "decompose", flipped)
        result = verify.check_identities(trials=5, seed=0)
        assert result["max_rel_residual"] > 1e-9


def test_denoise_threads_equivalence(tmp_path):
    config = write_config(tmp_path, {"methods": ["noisy", "tv"]})
    run_pipeline(config, upto="corrupt")
    assert run("denoise", config) == 0
    serial = (tmp_path / "out" / "denoised_tv_gaussian25.vol").read_bytes()
    config2 = write_config(tmp_path, {"methods": ["noisy", "tv"]}, name="exp3.json")
    payload = json.loads(config2.read_text())
    payload["output_dir"] = str(tmp_path / "out3")
    config2.write_text(json.dumps(payload))
    run_pipeline(config2, upto="corrupt")
    assert run("denoise", config2, threads=4) == 0
    threaded = (tmp_path / "out3" / "denoised_tv_gaussian25.vol").read_bytes()
    assert serial == threaded
