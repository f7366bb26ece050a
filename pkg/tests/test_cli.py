"""Command-line surface: exit codes, output formats, engine agreement,
config files, and the environment fallback."""

import json
import math

import numpy as np
import pytest

from smoothce.cli import main
from smoothce.tensors import random_instance, save_matrix, save_tokens


@pytest.fixture()
def instance_files(tmp_path):
    e, c, x = random_instance(7, n=24, v=96, d=8, scale=0.5)
    pe, pc, px = tmp_path / "E.sce1", tmp_path / "C.sce1", tmp_path / "x.sce1"
    save_matrix(e, pe)
    save_matrix(c, pc)
    save_tokens(x, px)
    return str(pe), str(pc), str(px)


def loss_args(files, **extra):
    pe, pc, px = files
    argv = ["loss", "--embeddings", pe, "--classifier", pc, "--targets", px]
    for key, val in extra.items():
        argv += [f"--{key.replace('_', '-')}", str(val)]
    return argv


def total_from(capsys) -> float:
    out = capsys.readouterr().out
    assert out.startswith("total ")
    return float(out.split()[1])


class TestLoss:
    def test_engines_agree(self, instance_files, capsys):
        assert main(loss_args(instance_files, beta=0.1, engine="blocked")) == 0
        blocked = total_from(capsys)
        assert main(loss_args(instance_files, beta=0.1, engine="naive")) == 0
        naive = total_from(capsys)
        assert abs(blocked - naive) <= 1e-9 * abs(naive)

    def test_beta_out_of_range_is_usage_error(self, instance_files, capsys):
        assert main(loss_args(instance_files, beta=1.5)) == 2
        assert "beta" in capsys.readouterr().err

    def test_reduction_scales_by_token_count(self, instance_files, capsys):
        assert main(loss_args(instance_files, reduction="sum")) == 0
        total_sum = total_from(capsys)
        assert main(loss_args(instance_files, reduction="mean")) == 0
        total_mean = total_from(capsys)
        assert total_sum == pytest.approx(total_mean * 24)

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        argv = ["loss", "--embeddings", str(tmp_path / "none.sce1"),
                "--classifier", str(tmp_path / "none.sce1"),
                "--targets", str(tmp_path / "none.sce1")]
        assert main(argv) == 1

    def test_corrupt_file_names_path(self, instance_files, tmp_path, capsys):
        pe, pc, px = instance_files
        bad = tmp_path / "bad.sce1"
        bad.write_bytes(b"JUNKJUNKJUNK" + bytes(48))
        argv = ["loss", "--embeddings", str(bad), "--classifier", pc,
                "--targets", px]
        assert main(argv) == 1
        assert "bad.sce1" in capsys.readouterr().err

    def test_shape_mismatch_is_data_error(self, instance_files, tmp_path, capsys):
        pe, pc, px = instance_files
        other, _, _ = random_instance(1, n=4, v=8, d=3, scale=0.5)
        podd = tmp_path / "odd.sce1"
        save_matrix(other, podd)
        argv = ["loss", "--embeddings", str(podd), "--classifier", pc,
                "--targets", px]
        assert main(argv) == 1

    def test_per_token_csv(self, instance_files, tmp_path, capsys):
        out_csv = tmp_path / "per_token.csv"
        assert main(loss_args(instance_files, beta=0.5)
                    + ["--per-token-csv", str(out_csv)]) == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "token,lse,o,loss"
        assert len(lines) == 25
        first = lines[1].split(",")
        assert float(first[1]) - float(first[2]) == pytest.approx(float(first[3]))


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_filtered_run_passes_with_relaxed_tolerance(self, capsys):
        argv = ["gradcheck", "--n", "32", "--v", "1024", "--d", "32",
                "--scale", "1.5", "--n-block", "8", "--v-block", "64",
                "--filter-eps", str(2.0 ** -12), "--skip-fd"]
        assert main(argv) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "skipped" in out

    def test_corrupted_gradient_fails(self, capsys):
        assert main(["gradcheck", "--corrupt", "--skip-fd"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestBench:
    def test_csv_shape_and_memory_column(self, tmp_path):
        out = tmp_path / "bench.csv"
        argv = ["bench", "--n", "64", "--v", "512", "--d", "16",
                "--betas", "0,0.1", "--out", str(out)]
        assert main(argv) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == ("method,phase,n,v,d,beta,repetitions,"
                            "wall_time_ms,peak_auxiliary_bytes")
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 12  # 2 betas x 3 phases x 2 methods
        blocked_rows = [r for r in rows if r[0] == "blocked"]
        naive_rows = [r for r in rows if r[0] == "naive"]
        assert len(blocked_rows) == 6 and len(naive_rows) == 6
        # deterministic mode leaves timing empty, memory always populated
        assert all(r[7] == "" for r in rows)
        assert all(int(r[8]) > 0 for r in blocked_rows)

    def test_blocked_peak_tracks_beta_weakly(self, tmp_path):
        out = tmp_path / "bench.csv"
        argv = ["bench", "--n", "64", "--v", "512", "--d", "16",
                "--betas", "0,0.1", "--skip-naive", "--out", str(out)]
        assert main(argv) == 0
        rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
        fwd = {r[5]: int(r[8]) for r in rows if r[1] == "fwd"}
        assert abs(fwd["0.0"] - fwd["0.1"]) <= 0.01 * max(fwd.values())

    def test_skip_naive_omits_rows(self, tmp_path):
        out = tmp_path / "bench.csv"
        argv = ["bench", "--n", "32", "--v", "128", "--d", "8",
                "--betas", "0", "--skip-naive", "--out", str(out)]
        assert main(argv) == 0
        rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
        assert all(r[0] == "blocked" for r in rows)

    def test_timed_mode_fills_wall_time(self, tmp_path):
        out = tmp_path / "bench.csv"
        argv = ["bench", "--n", "32", "--v", "128", "--d", "8", "--betas", "0",
                "--skip-naive", "--phases", "fwd", "--repetitions", "3",
                "--warmups", "1", "--no-deterministic", "--out", str(out)]
        assert main(argv) == 0
        rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
        assert all(float(r[7]) > 0 for r in rows)

    def test_too_few_repetitions_is_usage_error(self):
        assert main(["bench", "--repetitions", "2"]) == 2


@pytest.fixture()
def calibration_file(tmp_path):
    p = tmp_path / "records.jsonl"
    rows = [{"confidence": 0.9, "correct": True},
            {"confidence": 0.8, "correct": False},
            {"confidence": 0.3, "correct": True},
            {"confidence": 0.1, "correct": False}]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return str(p)


class TestCalibrate:
    def test_fixture_metrics(self, calibration_file, tmp_path):
        out = tmp_path / "metrics.csv"
        argv = ["calibrate", "--records", calibration_file, "--bins", "2",
                "--out", str(out)]
        assert main(argv) == 0
        rows = {(r[0], r[2]): float(r[3])
                for r in (line.split(",") for line in out.read_text().splitlines()[1:])}
        assert rows[("ece", "equal_width")] == pytest.approx(0.325, abs=1e-12)
        assert rows[("rms_ce", "equal_width")] == pytest.approx(
            math.sqrt(0.10625), abs=1e-12)

    def test_reliability_csv(self, calibration_file, tmp_path):
        rel = tmp_path / "reliability.csv"
        argv = ["calibrate", "--records", calibration_file, "--bins", "2",
                "--out", "-", "--reliability-csv", str(rel)]
        assert main(argv) == 0
        lines = rel.read_text().splitlines()
        assert lines[0] == "lo,hi,count,mean_confidence,accuracy,gap"
        assert len(lines) == 3

    def test_sce_without_probs_names_missing_field(self, calibration_file, capsys):
        argv = ["calibrate", "--records", calibration_file, "--metrics", "sce"]
        assert main(argv) == 1
        assert "probs" in capsys.readouterr().err

    def test_probs_records_get_class_metrics(self, tmp_path, capsys):
        p = tmp_path / "probs.jsonl"
        rng = np.random.default_rng(0)
        rows = []
        for _ in range(30):
            q = rng.dirichlet(np.ones(3))
            rows.append({"probs": [float(t) for t in q],
                         "label": int(rng.integers(0, 3))})
        p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert main(["calibrate", "--records", str(p), "--bins", "4"]) == 0
        out = capsys.readouterr().out
        assert "sce" in out and "ace" in out

    def test_bad_record_line_reported(self, tmp_path, capsys):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"confidence": 1.2, "correct": true}\n')
        assert main(["calibrate", "--records", str(p)]) == 1
        assert ":1" in capsys.readouterr().err


class TestEntropy:
    def test_zero_rho_rows_equal_log_v(self, tmp_path):
        out = tmp_path / "sweep.csv"
        argv = ["entropy", "--d", "4,16", "--v", "8,32", "--rho", "0",
                "--out", str(out)]
        assert main(argv) == 0
        for row in (line.split(",") for line in out.read_text().splitlines()[1:]):
            v = int(row[1])
            assert float(row[6]) == pytest.approx(math.log(v), abs=1e-15)
            assert float(row[7]) == 0.0

    def test_temperature_halves_effective_budget(self, tmp_path):
        out = tmp_path / "sweep.csv"
        argv = ["entropy", "--d", "16", "--v", "8", "--rho", "1",
                "--temperature", "2", "--out", str(out)]
        assert main(argv) == 0
        (row,) = [line.split(",") for line in out.read_text().splitlines()[1:]]
        assert float(row[5]) == pytest.approx(2.0)  # r = 1*sqrt(16)/2

    def test_verify_passes_on_default_grid(self, tmp_path):
        argv = ["entropy", "--out", str(tmp_path / "s.csv"), "--verify",
                "--restarts", "8", "--iterations", "300"]
        assert main(argv) == 0

    def test_bad_vocab_rejected(self, tmp_path, capsys):
        assert main(["entropy", "--v", "1", "--out", str(tmp_path / "s.csv")]) == 1


class TestConfigAndEnv:
    def test_config_file_supplies_flags(self, instance_files, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("beta = 0.5\nengine = naive\n")
        assert main(loss_args(instance_files) + ["--config", str(cfg)]) == 0
        from_config = total_from(capsys)
        assert main(loss_args(instance_files, beta=0.5, engine="naive")) == 0
        assert from_config == total_from(capsys)

    def test_cli_flags_override_config(self, instance_files, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("beta = 0.5\n")
        assert main(loss_args(instance_files, beta=0.0)
                    + ["--config", str(cfg)]) == 0
        overridden = total_from(capsys)
        assert main(loss_args(instance_files, beta=0.0)) == 0
        assert overridden == total_from(capsys)

    def test_config_boolean_keys(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("skip-naive = true\ndeterministic = true\n")
        out = tmp_path / "bench.csv"
        argv = ["bench", "--n", "32", "--v", "128", "--d", "8", "--betas", "0",
                "--config", str(cfg), "--out", str(out)]
        assert main(argv) == 0
        rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
        assert all(r[0] == "blocked" for r in rows)

    def test_bad_config_line_is_usage_error(self, instance_files, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("this line has no equals sign\n")
        assert main(loss_args(instance_files) + ["--config", str(cfg)]) == 2

    def test_env_thread_fallback(self, instance_files, capsys, monkeypatch):
        monkeypatch.setenv("SCE_THREADS", "2")
        assert main(loss_args(instance_files, beta=0.1)
                    + ["--no-deterministic"]) == 0
        threaded = total_from(capsys)
        monkeypatch.delenv("SCE_THREADS")
        assert main(loss_args(instance_files, beta=0.1)) == 0
        assert threaded == pytest.approx(total_from(capsys), rel=1e-9)

    def test_bad_env_threads_is_usage_error(self, instance_files, monkeypatch):
        monkeypatch.setenv("SCE_THREADS", "many")
        assert main(loss_args(instance_files)) == 2


class TestUsage:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_missing_required_flag(self):
        assert main(["loss", "--beta", "0.1"]) == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
