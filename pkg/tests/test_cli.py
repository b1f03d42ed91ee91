"""Subcommand contracts: exit codes, precedence, byte-stable artifacts."""

import json

import pytest

from moegeo.cli import build_parser, main


def run(tmp_path, *argv):
    """Invoke the CLI with output rooted under tmp_path."""
    return main([*argv])


class TestExitCodes:
    def test_descending_grid_is_config_error(self, tmp_path, capsys):
        code = main(["barrier", "--mu_grid", "0.5,0.2", "--trials", "1",
                     "--output_dir", str(tmp_path / "b")])
        assert code == 2
        assert capsys.readouterr().err.strip() == "config: mu_grid must ascend"

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"bogus": 1}')
        code = main(["kl-project", "--config", str(cfg),
                     "--output_dir", str(tmp_path / "o")])
        assert code == 2
        assert "unknown key 'bogus'" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        code = main(["info", "--config", str(cfg),
                     "--output_dir", str(tmp_path / "o")])
        assert code == 2
        assert capsys.readouterr().err.startswith("config:")

    def test_bad_value_type(self, tmp_path, capsys):
        code = main(["barrier", "--trials", "two",
                     "--output_dir", str(tmp_path / "o")])
        assert code == 2

    def test_unknown_check_name(self, tmp_path, capsys):
        code = main(["verify", "--checks", "nonsense",
                     "--output_dir", str(tmp_path / "o")])
        assert code == 2
        assert "nonsense" in capsys.readouterr().err

    def test_numerical_abort_is_exit_3(self, tmp_path, capsys):
        # a hard zero inside the projection support is a numerical refusal
        code = main(["kl-project", "--probs", "1,0", "--k", "1",
                     "--output_dir", str(tmp_path / "o")])
        assert code == 3
        assert capsys.readouterr().err.startswith("abort:")

    def test_verify_failure_is_exit_1(self, tmp_path):
        out = tmp_path / "v"
        code = main(["verify", "--checks", "kl-projection-oracle",
                     "--inject_fault", "--output_dir", str(out)])
        assert code == 1
        payload = json.loads((out / "verify.json").read_text())
        assert payload["all_pass"] is False
        assert payload["checks"][0]["name"] == "kl-projection-oracle"
        assert payload["checks"][0]["pass"] is False

    def test_verify_passes_clean(self, tmp_path):
        out = tmp_path / "v"
        code = main(["verify", "--checks", "kl-projection-oracle,ambiguity-identity",
                     "--output_dir", str(out)])
        assert code == 0
        payload = json.loads((out / "verify.json").read_text())
        assert payload["all_pass"] is True
        assert [c["name"] for c in payload["checks"]] == [
            "kl-projection-oracle", "ambiguity-identity"]


class TestPrecedence:
    def test_file_overrides_default(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"seed": 9, "experts": 5}')
        out = tmp_path / "o"
        assert main(["kl-project", "--config", str(cfg), "--output_dir", str(out)]) == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["seed"] == 9
        assert resolved["experts"] == 5

    def test_env_overrides_file(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"seed": 9}')
        monkeypatch.setenv("MOEGEO_SEED", "3")
        out = tmp_path / "o"
        assert main(["kl-project", "--config", str(cfg), "--output_dir", str(out)]) == 0
        assert json.loads((out / "resolved_config.json").read_text())["seed"] == 3

    def test_flag_overrides_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MOEGEO_SEED", "3")
        out = tmp_path / "o"
        assert main(["kl-project", "--seed", "11", "--output_dir", str(out)]) == 0
        assert json.loads((out / "resolved_config.json").read_text())["seed"] == 11

    def test_config_copied_verbatim(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"seed": 4}  ')
        out = tmp_path / "o"
        assert main(["info", "--config", str(cfg), "--tokens", "32",
                     "--output_dir", str(out)]) == 0
        assert (out / "config.json").read_bytes() == cfg.read_bytes()


class TestArtifacts:
    def test_barrier_smoke_and_rerun_identical(self, tmp_path):
        out = tmp_path / "b"
        argv = ["barrier", "--d", "24", "--n_atoms", "12", "--trials", "2",
                "--mu_grid", "0,0.3", "--output_dir", str(out)]
        assert main(argv) == 0
        first_csv = (out / "barrier.csv").read_bytes()
        first_sum = (out / "summary.json").read_bytes()
        assert main(argv) == 0
        assert (out / "barrier.csv").read_bytes() == first_csv
        assert (out / "summary.json").read_bytes() == first_sum
        summary = json.loads(first_sum)
        assert summary["theoretical_bound"] == pytest.approx(1 / 11, abs=1e-12)
        assert len(summary["mu_grid"]) == 2

    def test_barrier_workers_do_not_change_bytes(self, tmp_path):
        base = ["barrier", "--d", "20", "--n_atoms", "10", "--trials", "2",
                "--mu_grid", "0,0.2,0.4"]
        out1, out2 = tmp_path / "w1", tmp_path / "w2"
        assert main(base + ["--workers", "1", "--output_dir", str(out1)]) == 0
        assert main(base + ["--workers", "3", "--output_dir", str(out2)]) == 0
        assert (out1 / "barrier.csv").read_bytes() == (out2 / "barrier.csv").read_bytes()

    def test_train_smoke_and_rerun_identical(self, tmp_path):
        out = tmp_path / "t"
        argv = ["train", "--samples", "300", "--features", "16", "--informative",
                "8", "--classes", "5", "--experts", "4", "--hidden", "8",
                "--epochs", "1", "--folds", "2", "--output_dir", str(out)]
        assert main(argv) == 0
        agg = json.loads((out / "aggregate.json").read_text())
        assert agg["reg"] == "none"  # default recorded
        assert agg["folds"] == 2
        assert len(agg["mean_eff_rank"]) == 2  # init row + 1 epoch
        first_run = (out / "run.csv").read_bytes()
        first_heat = (out / "heatmap.csv").read_bytes()
        assert main(argv) == 0
        assert (out / "run.csv").read_bytes() == first_run
        assert (out / "heatmap.csv").read_bytes() == first_heat

    def test_train_workers_do_not_change_bytes(self, tmp_path):
        base = ["train", "--samples", "200", "--features", "12", "--informative",
                "6", "--classes", "4", "--experts", "4", "--hidden", "8",
                "--epochs", "1", "--folds", "2"]
        out1, out2 = tmp_path / "w1", tmp_path / "w2"
        assert main(base + ["--workers", "1", "--output_dir", str(out1)]) == 0
        assert main(base + ["--workers", "2", "--output_dir", str(out2)]) == 0
        assert (out1 / "run.csv").read_bytes() == (out2 / "run.csv").read_bytes()

    def test_kl_project_explicit_probs(self, tmp_path):
        out = tmp_path / "k"
        assert main(["kl-project", "--probs", "0.5,0.3,0.2", "--k", "2",
                     "--output_dir", str(out)]) == 0
        payload = json.loads((out / "projection.json").read_text())
        assert payload["support"] == [0, 1]
        assert payload["q"] == pytest.approx([0.625, 0.375, 0.0], abs=1e-12)
        assert payload["kl"] == pytest.approx(0.22314355, abs=1e-6)

    def test_dpp_select_smoke(self, tmp_path):
        out = tmp_path / "d"
        assert main(["dpp-select", "--d", "16", "--n_atoms", "8", "--k", "3",
                     "--coherence", "0.4", "--output_dir", str(out)]) == 0
        payload = json.loads((out / "selection.json").read_text())
        assert len(payload["selection"]) == 3
        assert payload["coherence_measured"] == pytest.approx(0.4, abs=0.005)
        # chain of marginal gains telescopes to the subset log-volume
        assert sum(payload["marginal_gains"]) == pytest.approx(payload["logdet"], abs=1e-9)

    def test_info_smoke(self, tmp_path):
        out = tmp_path / "i"
        assert main(["info", "--experts", "8", "--k", "2", "--tokens", "64",
                     "--output_dir", str(out)]) == 0
        payload = json.loads((out / "info.json").read_text())
        assert payload["topk_conditional_entropy"] <= 0.6931472 + 1e-6
        assert payload["collision_mass"] >= 1 / 8 - 1e-12
        assert payload["empirical_mi"] >= payload["routing_entropy"] - 0.6931472 - 1e-9


class TestParser:
    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for fragment in ("default: 16", "default: 32", "default: 0.01", "default: 0.1"):
            assert fragment in text

    def test_missing_command_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2
