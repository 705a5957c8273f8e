import json
import os

import pytest

from lipadapt.cli import main


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "corpus")
    code = run(["gen-corpus", "--out", out, "--seed", "3",
                "--speakers", "2", "--baseline-speakers", "2",
                "--train-minutes", "2", "--valid-minutes", "1", "--test-minutes", "1",
                "--baseline-minutes", "2", "--unit-seconds", "10"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def cli_checkpoint(cli_corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "baseline")
    code = run(["train-baseline", "--corpus", cli_corpus, "--out", out,
                "--steps", "60", "--batch", "4", "--seed", "0"])
    assert code == 0
    return out


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["gen-corpus", "--no-such-flag"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_is_usage_error(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_runtime_failure_is_exit_2(self, capsys, tmp_path):
        assert run(["eval", "--checkpoint", str(tmp_path / "nope"),
                    "--corpus", str(tmp_path / "nope")]) == 2
        assert "lipadapt:" in capsys.readouterr().err


class TestGenCorpus:
    def test_outputs_and_resolved_config(self, cli_corpus):
        assert os.path.exists(os.path.join(cli_corpus, "manifest.jsonl"))
        cfg = json.load(open(os.path.join(cli_corpus, "run_config.json")))
        assert cfg["subcommand"] == "gen-corpus"
        assert cfg["spec"]["seed"] == 3
        assert cfg["spec"]["unit_seconds"] == 10

    def test_byte_identical_rerun(self, cli_corpus, tmp_path):
        out2 = str(tmp_path / "again")
        assert run(["gen-corpus", "--out", out2, "--seed", "3",
                    "--speakers", "2", "--baseline-speakers", "2",
                    "--train-minutes", "2", "--valid-minutes", "1",
                    "--test-minutes", "1", "--baseline-minutes", "2",
                    "--unit-seconds", "10"]) == 0
        m1 = open(os.path.join(cli_corpus, "manifest.jsonl"), "rb").read()
        m2 = open(os.path.join(out2, "manifest.jsonl"), "rb").read()
        assert m1 == m2

    def test_config_file_merging_flag_wins(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"seed": 9, "speakers": 1,
                                        "baseline-speakers": 1,
                                        "train-minutes": 1.0, "valid-minutes": 0.5,
                                        "test-minutes": 0.5, "baseline-minutes": 0.5,
                                        "unit-seconds": 5.0}))
        out = str(tmp_path / "c")
        assert run(["gen-corpus", "--out", out, "--config", str(cfg_path),
                    "--seed", "4"]) == 0
        resolved = json.load(open(os.path.join(out, "run_config.json")))
        assert resolved["spec"]["seed"] == 4           # flag beats config file
        assert resolved["spec"]["num_speakers"] == 1   # config file beats default


class TestDatasetCommands:
    def test_build_and_stats(self, cli_corpus, tmp_path, capsys):
        out = str(tmp_path / "ds")
        code = run(["dataset", "build",
                    "--manifest", os.path.join(cli_corpus, "manifest.jsonl"),
                    "--manifest", os.path.join(cli_corpus, "manifest.jsonl"),
                    "--out", out, "--seed", "1", "--rho", "0.2",
                    "--budgets", "train=2,valid=1,test=1",
                    "--min-total", "3", "--unit-seconds", "10"])
        assert code == 0
        rows = [json.loads(l) for l in open(os.path.join(out, "manifest.jsonl"))]
        assert rows and {"id", "speaker_id", "split", "pseudo_label",
                         "cluster_id"} <= set(rows[0])
        overlaps = json.load(open(os.path.join(out, "overlap.json")))
        assert len(overlaps) > 0  # same manifest twice plants full overlap
        assert os.path.exists(os.path.join(out, "stats.tsv"))

        capsys.readouterr()
        assert run(["dataset", "stats",
                    "--manifest", os.path.join(out, "manifest.jsonl"),
                    "--out", str(tmp_path / "stats")]) == 0
        printed = capsys.readouterr().out
        assert printed.startswith("speaker\tsplit")


class TestTrainAndAdapt:
    def test_train_baseline_outputs(self, cli_checkpoint):
        assert os.path.exists(os.path.join(cli_checkpoint, "config.json"))
        assert os.path.exists(os.path.join(cli_checkpoint, "base.bin"))
        assert os.path.exists(os.path.join(cli_checkpoint, "train_log.jsonl"))
        resolved = json.load(open(os.path.join(cli_checkpoint, "run_config.json")))
        assert resolved["steps"] == 60

    def test_adapt_defaults_match_published_values(self, cli_corpus, cli_checkpoint,
                                                   tmp_path):
        out = str(tmp_path / "adapt")
        code = run(["adapt", "--checkpoint", cli_checkpoint, "--corpus", cli_corpus,
                    "--level", "vision", "--speaker", "S01", "--steps", "5",
                    "--out", out, "--seed", "2"])
        assert code == 0
        resolved = json.load(open(os.path.join(out, "run_config.json")))
        plan = resolved["plan"]
        assert plan["lora"] == {"rank": 8, "alpha": 16.0,
                                "targets": ["wc", "wq", "wk", "wv"]}
        assert plan["language_updates"] == 70
        assert plan["vision_schedule"] == {"base_lr": 1e-4, "min_lr": 1e-5,
                                           "warmup_steps": 0, "period_steps": 5000}
        assert plan["batch_size"] == 1 and plan["grad_accum"] == 8
        assert os.path.exists(os.path.join(out, "S01", "adapters", "adapter.bin"))

    def test_adapt_rerun_byte_identical(self, cli_corpus, cli_checkpoint, tmp_path):
        blobs = []
        for tag in ("a", "b"):
            out = str(tmp_path / tag)
            assert run(["adapt", "--checkpoint", cli_checkpoint, "--corpus", cli_corpus,
                        "--level", "both", "--speaker", "S02", "--steps", "4",
                        "--updates", "3", "--np", "4", "--rank", "4",
                        "--out", out, "--seed", "5"]) == 0
            blobs.append(open(os.path.join(out, "S02", "adapters", "adapter.bin"),
                              "rb").read())
        assert blobs[0] == blobs[1]

    def test_eval_prints_per_speaker_and_mean(self, cli_corpus, cli_checkpoint,
                                              tmp_path, capsys):
        assert run(["eval", "--checkpoint", cli_checkpoint, "--corpus", cli_corpus,
                    "--split", "test", "--out", str(tmp_path / "ev")]) == 0
        out = capsys.readouterr().out
        lines = [l for l in out.strip().splitlines()]
        assert lines[-1].startswith("mean\t")
        assert any(l.startswith("S01\t") for l in lines)
        report = json.load(open(str(tmp_path / "ev" / "report.json")))
        assert "per_speaker" in report

    def test_language_level_requires_prompt(self, cli_corpus, cli_checkpoint, tmp_path):
        code = run(["adapt", "--checkpoint", cli_checkpoint, "--corpus", cli_corpus,
                    "--level", "language", "--speaker", "S01", "--np", "0",
                    "--updates", "2", "--out", str(tmp_path / "x"), "--seed", "1"])
        assert code == 2
