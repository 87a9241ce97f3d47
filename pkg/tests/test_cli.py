import json
import os

import pytest

from calspec.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out-dir", d, "--train-docs", 200, "--calibration-prompts", 30,
               "--eval-prompts", 8) == 0
    assert run("train", "--corpus", d / "train.txt", "--vocab", d / "vocab.txt", "--order", 3,
               "--alpha", 0.01, "--out", d / "target.ngram") == 0
    pairs = (d / "pairs.txt").read_text().strip()
    assert run("perturb", "--base", d / "target.ngram", "--vocab", d / "vocab.txt",
               "--pairs", pairs, "--out", d / "draft.pert") == 0
    return d


def models(d):
    return ["--draft", d / "draft.pert", "--target", d / "target.ngram", "--vocab", d / "vocab.txt"]


def calibrate(d, out, *extra):
    return run("calibrate", *models(d), "--corpus", d / "calib.txt", "--quiet", "--out", out,
               *extra)


def first_prompt(d):
    return (d / "eval.txt").read_text().splitlines()[0]


class TestExitCodes:
    def test_missing_vocab(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("a b\n")
        missing = tmp_path / "nope.txt"
        assert run("train", "--corpus", tmp_path / "c.txt", "--vocab", missing, "--order", 2,
                   "--out", tmp_path / "m") == 2
        assert str(missing) in capsys.readouterr().err

    def test_order_zero(self, tmp_path, capsys):
        assert run("train", "--corpus", "c", "--vocab", "v", "--order", 0, "--out", "m") == 1
        assert "order" in capsys.readouterr().err

    def test_unwritable_out(self, workdir, tmp_path):
        assert calibrate(workdir, tmp_path / "no" / "such" / "dir" / "m.tsv") != 0

    def test_unknown_policy(self, workdir, capsys):
        code = run("bench", *models(workdir), "--prompts", workdir / "eval.txt",
                   "--policies", "sd,turbo")
        assert code == 1
        assert "vanilla, sd, csd, ocm-only, scg-only, lossy" in capsys.readouterr().err

    def test_malformed_log(self, tmp_path, capsys):
        (tmp_path / "bad.jsonl").write_text('{"schema": "calspec.round/v1", "round": 0, '
                                            '"rejections": []}\n{"sch')
        assert run("analyze", "--log", tmp_path / "bad.jsonl", "--out", tmp_path / "r") == 2
        assert ":2:" in capsys.readouterr().err

    def test_missing_command(self):
        assert run() == 1


class TestCommands:
    def test_calibrate_identical_models(self, workdir, tmp_path):
        out = tmp_path / "m.tsv"
        assert run("calibrate", "--draft", workdir / "target.ngram", "--target",
                   workdir / "target.ngram", "--vocab", workdir / "vocab.txt", "--corpus",
                   workdir / "calib.txt", "--quiet", "--out", out) == 0
        assert out.read_text() == "#csd-ocm v1 lambda=6 capacity=none\n"

    def test_run_vanilla(self, workdir, capsys):
        assert run("run", *models(workdir), "--prompt", first_prompt(workdir), "--mode",
                   "vanilla", "--max-tokens", 10) == 0
        out = capsys.readouterr().out
        assert "# acceptance_rate\tn/a" in out
        assert len(out.splitlines()[0].split()) == 10

    def test_run_csd_empty_memory_matches_sd_output(self, workdir, capsys):
        # One round with gamma >= max_tokens: the first round of csd is the sd round.
        outs = []
        for mode in ("sd", "csd"):
            run("run", *models(workdir), "--prompt", first_prompt(workdir), "--mode", mode,
                "--max-tokens", 4, "--temperature", 1.0, "--seed", 3)
            outs.append(capsys.readouterr().out.splitlines()[0])
        assert outs[0] == outs[1]

    def test_run_with_memory_rescues(self, workdir, tmp_path, capsys):
        calibrate(workdir, tmp_path / "m.tsv")
        capsys.readouterr()
        assert run("run", *models(workdir), "--prompt", first_prompt(workdir), "--memory",
                   tmp_path / "m.tsv", "--save-memory", tmp_path / "m2.tsv") == 0
        lines = dict(l[2:].split("\t") for l in capsys.readouterr().out.splitlines()[1:])
        assert lines["policy"] == "csd"
        assert (tmp_path / "m2.tsv").exists()

    def test_bench_one_policy_one_prompt(self, workdir, tmp_path, capsys):
        (tmp_path / "p.txt").write_text(first_prompt(workdir) + "\n")
        assert run("bench", *models(workdir), "--prompts", tmp_path / "p.txt",
                   "--policies", "sd") == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 2 and lines[1].startswith("sd\t0\t")

    def test_bench_json(self, workdir, capsys):
        assert run("bench", *models(workdir), "--prompts", workdir / "eval.txt", "--policies",
                   "vanilla,sd,csd", "--format", "json") == 0
        rows = json.loads(capsys.readouterr().out)
        assert [r["policy"] for r in rows] == ["vanilla", "sd", "csd"]

    def test_analyze_empty_log(self, tmp_path, capsys):
        (tmp_path / "e.jsonl").write_text("")
        assert run("analyze", "--log", tmp_path / "e.jsonl", "--out", tmp_path / "r") == 0
        assert "warning" in capsys.readouterr().err
        assert (tmp_path / "r" / "patterns.tsv").read_text().count("\n") == 1

    def test_analyze_full_head(self, workdir, tmp_path):
        log = tmp_path / "run.jsonl"
        assert run("run", *models(workdir), "--prompt", first_prompt(workdir), "--mode", "sd",
                   "--temperature", 0.6, "--log", log) == 0
        assert run("analyze", "--log", log, "--vocab", workdir / "vocab.txt",
                   "--head-fraction", 1, "--out", tmp_path / "r") == 0
        rows = (tmp_path / "r" / "coverage.tsv").read_text().splitlines()
        assert "1\t" in rows[-1] and rows[-1].endswith("\t1.000000")


class TestConfig:
    def test_flags_win(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "c.conf"
        cfg.write_text(f"# run settings\nmode = sd\nmax-tokens = 5\ndraft = {workdir / 'draft.pert'}\n")
        assert run("run", "--config", cfg, "--target", workdir / "target.ngram", "--vocab",
                   workdir / "vocab.txt", "--prompt", first_prompt(workdir),
                   "--max-tokens", 7) == 0
        cap = capsys.readouterr()
        assert len(cap.out.splitlines()[0].split()) == 7
        assert "# policy\tsd" in cap.out
        effective = json.loads(cap.err.split("effective config ", 1)[1].splitlines()[0])
        assert effective["mode"] == "sd" and effective["max_tokens"] == 7

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.conf"
        cfg.write_text("speed = 11\n")
        assert run("analyze", "--config", cfg, "--log", "x", "--out", "y") == 1

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "c.conf"
        cfg.write_text("top = -3\n")
        assert run("analyze", "--config", cfg, "--log", "x", "--out", "y") == 1


def snapshot(directory):
    return {p: (directory / p).read_bytes() for p in sorted(os.listdir(directory))
            if (directory / p).is_file()}


def test_every_command_is_deterministic(workdir, tmp_path, capsys):
    outs = []
    for k in range(2):
        d = tmp_path / f"rep{k}"
        d.mkdir()
        assert run("synth", "--out-dir", d / "fx", "--train-docs", 50, "--calibration-prompts", 5,
                   "--eval-prompts", 3) == 0
        assert run("train", "--corpus", workdir / "train.txt", "--vocab", workdir / "vocab.txt",
                   "--order", 3, "--alpha", 0.01, "--out", d / "t.ngram") == 0
        assert run("perturb", "--base", d / "t.ngram", "--pairs", "1:2,3:4", "--sigma", 0.3,
                   "--out", d / "d.pert") == 0
        assert calibrate(workdir, d / "m.tsv", "--workers", 2) == 0
        capsys.readouterr()
        assert run("run", *models(workdir), "--prompt", first_prompt(workdir), "--memory",
                   d / "m.tsv", "--temperature", 0.8, "--log", d / "run.jsonl") == 0
        run_out = capsys.readouterr().out
        assert run("bench", *models(workdir), "--prompts", workdir / "eval.txt", "--memory",
                   d / "m.tsv", "--policies", "sd,csd,lossy", "--seeds", "0,1",
                   "--temperature", 0.8, "--out", d / "bench.tsv", "--log-dir", d / "logs") == 0
        assert run("analyze", "--log", d / "run.jsonl", "--out", d / "report") == 0
        top = snapshot(d)
        nested = {sub: snapshot(d / sub) for sub in ("fx", "logs", "report")}
        outs.append((run_out, top, nested))
    assert outs[0] == outs[1]
