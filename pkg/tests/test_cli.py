import csv

import numpy as np
import pytest

from subsidyctl import cli
from subsidyctl.config import dump_kv, load_kv, parse_kv, resolve
from subsidyctl.core import read_jsonl
from subsidyctl.validation import ValidationError, check_int, check_positive, check_same_length

FAST = ["--set", "n_days=4", "--set", "train_days=3", "--set", "epochs=2", "--set", "inverse_epochs=2",
        "--set", "ft_epochs=1", "--set", "diffusion_steps=3", "--set", "width=8", "--set", "blocks=1",
        "--set", "kernel=3", "--set", "decoder_hidden=16,16", "--set", "with_bc=0"]


def run(*args):
    return cli.main(list(args))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = {}
    for cmd in ("gen", "train-diffusion", "train-inverse", "finetune", "rollout", "eval", "report"):
        codes[cmd] = run(cmd, "--out", str(out), *FAST)
    return out, codes


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, codes = pipeline
        assert codes == {k: 0 for k in codes}

    def test_outputs(self, pipeline):
        out, _ = pipeline
        for name in ("train.jsonl", "test.jsonl", "coldstart.jsonl", "diffusion_loss.csv", "inverse_loss.csv",
                     "finetune_loss_A.csv", "rollouts.jsonl", "summary.csv", "kpi_curves.csv",
                     "rate_curve.csv", "paired.csv", "fixed_levels.cfg", "model/planner.json",
                     "model/decoder_C.json", "resolved_eval.cfg", "profiles/A.cfg"):
            assert (out / name).exists(), name

    def test_split_sizes(self, pipeline):
        out, _ = pipeline
        assert len(read_jsonl(out / "train.jsonl")) == 9
        assert len(read_jsonl(out / "test.jsonl")) == 3
        assert len(read_jsonl(out / "coldstart.jsonl")) == 12

    def test_resolved_config(self, pipeline):
        out, _ = pipeline
        kv = load_kv(out / "resolved_train_diffusion.cfg")
        assert kv["epochs"] == "2" and kv["window_minutes"] == "10"

    def test_eval_idempotent(self, pipeline, tmp_path):
        out, _ = pipeline
        src = ["--set", f"data={out}", "--set", f"model={out / 'model'}"]
        for d in ("a", "b"):
            assert run("eval", "--out", str(tmp_path / d), *FAST, *src) == 0
        for f in ("summary.csv", "paired.csv", "rate_curve.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_sweep(self, pipeline):
        out, _ = pipeline
        assert run("sweep-gamma", "--out", str(out), *FAST, "--set", "gammas=0.5,1.0,1.5") == 0
        rows = list(csv.reader(open(out / "sweep.csv")))
        assert rows[0][0] == "gamma" and len(rows) == 1 + 3 + 2
        assert rows[-1][0] == "spearman_gamma_rides"

    def test_gen_deterministic(self, pipeline, tmp_path):
        out, _ = pipeline
        assert run("gen", "--out", str(tmp_path), *FAST) == 0
        assert (tmp_path / "train.jsonl").read_bytes() == (out / "train.jsonl").read_bytes()


class TestExitCodes:
    def test_finetune_rejects_negative_anchor(self, pipeline, capsys):
        out, _ = pipeline
        assert run("finetune", "--out", str(out), *FAST, "--set", "anchor=-1") == 2
        assert "anchor" in capsys.readouterr().err

    def test_missing_artifact(self, tmp_path, capsys):
        assert run("train-diffusion", "--out", str(tmp_path)) == 4
        assert "training dataset" in capsys.readouterr().err

    def test_missing_model(self, tmp_path, capsys):
        assert run("rollout", "--out", str(tmp_path)) == 4
        assert "model metadata" in capsys.readouterr().err

    def test_bad_override(self, tmp_path):
        assert run("gen", "--out", str(tmp_path), "--set", "novalue") == 2
        assert run("gen", "--out", str(tmp_path), "--set", "window_minutes=7") == 2
        assert run("gen", "--out", str(tmp_path), "--jobs", "0") == 2

    def test_invariant(self, pipeline, monkeypatch):
        out, _ = pipeline

        import subsidyctl.estimators as E
        orig = E.SubsidyPlanner.finetune

        def tamper(self, *a, **k):
            orig(self, *a, **k)
            self.denoiser_.params["out_b"] = self.denoiser_.params["out_b"] + 1.0
            return self

        monkeypatch.setattr(E.SubsidyPlanner, "finetune", tamper)
        assert run("finetune", "--out", str(out / "tamper"), "--set", f"data={out}",
                   "--set", f"model={out / 'model'}", *FAST) == 3

    def test_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("D3_SEED", "5")
        assert run("gen", "--out", str(tmp_path), *FAST) == 0
        assert load_kv(tmp_path / "resolved_gen.cfg")["seed"] == "5"

    def test_window_five(self, tmp_path):
        assert run("gen", "--out", str(tmp_path), "--set", "window_minutes=5", "--set", "n_days=2",
                   "--set", "train_days=1") == 0
        assert read_jsonl(tmp_path / "train.jsonl")[0].T == 288


class TestConfig:
    def test_parse(self):
        kv = parse_kv("a = 1\n# note\nb=x,y  # trailing\n\n")
        assert kv == {"a": "1", "b": "x,y"}

    def test_malformed(self):
        with pytest.raises(ValueError):
            parse_kv("just text")
        with pytest.raises(ValueError):
            parse_kv("=3")

    def test_roundtrip(self, tmp_path):
        dump_kv({"b": 0.1, "a": (1, 2), "c": "s"}, tmp_path / "x.cfg")
        assert (tmp_path / "x.cfg").read_text() == "a=1,2\nb=0.1\nc=s\n"
        assert load_kv(tmp_path / "x.cfg") == {"a": "1,2", "b": "0.1", "c": "s"}

    def test_precedence(self):
        out = resolve({"seed": "1", "x": "a"}, {"seed": "2"}, env={})
        assert out == {"seed": "2", "x": "a"}
        assert resolve({"seed": "1"}, {"seed": "2"}, env={"D3_SEED": "9"})["seed"] == "9"


class TestValidation:
    def test_helpers(self):
        assert check_positive("x", 2) == 2.0
        assert check_positive("x", 0, strict=False) == 0.0
        with pytest.raises(ValidationError):
            check_positive("x", 0)
        with pytest.raises(ValidationError):
            check_positive("x", float("inf"))
        assert check_int("n", 3, 1, 5) == 3
        with pytest.raises(ValidationError):
            check_int("n", True)
        with pytest.raises(ValidationError):
            check_int("n", 9, 1, 5)
        assert check_same_length([1, 2], (3, 4)) == 2
        with pytest.raises(ValidationError):
            check_same_length([1], [1, 2])
