import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cifalign.cif import WeightPredictor
from cifalign.cli import CONFIG_KEYS, compare_table, main, resolve_config
from cifalign.errors import ConfigError
from cifalign.models import GraftedModel, save_checkpoint

TINY = ["--set", "count=24", "--set", "epochs=1", "--set", "warmup_steps=1",
        "--set", "batch_size=8"]


def listing(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            path = os.path.join(base, f)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"tau": 0.5, "epochs": 3}))
        cfg = resolve_config(str(path), ["tau=0.2"], {"tau": 0.3, "seed": None})
        assert cfg["tau"] == 0.3 and cfg["epochs"] == 3 and cfg["seed"] == 0

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            resolve_config(None, ["learning_rate=1"])

    def test_tuple_and_bool_values(self):
        cfg = resolve_config(None, ["frames_per_token=[4,4]", "attention=true"])
        assert cfg["frames_per_token"] == (4, 4) and cfg["attention"] is True

    @pytest.mark.parametrize("bad", ["tau=0", "epochs=1.5", "align_mode=l2", "eval_split=x"])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            resolve_config(None, [bad])

    def test_help_lists_every_key(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["eval", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for name, key in CONFIG_KEYS.items():
            assert f"  {name} = " in text


class TestExitCodes:
    def test_unknown_key_is_two(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "nope=1"]) == 2

    def test_bad_flag_is_two(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["train-align", "--graft-depth", "5", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_missing_checkpoint_file_is_three(self, tmp_path, capsys):
        code = main(["eval", "--out", str(tmp_path), "--set",
                     f"checkpoint={tmp_path / 'missing.wabt'}"])
        assert code == 3

    def test_corrupt_checkpoint_message(self, tmp_path, capsys):
        (tmp_path / "bad.wabt").write_bytes(b"WABT\x01")
        assert main(["eval", "--out", str(tmp_path), "--set",
                     f"checkpoint={tmp_path / 'bad.wabt'}"]) == 3
        assert "[models]" in capsys.readouterr().err

    def test_bad_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WABERT_THREADS", "zero")
        assert main(["gen-data", "--out", str(tmp_path), "--count", "2"]) == 2


class TestSubcommands:
    def test_gen_data_twice_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--seed", "7", "--count", "40",
                         "--out", str(tmp_path / name)]) == 0
        assert listing(tmp_path / "a") == listing(tmp_path / "b")

    def test_train_eval_heatmap_pca_finetune(self, tmp_path):
        corpus, run = tmp_path / "corpus", tmp_path / "run"
        assert main(["gen-data", "--count", "24", "--out", str(corpus)]) == 0
        assert main(["train-align", "--out", str(run), "--set", f"corpus={corpus}",
                     "--align-mode", "cos", "--graft-depth", "6", *TINY]) == 0
        ckpt = run / "checkpoint.wabt"
        assert ckpt.exists() and (run / "train_log.csv").exists()
        common = ["--set", f"corpus={corpus}", "--set", f"checkpoint={ckpt}"]
        assert main(["eval", "--out", str(run / "eval"), *common]) == 0
        report = json.loads((run / "eval" / "metrics.json").read_text())
        assert report["mae_ms"] >= 0 and report["recall_weighted"] is None
        assert main(["heatmap", "--out", str(run / "heat"), *common]) == 0
        assert (run / "heat" / "heatmap.pgm").read_bytes().startswith(b"P5\n")
        assert main(["pca", "--out", str(run / "pca"), *common]) == 0
        rows = list(csv.reader(open(run / "pca" / "pca.csv")))
        assert {r[3] for r in rows[1:]} == {"acoustic", "linguistic"}
        assert main(["finetune", "--out", str(run / "ft"), *common, *TINY]) == 0
        ft = ["--set", f"corpus={corpus}", "--set", f"checkpoint={run / 'ft' / 'classifier.wabt'}"]
        assert main(["eval", "--out", str(run / "eval2"), *ft]) == 0
        assert json.loads((run / "eval2" / "metrics.json").read_text())["f1_weighted"] is not None

    def test_writes_only_under_out(self, tmp_path, monkeypatch):
        work = tmp_path / "cwd"
        work.mkdir()
        monkeypatch.chdir(work)
        out = tmp_path / "only"
        assert main(["train-align", "--out", str(out), *TINY]) == 0
        assert list(work.iterdir()) == []
        assert set(os.listdir(out)) == {"checkpoint.wabt", "train_log.csv", "config.json"}

    def test_seeded_runs_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["train-align", "--seed", "3", "--out", str(tmp_path / name), *TINY]) == 0
        assert listing(tmp_path / "a") == listing(tmp_path / "b")

    def test_eval_of_oracle_checkpoint_is_exact(self, tmp_path):
        # one encoded frame per token and uniform weights put every edge on the gold grid
        model = GraftedModel.build(seed=0)
        model.predictor = WeightPredictor.zeros(32)
        save_checkpoint(model, tmp_path / "oracle.wabt")
        code = main(["eval", "--out", str(tmp_path / "e"), "--set", "frames_per_token=[4,4]",
                     "--set", "count=30", "--set", f"checkpoint={tmp_path / 'oracle.wabt'}"])
        assert code == 0
        assert json.loads((tmp_path / "e" / "metrics.json").read_text())["mae_ms"] == 0.0

    def test_ablate_eight_rows(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WABERT_THREADS", "1")
        assert main(["ablate", "--out", str(tmp_path), *TINY]) == 0
        rows = list(csv.reader(open(tmp_path / "compare.csv")))
        assert len(rows) == 9
        assert [(r[0], r[1]) for r in rows[1:]] == [(str(d), m) for d in (3, 6, 9, 12)
                                                   for m in ("cos", "infonce")]
        assert all(r[-1] == "n/a" for r in rows[1:])
        assert len(os.listdir(tmp_path)) == 10

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "gradcheck.json").read_text())
        assert all(s["passed"] for s in summary.values())
        assert "cif_composed" in summary

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "cifalign", "gen-data", "--count", "3",
                               "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0 and (tmp_path / "manifest.jsonl").exists()


class TestCompareTable:
    run = {"depth": 3, "align_mode": "infonce", "mae_ms": 12.5, "median_ms": 10.0,
           "acc_50": 0.9, "acc_100": 1.0, "acc_500": 1.0, "acc_1000": 1.0,
           "diagonality": 0.4, "recall_weighted": None, "f1_weighted": 0.912345678}

    def test_single_row(self):
        text, table = compare_table([self.run])
        assert len(text.splitlines()) == 2 and len(table.splitlines()) == 2

    def test_missing_is_na(self):
        text, table = compare_table([{"depth": 6, "align_mode": "cos"}])
        row = list(csv.reader(io.StringIO(table)))[1]
        assert row[2:] == ["n/a"] * 9
        assert "  " in text and not any(v == "" for v in row)

    def test_csv_roundtrip(self):
        _, table = compare_table([self.run])
        row = dict(zip(*list(csv.reader(io.StringIO(table)))))
        assert float(row["f1_weighted"]) == round(self.run["f1_weighted"], 6)
        assert float(row["mae_ms"]) == self.run["mae_ms"]

    def test_sorted(self):
        runs = [dict(self.run, depth=d, align_mode=m) for d in (9, 3) for m in ("infonce", "cos")]
        _, table = compare_table(runs)
        order = [tuple(r[:2]) for r in csv.reader(io.StringIO(table))][1:]
        assert order == [("3", "cos"), ("3", "infonce"), ("9", "cos"), ("9", "infonce")]
