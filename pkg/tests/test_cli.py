"""Tests for CLI argument parsing and command routing"""

import json
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import pytest

from memodetector.cli import main
from memodetector.manifest import Split, load_manifest


def run_cli(*args):
    """Run the CLI with given args, capturing stdout/stderr"""
    with patch("sys.argv", ["memodetector"] + list(args)), \
         patch("sys.stdout", new_callable=StringIO) as stdout, \
         patch("sys.stderr", new_callable=StringIO) as stderr:
        try:
            code = main()
        except SystemExit as e:
            code = e.code
    return code, stdout.getvalue(), stderr.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic corpus plus a complete echo-mock cache under one --out"""
    out = tmp_path_factory.mktemp("cli")
    code, _, _ = run_cli("synth", "--out", str(out))
    assert code == 0
    manifest = out / "synthetic" / "manifest.jsonl"
    code, _, _ = run_cli("enhance", "--mock", "--manifest", str(manifest), "--out", str(out),
                         "--enhance.steps", "ID,TM,CIM,CA,DIRECT")
    assert code == 0
    return out, manifest


class TestCLIHelp:
    def test_no_args_shows_help(self):
        code, stdout, _ = run_cli()
        assert code == 2
        assert "usage:" in stdout.lower()

    def test_help_lists_config_keys(self):
        code, stdout, _ = run_cli("--help")
        assert code == 0
        assert "--train.epochs" in stdout
        assert "ablate" in stdout

    def test_version(self):
        code, stdout, _ = run_cli("--version")
        assert code == 0
        assert "memodetector 0.1.0" in stdout

    def test_unknown_command(self):
        code, _, stderr = run_cli("frobnicate")
        assert code == 2
        assert "invalid choice" in stderr

    def test_checkout_wrapper_does_not_shadow_package(self):
        import memodetector
        root = Path(__file__).resolve().parents[1]
        assert Path(memodetector.__file__).name == "__init__.py"
        assert not (root / "memodetector.py").exists()
        assert (root / "md.py").read_text(encoding="utf-8").count("from memodetector.cli import main") == 1


class TestCLIArgParsing:
    def test_eval_defaults_to_test_split(self):
        with patch("memodetector.cli.MemoDetectorCLI") as MockCLI:
            MockCLI.return_value.cmd_eval.return_value = 0
            run_cli("eval", "--checkpoint", "run/checkpoint.pt")
            MockCLI.return_value.cmd_eval.assert_called_once_with("run/checkpoint.pt", "test")

    def test_eval_rejects_unknown_split(self):
        code, _, _ = run_cli("eval", "--split", "holdout")
        assert code == 2

    def test_compare_sweep(self):
        with patch("memodetector.cli.MemoDetectorCLI") as MockCLI:
            MockCLI.return_value.cmd_compare.return_value = 0
            run_cli("compare", "--sweep", "fusion")
            MockCLI.return_value.cmd_compare.assert_called_once_with("fusion")

    def test_zeroshot_flags(self):
        with patch("memodetector.cli.MemoDetectorCLI") as MockCLI:
            MockCLI.return_value.cmd_zeroshot.return_value = 0
            run_cli("zeroshot", "--split", "val", "--cot")
            MockCLI.return_value.cmd_zeroshot.assert_called_once_with("val", True)

    def test_report_inputs(self):
        with patch("memodetector.cli.MemoDetectorCLI") as MockCLI:
            MockCLI.return_value.cmd_report.return_value = 0
            run_cli("report", "a", "b")
            MockCLI.return_value.cmd_report.assert_called_once_with(["a", "b"])

    def test_mock_flag_defaults_to_echo(self):
        with patch("memodetector.cli.MemoDetectorCLI") as MockCLI:
            MockCLI.return_value.cmd_enhance.return_value = 0
            run_cli("enhance", "--mock", "--manifest", "m.jsonl")
            assert MockCLI.call_args.kwargs["mock"] == "echo"

    def test_overrides_reach_config(self):
        with patch("memodetector.cli.MemoDetectorCLI") as MockCLI:
            MockCLI.return_value.cmd_train.return_value = 0
            run_cli("train", "--train.epochs", "3", "--seed", "7", "--out", "elsewhere", "--fusion.variant", "add")
            config = MockCLI.call_args.args[0]
            assert config.get("train.epochs") == 3
            assert config.get("train.seeds") == "7"
            assert config.get("output.dir") == "elsewhere"
            assert config.get("fusion.variant") == "add"

    def test_bad_override_value(self):
        code, _, stderr = run_cli("config", "--show", "--train.epochs", "many")
        assert code == 1
        assert "train.epochs" in stderr


class TestConfigCommand:
    def test_example(self):
        code, stdout, _ = run_cli("config", "--example")
        assert code == 0
        assert "[fusion]" in stdout

    def test_show(self):
        code, stdout, _ = run_cli("config", "--show", "--encoder.dim", "48")
        assert code == 0
        assert "48" in stdout

    def test_show_reports_invalid_values(self):
        code, _, stderr = run_cli("config", "--show", "--fusion.heads", "5")
        assert code == 1
        assert "fusion.heads" in stderr

    def test_save(self, tmp_path):
        target = tmp_path / "saved.conf"
        code, stdout, _ = run_cli("config", "--save", str(target), "--train.epochs", "11")
        assert code == 0
        assert "epochs = 11" in target.read_text()

    def test_needs_an_action(self):
        code, _, stderr = run_cli("config")
        assert code == 2
        assert "--show" in stderr


class TestUsageErrors:
    def test_train_needs_manifest(self, tmp_path):
        code, _, stderr = run_cli("train", "--out", str(tmp_path))
        assert code == 2
        assert "--manifest" in stderr

    def test_eval_needs_checkpoint(self, tmp_path):
        code, _, stderr = run_cli("eval", "--out", str(tmp_path))
        assert code == 2
        assert "--checkpoint" in stderr

    def test_missing_manifest_file(self, tmp_path):
        code, _, stderr = run_cli("train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path))
        assert code == 1
        assert stderr.startswith("Error:")


class TestEnhanceCommand:
    def test_counts_and_rerun(self, small_manifest_path, tmp_path):
        args = ("enhance", "--mock", "--manifest", str(small_manifest_path), "--out", str(tmp_path))
        code, stdout, _ = run_cli(*args)
        assert code == 0
        assert "hits=0 misses=12 failures=0 calls=12" in stdout
        assert (tmp_path / "enhancements.jsonl").exists()

        code, stdout, _ = run_cli(*args)
        assert code == 0
        assert "hits=12 misses=0 failures=0 calls=0" in stdout

    def test_failures_exit_one(self, small_manifest_path, tmp_path):
        fixture = tmp_path / "replies.json"
        fixture.write_text(json.dumps({"CIM": "", "default": "something"}))
        code, stdout, stderr = run_cli("enhance", "--mock", str(fixture), "--manifest", str(small_manifest_path),
                                       "--out", str(tmp_path))
        assert code == 1
        assert "failures=3" in stdout
        assert "m002/CIM" in stderr

    def test_language_filter(self, small_manifest_path, tmp_path):
        code, stdout, _ = run_cli("enhance", "--mock", "--manifest", str(small_manifest_path), "--out",
                                  str(tmp_path), "--dataset.language", "zh")
        assert code == 0
        assert "misses=4" in stdout


class TestValidateCommand:
    def test_reports_missing_coverage(self, small_manifest_path, tmp_path):
        code, stdout, stderr = run_cli("validate", "--manifest", str(small_manifest_path), "--out", str(tmp_path))
        assert code == 1
        assert "coverage 0%" in stdout
        assert "[X] cache: CA missing for 3 meme(s): m001, m002, m003" in stdout
        assert "problem(s) found" in stderr

    def test_passes_after_enhance(self, small_manifest_path, tmp_path):
        run_cli("enhance", "--mock", "--manifest", str(small_manifest_path), "--out", str(tmp_path))
        code, stdout, _ = run_cli("validate", "--manifest", str(small_manifest_path), "--out", str(tmp_path))
        assert code == 0
        assert "coverage 100%" in stdout
        assert "[OK] All checks passed" in stdout

    def test_partial_coverage(self, small_manifest_path, tmp_path):
        run_cli("enhance", "--mock", "--manifest", str(small_manifest_path), "--out", str(tmp_path),
                "--enhance.steps", "ID,TM,CIM")
        code, stdout, _ = run_cli("validate", "--manifest", str(small_manifest_path), "--out", str(tmp_path))
        assert code == 1
        assert "coverage 75%" in stdout or "coverage 75.0%" in stdout

    def test_config_only(self, tmp_path):
        code, stdout, _ = run_cli("validate", "--out", str(tmp_path))
        assert code == 0
        assert "configuration only" in stdout


class TestSplitCommand:
    def test_writes_new_manifest(self, small_manifest_path, tmp_path):
        out = tmp_path / "out"
        code, stdout, _ = run_cli("split", "--manifest", str(small_manifest_path), "--out", str(out),
                                  "--overwrite", "--split.ratio", "1:0:0")
        assert code == 0
        assert "train=3, val=0, test=0" in stdout
        written = load_manifest(out / "manifest.jsonl")
        assert all(m.split == Split.TRAIN for m in written)
        assert all(Path(m.image_ref).is_absolute() for m in written)

    def test_refuses_to_overwrite_source(self, small_manifest_path):
        code, _, _ = run_cli("split", "--manifest", str(small_manifest_path), "--out",
                             str(small_manifest_path.parent))
        assert code == 2


class TestPipeline:
    def test_train_then_eval(self, workspace):
        out, manifest = workspace
        code, stdout, _ = run_cli("train", "--manifest", str(manifest), "--out", str(out), "--train.epochs", "2")
        assert code == 0
        checkpoint = out / "train" / "seed-1" / "checkpoint.pt"
        assert checkpoint.exists()
        assert (out / "train" / "seed-1" / "epoch_log.jsonl").exists()

        code, stdout, _ = run_cli("eval", "--manifest", str(manifest), "--out", str(out),
                                  "--checkpoint", str(checkpoint))
        assert code == 0
        assert "[OK] test: 4 memes" in stdout
        assert (out / "eval" / "test" / "metrics.json").exists()

    def test_train_reports_missing_coverage(self, workspace, tmp_path):
        _, manifest = workspace
        code, _, stderr = run_cli("train", "--manifest", str(manifest), "--out", str(tmp_path))
        assert code == 1
        assert "missing 112 enhancement entries" in stderr

    def test_compare_then_report(self, workspace):
        out, manifest = workspace
        code, stdout, _ = run_cli("compare", "--manifest", str(manifest), "--out", str(out), "--sweep",
                                  "enhancement", "--train.epochs", "1", "--train.seeds", "1")
        assert code == 0
        assert (out / "compare" / "summary.csv").exists()

        code, stdout, _ = run_cli("report", str(out / "compare"), "--out", str(out))
        assert code == 0
        assert "[OK] Chart:" in stdout
        assert (out / "report" / "report.csv").exists()

    def test_ablate(self, workspace):
        out, manifest = workspace
        code, stdout, _ = run_cli("ablate", "--manifest", str(manifest), "--out", str(out),
                                  "--train.epochs", "1", "--seed", "1")
        assert code == 0
        assert "[OK] 6 configurations over 1 seed(s)" in stdout
        assert "w/o CIM" in stdout

    def test_report_without_metrics(self, tmp_path):
        code, _, stderr = run_cli("report", str(tmp_path), "--out", str(tmp_path))
        assert code == 1
        assert "no metrics.csv" in stderr


class TestZeroShotCommand:
    def test_canned_answer(self, small_manifest_path, tmp_path):
        fixture = tmp_path / "replies.json"
        fixture.write_text(json.dumps({"default": "I would say sadness."}))
        code, stdout, _ = run_cli("zeroshot", "--mock", str(fixture), "--manifest", str(small_manifest_path),
                                  "--out", str(tmp_path))
        assert code == 0
        assert "[OK] test: 1 memes" in stdout
        records = [json.loads(l) for l in (tmp_path / "zeroshot" / "predictions.jsonl").read_text().splitlines()]
        assert records == [{"id": "m003", "label": "anger", "prediction": "sadness", "parsed": True,
                            "response": "I would say sadness."}]

    def test_unparsed_answers_are_counted(self, small_manifest_path, tmp_path):
        fixture = tmp_path / "replies.json"
        fixture.write_text(json.dumps({"COT": "Hard to say."}))
        code, stdout, _ = run_cli("zeroshot", "--mock", str(fixture), "--manifest", str(small_manifest_path),
                                  "--out", str(tmp_path), "--split", "train", "--cot")
        assert code == 0
        assert "named no label" in stdout
        assert (tmp_path / "zeroshot-cot" / "metrics.json").exists()
