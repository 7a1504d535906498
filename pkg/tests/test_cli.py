import subprocess
import sys

import pytest

from moma.harness.cli import main

from conftest import CONFIGS


def moma(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "moma.harness.cli", *args], capture_output=True, text=True,
                          cwd=cwd)


def test_missing_config_exit_2(capsys):
    assert main(["train", "--config", "missing.cfg"]) == 2
    assert "config not found" in capsys.readouterr().err


def test_unknown_key_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "learning_rate" in err and "valid keys:" in err and "lr" in err


def test_gradcheck_seed_7(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 10 and all(line.endswith("PASS") for line in lines)


def test_bench_eight_rows(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--methods", "full,divide", "--frames", "2,4,8,16", "--grid", "4", "--dim", "8",
                 "--heads", "2", "--window", "2x2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# moma-bench v1" and len(lines) == 2 + 8


def test_bench_csv_byte_identical_across_processes(tmp_path):
    args = ["bench", "--methods", "full,divide", "--frames", "1,2,4", "--grid", "4", "--dim", "8", "--heads", "2",
            "--window", "2x2", "--no-time"]
    a, b = moma(*args), moma(*args)
    assert a.returncode == b.returncode == 0
    assert a.stdout == b.stdout and a.stdout.count("\n") == 8


def test_oracle(capsys):
    assert main(["oracle", "--cases", "20"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_train_eval_and_determinism(tmp_path):
    cfg = str(CONFIGS / "smoke.cfg")
    a = moma("train", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet")
    b = moma("train", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet")
    assert a.returncode == b.returncode == 0, a.stderr
    ma = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert ma == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert ma.startswith(b"# moma-metrics v1\nepoch,loss,ce,distill,grad_norm,val_acc\n")
    e = moma("eval", "--checkpoint", str(tmp_path / "a" / "checkpoint"))
    assert e.returncode == 0 and e.stdout.startswith("val_acc ")


def test_ablate_writes_csv(tmp_path):
    out = tmp_path / "abl.csv"
    code = main(["ablate", "--config", str(CONFIGS / "smoke.cfg"), "--matrix", "fusion", "--cells", "skip,seqmod",
                 "--epochs", "1", "--out", str(out), "--quiet"])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# moma-ablation v1" and len(lines) == 4


def test_eval_tampered_checkpoint_nonzero(tmp_path, capsys):
    assert main(["train", "--config", str(CONFIGS / "smoke.cfg"), "--out", str(tmp_path), "--epochs", "1",
                 "--quiet"]) == 0
    (tmp_path / "checkpoint" / "frozen.sha256").write_text("0" * 64 + "\n")
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint")]) == 1
    assert "ContractError" in capsys.readouterr().err


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
