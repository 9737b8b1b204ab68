import json
import subprocess
import sys

import numpy as np
import pytest

from siamface import FaceDb, IdentityRecord
from siamface.cli import EXIT_DOMAIN, EXIT_IO, EXIT_OK, build_parser, main
from siamface.pgm import write_pgm
from siamface.service import RecognitionPipeline, ServerThread, SyntheticEmbedder


def test_help_documents_defaults():
    out = subprocess.run([sys.executable, "-m", "siamface", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train" in out.stdout
    for name in ("train", "eval", "bench", "serve", "register", "recognize", "synth"):
        text = subprocess.run([sys.executable, "-m", "siamface", name, "--help"],
                              capture_output=True, text=True)
        assert text.returncode == 0
        assert "(default:" in text.stdout


def test_every_flag_has_help_text():
    parser = build_parser()
    for sub in parser._subparsers._group_actions[0].choices.values():
        for action in sub._actions:
            if action.dest != "help":
                assert action.help, (sub.prog, action.dest)


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train", "x", "--bogus"])
    assert info.value.code == 2


def test_train_smoke(tmp_path, small_tree, capsys):
    ckpt, report = tmp_path / "m.ckpt", tmp_path / "r.csv"
    code = main(["train", str(small_tree), "--epochs", "2", "--subjects", "4",
                 "--pairs-per-epoch", "32", "--checkpoint", str(ckpt), "--report", str(report)])
    assert code == EXIT_OK
    assert len(report.read_text().splitlines()) == 3
    assert "final loss" in capsys.readouterr().out

    code = main(["eval", str(ckpt), str(small_tree), "--subjects", "4", "--sweep", "0.5", "1", "2"])
    out = capsys.readouterr().out
    assert code == EXIT_OK and "genuine pairs" in out and "impostor pairs" in out


def test_train_missing_dataset(tmp_path, capsys):
    missing = tmp_path / "no_such_dir"
    code = main(["train", str(missing), "--epochs", "1"])
    assert code == EXIT_IO
    assert str(missing) in capsys.readouterr().err


def test_eval_bad_checkpoint(tmp_path, small_tree, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", str(bad), str(small_tree)]) == EXIT_IO
    assert "bad magic" in capsys.readouterr().err


def test_bench_report(capsys):
    assert main(["bench", "--count", "100", "--rows", "10000"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    for section in ("embed", "query"):
        assert report[section]["count"] == 100
        assert report[section]["p50_ms"] <= report[section]["p99_ms"]
    assert report["query"]["rows"] == 10000
    assert report["query"]["p50_ms"] < 10.0


def test_register_and_recognize_commands(tmp_path, small_tree, capsys):
    pipe = RecognitionPipeline(SyntheticEmbedder(0), FaceDb([IdentityRecord(1, np.full(5, 9.0))]))
    with ServerThread(pipe) as srv:
        addr = f"{srv.address[0]}:{srv.address[1]}"
        image = sorted((small_tree / "s1").glob("*.pgm"))[0]
        assert main(["register", str(image), "--user-id", "7", "--server", addr]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["user_id"] == 7

        flat = tmp_path / "flat.pgm"
        write_pgm(flat, np.full((112, 92), 0.3))
        assert main(["register", str(flat), "--user-id", "8", "--server", addr]) == EXIT_DOMAIN

        frames = tmp_path / "frames"
        frames.mkdir()
        from siamface.pgm import read_pgm
        still, face = np.zeros((112, 92)), read_pgm(image)
        for i in range(12):
            write_pgm(frames / f"{i:03d}.pgm", still if i < 3 else face)
        assert main(["recognize", str(frames), "--server", addr, "--n", "3"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "user_id[1]:7 distance:0.0000" in out and "1 request(s) sent" in out


def test_synth_writes_tree(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "t"), "--subjects", "2", "--images", "3"]) == EXIT_OK
    assert len(list((tmp_path / "t").rglob("*.pgm"))) == 6


def test_train_is_seed_deterministic(tmp_path, small_tree):
    csvs = []
    for run in range(2):
        report = tmp_path / f"r{run}.csv"
        main(["train", str(small_tree), "--epochs", "1", "--subjects", "3", "--pairs-per-epoch", "16",
              "--checkpoint", str(tmp_path / f"m{run}.ckpt"), "--report", str(report)])
        csvs.append(report.read_text())
    assert csvs[0] == csvs[1]
