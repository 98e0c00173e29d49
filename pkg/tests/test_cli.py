from __future__ import annotations

import os
import re
import shutil
import subprocess
import sys

import pytest
from conftest import CORPUS, SMALL, net_path

from tensorc.cli import main

LOCATED = re.compile(r"^(?P<file>[^:\s]+\.net):(?P<line>\d+):(?P<col>\d+): (?P<kind>\w+): ")

CORPUS_EXPECT = {
    "rank_clash.net": ("ShapeMismatch", 10),
    "concat_mismatch.net": ("ShapeMismatch", 11),
    "nonpositive_conv.net": ("NonPositiveExtent", 12),
    "unbound_name.net": ("UnboundName", 11),
    "duplicate_name.net": ("DuplicateName", 9),
    "fc_input_mismatch.net": ("ShapeMismatch", 13),
}


@pytest.mark.parametrize("name", sorted(CORPUS_EXPECT))
def test_malformed_spec_is_located_and_exits_1(name, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = os.path.join(CORPUS, name)
    for cmd in ("check", "compile"):
        assert main([cmd, path]) == 1
        err = capsys.readouterr().err.strip()
        m = LOCATED.match(err)
        assert m, err
        kind, line = CORPUS_EXPECT[name]
        assert (m["kind"], int(m["line"])) == (kind, line)
    assert os.listdir(tmp_path) == []  # nothing generated


def test_fc_input_mismatch_names_the_site(capsys):
    main(["check", os.path.join(CORPUS, "fc_input_mismatch.net")])
    err = capsys.readouterr().err
    assert "at fc1" in err and "800" in err and "784" in err


def test_check_ok(capsys):
    assert main(["check", net_path("lenet.net")]) == 0
    assert "8 parameter tensors, 431080 weights" in capsys.readouterr().out


def test_analyze_first_row(capsys):
    assert main(["analyze", net_path("lenet.net")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[2].startswith("val X1 = Cuda(X)") and out[2].endswith("1.568000")


def test_analyze_workspace_cap_zero(capsys):
    assert main(["analyze", net_path("lenet.net"), "--workspace-cap", "0"]) == 0
    out = capsys.readouterr().out
    assert "convolution workspace    0.000000 MB  (direct: cv1, cv2)" in out


def test_compile_writes_program_and_dumps(tmp_path, capsys):
    out = tmp_path / "net.py"
    assert main(["compile", SMALL, "-o", str(out), "--dump-ir", "--dump-pass", "vectorize"]) == 0
    text = capsys.readouterr().out
    assert "[vectorize]" in text and "val X1 = Cuda(X)" in text
    assert "class Small" in out.read_text()


def test_missing_file_exits_2(capsys):
    assert main(["check", "/nonexistent/x.net"]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_test_without_snapshot_exits_2(tmp_path, capsys):
    assert main(["test", SMALL, "--snapshot", str(tmp_path / "none")]) == 2


def test_corrupt_snapshot_exits_2(tmp_path, capsys):
    snap = tmp_path / "snap"
    snap.mkdir()
    (snap / "fc2_W.ddt").write_bytes(b"JUNKJUNKJUNK")
    with pytest.warns(UserWarning, match="keeping its initial value"):
        assert main(["test", SMALL, "--snapshot", str(snap)]) == 2
    assert "fc2_W.ddt" in capsys.readouterr().err


def test_train_snapshot_resume_and_test(tmp_path, capsys):
    snap, csv = tmp_path / "snap", tmp_path / "loss.csv"
    assert main(["train", SMALL, "--iters", "4", "--snapshot", str(snap), "--loss-csv", str(csv)]) == 0
    assert main(["train", SMALL, "--iters", "6", "--snapshot", str(snap), "--loss-csv", str(csv)]) == 0
    err = capsys.readouterr().err
    assert "resuming from" in err and "iteration 4" in err
    rows = csv.read_text().splitlines()
    assert rows[0] == "iteration,loss" and [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3", "4", "5", "6"]
    assert main(["test", SMALL, "--snapshot", str(snap)]) == 0
    assert "test precision" in capsys.readouterr().out


def test_seed_from_environment(tmp_path, monkeypatch, capsys):
    def first_loss(seed):
        monkeypatch.setenv("TENSORC_SEED", str(seed))
        main(["train", SMALL, "--iters", "1", "--loss-csv", str(tmp_path / f"{seed}.csv")])
        return (tmp_path / f"{seed}.csv").read_text().splitlines()[1]
    assert first_loss(1) == first_loss(1)
    assert first_loss(1) != first_loss(2)


def test_console_script():
    exe = shutil.which("tensorc")
    cmd = [exe] if exe else [sys.executable, "-m", "tensorc.cli"]
    r = subprocess.run(cmd + ["check", os.path.join(CORPUS, "duplicate_name.net")], capture_output=True, text=True)
    assert r.returncode == 1
    assert "DuplicateName" in r.stderr
