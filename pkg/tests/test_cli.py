import json
from pathlib import Path

import numpy as np
import pytest

from canopt.candidate import SolutionCandidate
from canopt.cli import main
from canopt.problem import bundled_path


def run(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def test_inspect_prints_canonical_form_and_split(capsys):
    rc, out, _ = run(capsys, "inspect", str(bundled_path("pontryagin")))
    assert rc == 0
    assert "horizon 1" in out
    assert "f_11 = " in out
    assert "R = " in out
    assert "H = " in out
    assert "group u: first" in out


def test_inspect_parse_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.prob"
    bad.write_text("horizon 1\nstate x innit 1\n")
    rc, _, err = run(capsys, "inspect", str(bad))
    assert rc == 2
    assert "line 2" in err


def test_inspect_missing_file_exit_2(capsys):
    rc, _, err = run(capsys, "inspect", "/nonexistent/q.prob")
    assert rc == 2
    assert "error" in err


def test_solve_writes_bundle(tmp_path, capsys):
    out = tmp_path / "run"
    rc, text, _ = run(capsys, "solve", str(bundled_path("lq")),
                      "--out", str(out))
    assert rc == 0
    for name in ("candidate.json", "candidate.csv", "residuals.csv",
                 "report.txt", "report.json"):
        assert (out / name).exists()
    rep = json.loads((out / "report.json").read_text())
    assert rep["verdict"] is True
    assert "objective: " in text
    assert "verdict: pass" in text
    header = (out / "residuals.csv").read_text().splitlines()[0]
    assert header == "tau,J_1"


def test_solve_deterministic_bytes(tmp_path, capsys):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        rc, _, _ = run(capsys, "solve", str(bundled_path("isoperimetric")),
                       "--out", str(out))
        assert rc == 0
        outs.append(out)
    for name in ("candidate.json", "candidate.csv", "residuals.csv",
                 "report.txt", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_solve_oracle_cross_check(tmp_path, capsys):
    rc, out, _ = run(capsys, "solve", str(bundled_path("lq")),
                     "--out", str(tmp_path / "run"), "--oracle")
    assert rc == 0
    line = next(l for l in out.splitlines() if l.startswith("oracle |dI|"))
    assert float(line.split(":")[1]) < 1e-3


def test_solve_relax_writes_weights(tmp_path, capsys):
    out = tmp_path / "run"
    rc, _, _ = run(capsys, "solve", str(bundled_path("sliding")),
                   "--relax", "--out", str(out))
    assert rc == 0
    cand = SolutionCandidate.load(out)
    assert cand.relaxed is not None
    assert int(np.max(cand.relaxed.support_sizes())) <= 2


def test_verify_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    rc, _, _ = run(capsys, "solve", str(bundled_path("pointwise")),
                   "--out", str(out))
    assert rc == 0
    rc, text, _ = run(capsys, "verify", str(bundled_path("pointwise")),
                      "--candidate", str(out))
    assert rc == 0
    assert text.rstrip().endswith("verdict: pass")


def test_chatter_missing_candidate_exit_2(tmp_path, capsys):
    rc, _, err = run(capsys, "chatter", str(bundled_path("sliding")),
                     "--candidate", str(tmp_path / "nowhere"))
    assert rc == 2
    assert "candidate" in err


def test_chatter_study(tmp_path, capsys):
    out = tmp_path / "run"
    rc, _, _ = run(capsys, "solve", str(bundled_path("sliding")),
                   "--relax", "--out", str(out))
    assert rc == 0
    study_dir = tmp_path / "study"
    rc, text, _ = run(capsys, "chatter", str(bundled_path("sliding")),
                      "--candidate", str(out), "--levels", "4,8,16",
                      "--out", str(study_dir))
    assert rc == 0
    lines = (study_dir / "study.csv").read_text().splitlines()
    assert lines[0] == "i,criterion,gap,max_residual,state_dev,note"
    assert len(lines) == 4
    assert "gap slope: " in text
    gaps = [abs(float(l.split(",")[2])) for l in lines[1:]]
    assert gaps[0] > gaps[1] > gaps[2]


def test_chatter_classical_candidate_constant_gap(tmp_path, capsys):
    # constant optimal control: sampling it on any partition changes nothing,
    # so the realization gap sits at the noise floor for every i
    out = tmp_path / "run"
    rc, _, _ = run(capsys, "solve", str(bundled_path("isoperimetric")),
                   "--out", str(out))
    assert rc == 0
    study_dir = tmp_path / "study"
    rc, _, _ = run(capsys, "chatter", str(bundled_path("isoperimetric")),
                   "--candidate", str(out), "--levels", "4,8,16",
                   "--out", str(study_dir))
    assert rc == 0
    lines = (study_dir / "study.csv").read_text().splitlines()[1:]
    gaps = [abs(float(l.split(",")[2])) for l in lines]
    assert max(gaps) < 1e-5


def test_solve_mesh_flag(tmp_path, capsys):
    out = tmp_path / "run"
    rc, _, _ = run(capsys, "solve", str(bundled_path("lq")),
                   "--mesh", "120", "--out", str(out))
    assert rc == 0
    cand = SolutionCandidate.load(out)
    assert cand.mesh.n == 120
