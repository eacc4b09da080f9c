# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

import pytest
import yaml
from runner import echodex


def _failed(run: dict) -> list:
    return [c for c in run["manifest"]["checks"] if not c["passed"]]


def test_kloeden(preset_run):
    # GIVEN the default kloeden settings (a = 1.5, 11 ICs on [-1, 1], k in [-10, 25])
    # WHEN the preset runs through the CLI
    run = preset_run("kloeden")
    # THEN every check passes
    assert run["manifest"]["ok"], _failed(run)
    assert run["manifest"]["settings"]["ic_count"] == 11
    assert run["summary"]["past_fibre"]["diameter"] < 1e-6
    finals = [abs(x) for x in run["summary"]["final_states"] if x != 0.0]
    assert max(abs(x - run["summary"]["root"]) for x in finals) < 1e-3


def test_switching2d(preset_run):
    run = preset_run("switching2d")
    assert run["manifest"]["ok"], _failed(run)
    summary = run["summary"]
    assert summary["indices"] == [2] * 5
    lower, upper = summary["strip_bounds"]
    assert lower == pytest.approx(-0.5390, abs=1e-3)
    assert upper == pytest.approx(0.3390, abs=1e-3)
    assert summary["closed_form_norm_gap"] <= 1e-10
    for name in ("upper", "lower"):
        region = summary["regions"][name]
        assert region["invariance"]["invariant"]
        assert region["contraction"]["certified"]


def test_separatrix(preset_run):
    run = preset_run("switching2d")
    checks = {c["name"]: c["passed"] for c in run["manifest"]["checks"]}
    assert checks["boundary_bracketed"]
    assert checks["straddling_points_track"]
    assert checks["edge_track_contiguous"]
    # the straddling pair stays together for a while, then splits
    assert 150 <= run["summary"]["tracking_steps"] <= 1000
    assert (run["out"] / "separatrix_track.csv").exists()


def test_scalar_sweep(preset_run):
    run = preset_run("scalar_sweep")
    assert run["manifest"]["ok"], _failed(run)
    majorities = [row["majority"] for row in run["summary"]["per_w"]]
    assert majorities == [2, 1, 1]
    switching = {row["w"]: row["switching"] for row in run["summary"]["per_w"]}
    assert switching[0.01] and not switching[0.0006]
    # interpreter start-up included
    assert run["seconds"] < 15.0, run["seconds"]


def test_fold_bisect(preset_run):
    run = preset_run("fold_bisect")
    assert run["manifest"]["ok"], _failed(run)
    assert 0.00060 <= run["summary"]["c_star"] <= 0.00075
    assert abs(run["summary"]["bisection"] - run["summary"]["c_star"]) <= 1e-5


def test_splice_demo(preset_run):
    run = preset_run("splice_demo")
    assert run["manifest"]["ok"], _failed(run)
    rows = run["summary"]["rows"]
    assert [r["index"] for r in rows] == [1, 1, 1, 2]
    for ratio in run["summary"]["ratios"]:
        assert 1.8 <= ratio <= 2.2
    assert all(c["index"] == 1 for c in run["summary"]["constant_inputs"])


def test_replay_reproduces_the_fold_run(preset_run):
    run = preset_run("fold_bisect")
    replay_dir = run["out"] / "replayed"
    echodex("replay", run["out"] / "manifest.yaml", "--out", replay_dir)
    assert (replay_dir / "fold.yaml").read_bytes() == (run["out"] / "fold.yaml").read_bytes()


def test_bad_override_exits_with_two(runs_dir):
    result = echodex("kloeden", "--out", runs_dir / "bad", "--set", "colour=red", ok_code=(2,))
    assert result.exit_code == 2


def test_thread_count_does_not_change_results(runs_dir):
    # GIVEN the switching2d preset run on one worker and on three
    digests = {}
    for threads in ("1", "3"):
        out = runs_dir / f"switching2d-threads-{threads}"
        echodex("switching2d", "--out", out, env={"ECHODEX_THREADS": threads})
        manifest = yaml.safe_load((out / "manifest.yaml").read_text())
        digests[threads] = manifest["files"]
    # THEN every file has the same digest
    assert digests["1"] == digests["3"]
