# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
import math
import unittest
from pathlib import Path

import numpy as np
import pytest
import yaml
from fs.tempfs import TempFS

from core_dynamics import evolve
from errors import ConfigurationError
from experiments import (
    MANIFEST_NAME,
    SUMMARY_NAME,
    ContextTaskSettings,
    ExperimentConfig,
    FoldBisectSettings,
    KloedenSettings,
    KloedenSystem,
    Preset,
    ScalarSweepSettings,
    Switching2dSettings,
    fixed_point_inventory,
    fixed_point_residual,
    fold_point,
    keeps_well,
    load_manifest,
    parallel_map,
    parse_overrides,
    plain,
    replay,
    resolve_settings,
    run_fold_bisect,
    run_kloeden,
    run_preset,
    run_scalar_sweep,
    scalar_roots,
    sha256,
    switching_statistics,
    well_switches,
)
from input_space import InputSequence


def test_fold_point():
    x_star, c_star = fold_point()
    assert x_star == pytest.approx(0.0995, abs=1e-4)
    assert 0.00060 <= c_star <= 0.00075
    assert c_star == pytest.approx(0.000665, abs=5e-6)
    # the slope of tanh(gain x + c) is one at the fold
    assert 1.01 * (1.0 - x_star**2) == pytest.approx(1.0)


def test_keeps_well():
    _, c_star = fold_point()
    assert keeps_well(0.0)
    assert keeps_well(0.9 * c_star)
    assert not keeps_well(1.1 * c_star)
    assert keeps_well(0.9 * c_star, side=1)
    assert not keeps_well(0.002, side=1)


def test_scalar_roots():
    roots = scalar_roots(1.01, 0.0)
    assert len(roots) == 3
    assert roots[1] == pytest.approx(0.0, abs=1e-12)
    assert roots[0] == pytest.approx(-roots[2])
    for r in roots:
        assert math.tanh(1.01 * r) == pytest.approx(r, abs=1e-12)
    assert len(scalar_roots(0.5, 0.25)) == 1


def test_fixed_point_inventory():
    inventory = fixed_point_inventory()
    assert [p["kind"] for p in inventory] == ["stable", "saddle", "stable"]
    saddle = inventory[1]
    assert inventory[0]["point"][1] < saddle["point"][1] < inventory[2]["point"][1]
    assert abs(saddle["multipliers"][1]) > 1.0 > abs(saddle["multipliers"][0])


@pytest.mark.parametrize("a", [1.0, 0.5, -2.0])
def test_kloeden_needs_a_above_one(a):
    with pytest.raises(ConfigurationError):
        KloedenSystem(a)


def test_kloeden_root():
    system = KloedenSystem(1.5)
    root = system.positive_root()
    assert 0.0 < root < 1.0
    assert math.tanh(1.5 * root / (1.0 + root)) == pytest.approx(root, abs=1e-12)
    assert system.input(-2, 1).values[:, 0].tolist() == pytest.approx([2 / 3, 2 / 3, 1.5, 1.5])


def test_kloeden_switch_acts_on_the_step_into_zero():
    # GIVEN one state at k = -1, before the switch
    system = KloedenSystem(1.5)
    seq = system.input(-1, 2)
    x = 0.4
    # WHEN it is advanced once
    step_into_zero = evolve(system, seq, np.array([[x]]), -1, 1)[0, -1, 0]
    # THEN the step into k = 0 already uses a, not 1 / a
    assert step_into_zero == pytest.approx(math.tanh(1.5 * x / (1.0 + x)), abs=1e-15)
    assert step_into_zero != pytest.approx(math.tanh(x / 1.5 / (1.0 + x)))


def test_switching_statistics_counts_well_changes(scalar):
    blocks = np.repeat([0.5, -0.5] * 3, 100)
    seq = InputSequence(anchor=0, values=np.concatenate([[0.5], blocks]))
    stats = switching_statistics(scalar, seq, 0.5, 0, 600, fold_point()[0])
    assert stats["switches"] == 5
    assert stats["steps"] == 600
    assert stats["variance"] > 0.1


def test_parse_overrides():
    parsed = parse_overrides(["a=1.5", "m_list=[1, 2]", " name = x ", "full_scale=true"])
    assert parsed == {"a": 1.5, "m_list": [1, 2], "name": "x", "full_scale": True}


@pytest.mark.parametrize("pair", ["a", "=1", "a=", "a=[1,"])
def test_parse_overrides_errors(pair):
    with pytest.raises(ConfigurationError):
        parse_overrides([pair])


def test_resolve_settings():
    config = ExperimentConfig(preset="kloeden", overrides={"a": 2.0})
    settings = resolve_settings(config)
    assert isinstance(settings, KloedenSettings)
    assert settings.a == 2.0
    assert settings.ic_count == 11


@pytest.mark.parametrize("overrides", [{"bogus": 1}, {"a": 0.5}, {"ic_count": "many"}])
def test_resolve_settings_rejects_bad_overrides(overrides):
    with pytest.raises(ConfigurationError):
        resolve_settings(ExperimentConfig(preset="kloeden", overrides=overrides))


def test_context_task_scale():
    assert ContextTaskSettings().scale() == (200, 6000, 3000)
    assert ContextTaskSettings(full_scale=True).scale() == (500, 10000, 5000)
    assert ContextTaskSettings(n_r=50).scale() == (50, 6000, 3000)


def test_parallel_map_keeps_order():
    def square(x):
        return x * x

    assert parallel_map(square, list(range(20)), threads=4) == [x * x for x in range(20)]
    assert parallel_map(square, [3], threads=4) == [9]


def test_plain():
    data = {"a": np.float64(1.5), "b": np.arange(3), "c": Path("x/y"), "d": Preset.KLOEDEN, 4: (1, 2)}
    assert plain(data) == {"a": 1.5, "b": [0, 1, 2], "c": "x/y", "d": "kloeden", "4": [1, 2]}
    yaml.safe_dump(plain(data))


def test_kloeden_preset_passes(tmp_path):
    result = run_kloeden(KloedenSettings(), 0, tmp_path)
    assert result.ok, result.failures
    assert result.summary["past_fibre"]["diameter"] < 1e-6
    assert (tmp_path / "kloeden_orbits.csv").exists()
    trace = (tmp_path / "kloeden_fibre_diameter.csv").read_text().splitlines()
    assert trace[0] == "step,diameter"
    assert len(trace) == 1 + 36


def test_fold_bisect_preset_passes(tmp_path):
    result = run_fold_bisect(FoldBisectSettings(), 0, tmp_path)
    assert result.ok, result.failures
    assert result.summary["bisection"] == pytest.approx(fold_point()[1], abs=1e-5)
    assert yaml.safe_load((tmp_path / "fold.yaml").read_text())["iterations"] == result.summary["iterations"]


class TestManifest(unittest.TestCase):
    """A preset run leaves a manifest that replays byte for byte."""

    def setUp(self):
        self.sandbox = TempFS("echodex-runs", auto_clean=True)
        self.sandbox_root = Path(self.sandbox.getsyspath("/"))
        self.addCleanup(self.sandbox.close)

    def test_run_then_replay(self):
        # GIVEN a kloeden run with one override
        out = self.sandbox_root / "kloeden"
        config = ExperimentConfig(preset="kloeden", seed=3, output_dir=out, overrides={"ic_count": 7})
        result = run_preset(config)
        self.assertTrue(result.ok)

        # THEN the manifest lists every file with its digest
        manifest = load_manifest(out / MANIFEST_NAME)
        self.assertEqual(manifest["preset"], "kloeden")
        self.assertEqual(manifest["seed"], 3)
        self.assertEqual(manifest["settings"]["ic_count"], 7)
        self.assertIn(SUMMARY_NAME, manifest["files"])
        self.assertIn("kloeden_orbits.csv", manifest["files"])
        self.assertTrue(manifest["ok"])

        # WHEN it is replayed into a fresh directory
        replayed, mismatches = replay(out / MANIFEST_NAME)

        # THEN every file is reproduced exactly
        self.assertEqual(mismatches, [])
        self.assertTrue(replayed.ok)
        self.assertTrue((out / "replay" / SUMMARY_NAME).exists())

    def test_not_a_manifest(self):
        path = self.sandbox_root / "other.yaml"
        path.write_text("preset: kloeden\n")
        with self.assertRaises(ConfigurationError):
            load_manifest(path)
        with self.assertRaises(ConfigurationError):
            load_manifest(self.sandbox_root / "missing.yaml")


def test_well_switches():
    threshold = 0.1
    orbit = np.array([0.5, 0.05, -0.2, -0.05, -0.3, 0.0, 0.3, 0.2, -0.01, 0.4, -0.4])
    # 0.5 -> -0.2 -> 0.3 -> -0.4; values inside the threshold band do not count
    assert well_switches(orbit, threshold) == 3
    assert well_switches(np.full(50, 0.3), threshold) == 0
    assert well_switches(np.zeros(10), threshold) == 0


def test_switching_fixed_points_are_exact_roots():
    # GIVEN the per-coordinate fixed point equations of the f1 map
    x1_roots = scalar_roots(0.5, 0.25)
    x2_roots = scalar_roots(1.5, 0.15)
    # THEN the roots solve them to rounding and sit within the preset tolerances
    assert fixed_point_residual(0.5, 0.25, x1_roots) < 1e-10
    assert fixed_point_residual(1.5, 0.15, x2_roots) < 1e-10
    settings = Switching2dSettings()
    assert len(x1_roots) == 1
    assert abs(x1_roots[0] - settings.saddle_x1) <= settings.saddle_tol
    assert x1_roots[0] == pytest.approx(0.4369774, abs=1e-6)
    assert len(x2_roots) == 3
    assert abs(x2_roots[0] - settings.x2_stable[0]) <= settings.x2_tol
    assert abs(x2_roots[-1] - settings.x2_stable[1]) <= settings.x2_tol
    assert x2_roots == pytest.approx([-0.75257, -0.32429, 0.90704], abs=2e-5)


def test_fixed_point_residual():
    assert fixed_point_residual(1.01, 0.0, []) == 0.0
    assert fixed_point_residual(1.01, 0.0, [0.0]) == 0.0
    assert fixed_point_residual(0.5, 0.25, [0.5]) == pytest.approx(abs(0.5 - math.tanh(0.5)))


def test_orbit_from_the_documented_start_joins_the_lower_fibre(switching, switching_input):
    # the default seed-0 drive takes (0.1, -0.1) into the lower region, the one the preset expects
    settings = Switching2dSettings()
    start = settings.fibre_n - settings.orbit_depth
    end = evolve(switching, switching_input, np.array([[0.1, -0.1]]), start, settings.orbit_depth)[0, -1]
    assert settings.orbit_fibre == "lower"
    assert end[1] < -0.55


def _small_sweep(**overrides) -> ScalarSweepSettings:
    small = {
        "seed_count": 2,
        "ic_count": 6,
        "transient": 1000,
        "max_escalations": 1,
        "switch_steps": 5000,
        "lyapunov_steps": 500,
    }
    return ScalarSweepSettings(**{**small, **overrides})


def test_scalar_sweep_keeps_both_wells_below_the_fold(tmp_path):
    # GIVEN noise weaker than the fold amplitude
    settings = _small_sweep(w_list=[0.0006], expected=[2], switching_w=[])
    # WHEN the sweep runs
    result = run_scalar_sweep(settings, 0, tmp_path)
    # THEN no orbit leaves its well and no switching check is made
    checks = {c.name: c.passed for c in result.checks}
    assert checks["wells_kept_at_w_0.0006"]
    assert not any(name.startswith("switching_response") for name in checks)
    assert result.summary["per_w"][0]["switches"] == [0, 0]
    assert not result.summary["per_w"][0]["switching"]


def test_scalar_sweep_flags_the_switching_response(tmp_path):
    # GIVEN noise far above the fold amplitude, listed as a switching amplitude
    settings = _small_sweep(w_list=[0.05], expected=[1], switching_w=[0.05], transient=4000, switch_steps=20000)
    # WHEN the sweep runs
    result = run_scalar_sweep(settings, 0, tmp_path)
    # THEN the orbit hops between the wells and the check reports it
    point = result.summary["per_w"][0]
    checks = {c.name: c.passed for c in result.checks}
    assert any(point["switches"])
    assert checks["switching_response_at_w_0.05"] == point["switching"] == (point["majority"] == 1)
    assert "wells_kept_at_w_0.05" not in checks


def test_scalar_sweep_rejects_unknown_switching_amplitudes(tmp_path):
    with pytest.raises(ConfigurationError):
        run_scalar_sweep(_small_sweep(w_list=[0.05], expected=[1], switching_w=[0.01]), 0, tmp_path)
    with pytest.raises(ConfigurationError):
        run_scalar_sweep(_small_sweep(w_list=[0.05], expected=[1, 2]), 0, tmp_path)


def test_sweep_results_do_not_depend_on_the_thread_count(tmp_path):
    # GIVEN the same two-amplitude sweep on one and on three workers
    settings = _small_sweep(w_list=[0.0006, 0.05], expected=[2, 1], switching_w=[])
    serial_dir, pooled_dir = tmp_path / "serial", tmp_path / "pooled"
    serial_dir.mkdir()
    pooled_dir.mkdir()
    serial = run_scalar_sweep(settings, 0, serial_dir)
    pooled = run_scalar_sweep(settings, 0, pooled_dir, threads=3)
    # THEN the summaries and the written files are identical
    assert serial.summary == pooled.summary
    assert [sha256(p) for p in serial.files] == [sha256(p) for p in pooled.files]
