# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
import math

import numpy as np
import pytest
from helpers import finite_difference_jacobian, power_iteration_norm, random_params

from core_dynamics import (
    RnnParams,
    absorption_time_bound,
    evolve,
    evolve_stacked,
    jacobian,
    lyapunov_spectrum,
    orbit,
    params_from_json,
    spectral_norm,
    step,
)
from errors import ConfigurationError, InputWindowError
from experiments import scalar_roots
from input_space import InputSequence, constant_sequence, gen_two_symbol, gen_uniform_scaled, shift


def _random_case(i: int):
    rng = np.random.default_rng(1000 + i)
    n_i = 1 + i % 3
    params = random_params(i, n_r=2 + i % 5, n_i=n_i, n_o=i % 2, alpha=rng.uniform(0.1, 1.0), scale=rng.uniform(0.5, 2.0))
    seq = InputSequence(anchor=int(rng.integers(-20, 20)), values=rng.uniform(-2.0, 2.0, size=(80, n_i)))
    x0 = rng.uniform(-1.0, 1.0, params.n_r)
    return rng, params, seq, x0


@pytest.mark.parametrize("i", range(100))
def test_cocycle_identity_is_bit_exact(i):
    # GIVEN a random network, input window and start state
    rng, params, seq, x0 = _random_case(i)
    m, n = int(rng.integers(0, 40)), int(rng.integers(0, 38))
    start = seq.start
    # WHEN evolving m + n steps at once, or m steps then n steps on the shifted input
    direct = orbit(params, seq, x0, m + n, start=start).final
    middle = orbit(params, seq, x0, m, start=start).final
    composed = orbit(params, shift(seq, m), middle, n, start=start).final
    # THEN both routes agree to the last bit
    assert np.array_equal(direct, composed)


def test_step_matches_one_orbit_step(random_network):
    u = np.full(random_network.n_i, 0.3)
    x = np.linspace(-0.5, 0.5, random_network.n_r)
    seq = constant_sequence(u, 0, 1)
    assert np.array_equal(step(random_network, u, x), orbit(random_network, seq, x, 1).final)


def test_orbit_of_zero_steps_is_the_start_state(switching, switching_input):
    traj = orbit(switching, switching_input, [0.2, -0.3], 0)
    assert len(traj) == 1
    assert np.array_equal(traj.final, [0.2, -0.3])
    assert traj.times.tolist() == [switching_input.anchor]


@pytest.mark.parametrize("seed", range(20))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = random_params(seed, n_r=4, n_i=2, n_o=seed % 2, alpha=0.6, scale=1.3)
    u = rng.uniform(-1.0, 1.0, 2)
    x = rng.uniform(-1.0, 1.0, 4)
    exact = jacobian(params, u, x)
    approx = finite_difference_jacobian(params, u, x)
    assert np.linalg.norm(exact - approx) <= 1e-6 * np.linalg.norm(exact)


def test_hypercube_is_absorbing():
    rng = np.random.default_rng(7)
    for i in range(1000):
        params = random_params(i % 10, n_r=3, n_i=2, n_o=i % 2, alpha=0.3 + 0.07 * (i % 10), scale=3.0)
        x = rng.uniform(-1.0, 1.0, 3)
        u = rng.uniform(-5.0, 5.0, 2)
        assert np.max(np.abs(step(params, u, x))) <= 1.0


def test_evolve_keep_returns_the_tail_bit_exactly(switching, switching_input):
    x0 = np.array([[0.1, 0.2], [-0.4, 0.9]])
    full = evolve(switching, switching_input, x0, 0, 50)
    tail = evolve(switching, switching_input, x0, 0, 50, keep=5)
    assert tail.shape == (2, 6, 2)
    assert np.array_equal(full[:, -6:], tail)


def test_evolve_past_the_window_raises(switching, switching_input):
    with pytest.raises(InputWindowError) as exc:
        evolve(switching, switching_input, [[0.0, 0.0]], switching_input.stop - 3, 10)
    assert "input window exhausted" in exc.value.message


def test_evolve_stacked_matches_evolve_per_realization(scalar):
    # GIVEN three noise realizations of the scalar neuron and a batch of two starts
    seqs = [gen_uniform_scaled(0.01, 400, seed) for seed in range(3)]
    x0 = np.array([[0.5], [-0.7]])
    # WHEN they are evolved as one stack
    stacked = evolve_stacked(scalar, seqs, x0, 0, 300, keep=40)
    # THEN each slice is exactly the single-realization evolution
    assert stacked.shape == (3, 2, 41, 1)
    for seq, states in zip(seqs, stacked):
        assert np.array_equal(states, evolve(scalar, seq, x0, 0, 300, keep=40))


def test_evolve_stacked_on_a_planar_network(switching):
    u1 = np.array([0.25, 0.15])
    seqs = [gen_two_symbol(u1, -u1, 0.5, 200, seed) for seed in (4, 5)]
    x0 = np.array([[0.1, 0.9], [0.1, -0.9], [0.3, 0.0]])
    stacked = evolve_stacked(switching, seqs, x0, 0, 150)
    assert stacked.shape == (2, 3, 151, 2)
    for seq, states in zip(seqs, stacked):
        np.testing.assert_allclose(states, evolve(switching, seq, x0, 0, 150), rtol=0, atol=1e-14)
    assert np.array_equal(evolve_stacked(switching, seqs, x0, 7, 0)[:, :, 0], np.stack([x0, x0]))


def test_evolve_stacked_errors(switching, switching_input):
    with pytest.raises(ConfigurationError):
        evolve_stacked(switching, [], [[0.0, 0.0]], 0, 10)
    with pytest.raises(ConfigurationError):
        evolve_stacked(switching, [switching_input], [[0.0]], 0, 10)
    with pytest.raises(InputWindowError):
        evolve_stacked(switching, [switching_input], [[0.0, 0.0]], switching_input.stop - 3, 10)


def test_step_rejects_wrong_dimensions(switching):
    with pytest.raises(ConfigurationError):
        step(switching, [0.1, 0.2, 0.3], [0.0, 0.0])
    with pytest.raises(ConfigurationError):
        step(switching, [0.1, 0.2], [0.0])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"alpha": 0.0, "w_r": [[0.5]], "w_in": [[1.0]]},
        {"alpha": 1.5, "w_r": [[0.5]], "w_in": [[1.0]]},
        {"alpha": 1.0, "w_r": [[0.5, 0.1]], "w_in": [[1.0]]},
        {"alpha": 1.0, "w_r": [[0.5]], "w_in": [[1.0], [2.0]]},
        {"alpha": 1.0, "w_r": [[0.5]], "w_in": [[1.0]], "w_fb": [[0.3]]},
        {"alpha": 1.0, "w_r": [[np.nan]], "w_in": [[1.0]]},
    ],
)
def test_invalid_params_are_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        RnnParams(**kwargs)


def test_effective_recurrent_includes_feedback():
    params = RnnParams(alpha=1.0, w_r=[[0.1, 0.0], [0.0, 0.2]], w_in=[[1.0], [1.0]], w_fb=[[1.0], [0.0]], w_o=[[0.5, 0.5]])
    assert np.allclose(params.effective_recurrent, [[0.6, 0.5], [0.0, 0.2]])
    assert params.has_feedback
    assert params.dims == (2, 1, 1)


@pytest.mark.parametrize("seed", range(10))
def test_spectral_norm_matches_power_iteration(seed):
    mat = np.random.default_rng(seed).normal(size=(6, 4))
    assert spectral_norm(mat) == pytest.approx(power_iteration_norm(mat), rel=1e-8)


def test_spectral_norm_edge_cases():
    assert spectral_norm(np.zeros((3, 3))) == 0.0
    assert spectral_norm(np.diag([0.5, -2.0])) == pytest.approx(2.0)
    with pytest.raises(ConfigurationError):
        spectral_norm([[np.inf, 0.0], [0.0, 1.0]])


def test_absorption_time_bound():
    params = random_params(3, n_r=4, n_i=1, alpha=0.5, scale=0.5)
    samples = np.array([[-1.0], [1.0]])
    assert absorption_time_bound(params, np.full(4, 0.5), samples) == 0.0

    x0 = np.full(4, 3.0)
    bound = absorption_time_bound(params, x0, samples)
    assert 0.0 < bound < math.inf
    seq = InputSequence(anchor=0, values=np.where(np.arange(40) % 2, 1.0, -1.0)[:, None])
    states = orbit(params, seq, x0, math.ceil(bound)).states
    assert np.max(np.abs(states[-1])) <= 1.0 + 1e-12

    one_step = RnnParams(alpha=1.0, w_r=params.w_r, w_in=params.w_in)
    assert absorption_time_bound(one_step, x0, samples) == 1.0


def test_lyapunov_exponent_at_a_stable_fixed_point(scalar):
    root = scalar_roots(1.01, 0.0)[-1]
    seq = constant_sequence([0.0], 0, 5000)
    exponent = lyapunov_spectrum(scalar, seq, [root], 5000)[0]
    assert exponent == pytest.approx(math.log(1.01 * (1.0 - root * root)), abs=1e-6)
    assert exponent < 0.0


def test_params_document_round_trip(tmp_path):
    params = random_params(5, n_r=3, n_i=2, n_o=1)
    path = params.save(tmp_path / "net.json")
    loaded = RnnParams.load(path)
    assert np.array_equal(loaded.effective_recurrent, params.effective_recurrent)
    assert loaded.dims == params.dims
    assert loaded.alpha == params.alpha


def test_params_from_invalid_json():
    with pytest.raises(ConfigurationError):
        params_from_json("{not json")
    with pytest.raises(ConfigurationError):
        params_from_json('{"alpha": 1.0}')
