import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import engines.twa_engine as twa_engine
from errors import DomainError, IntegrationError
from models import TWAConfig
from engines.ed_engine import moment_series
from engines.model import EXCITED, product_state_moments, level_set
from engines.twa_engine import (TWATrajectory, build_twa_model, dump_ensemble, eom_rhs, evolve_ensemble,
                                hamiltonian_function, initial_ensemble, jackknife, measure_squeezing,
                                run_twa, sample_initial_ensemble, spin_vector)


def _random_hermitian(rng, D, scale=1.0):
    A = rng.normal(size=(D, D)) + 1j * rng.normal(size=(D, D))
    return scale * (A + A.conj().T) / 2


def _unpacked(ensemble):
    return np.stack([ensemble.trajectory(i).svars for i in range(ensemble.n_traj)])


# --- Sampling ---

def test_initial_sampling_statistics(small_twa):
    ensemble = initial_ensemble(100, 4.5, small_twa(n_traj=20_000))
    S = _unpacked(ensemble)
    levels = ensemble.levels
    assert np.allclose(S[:, levels.gA, levels.gA].real, 50.0, atol=1e-9)
    assert np.allclose(S[:, levels.eB, levels.eB].real, 50.0, atol=1e-9)
    spins = spin_vector(S, levels)
    # 50 atoms per ensemble, a quarter of projection noise per atom and quadrature
    for k in (0, 1, 3, 4):
        assert spins[:, k].mean() == pytest.approx(0.0, abs=5 * math.sqrt(12.5 / 20_000))
        assert spins[:, k].var(ddof=1) == pytest.approx(12.5, abs=5 * 12.5 * math.sqrt(2 / 20_000))
    assert spins[:, 2].mean() == pytest.approx(-25.0, abs=1e-9)
    assert spins[:, 5].mean() == pytest.approx(25.0, abs=1e-9)


def test_samples_do_not_depend_on_ensemble_size(small_twa):
    small = initial_ensemble(100, 4.5, small_twa(n_traj=10))
    large = initial_ensemble(100, 4.5, small_twa(n_traj=25))
    np.testing.assert_array_equal(small.samples, large.samples[:10])


def test_seed_changes_samples(small_twa):
    a = initial_ensemble(100, 4.5, small_twa(n_traj=5, seed=1))
    b = initial_ensemble(100, 4.5, small_twa(n_traj=5, seed=2))
    assert not np.array_equal(a.samples, b.samples)


def test_full_model_samples_keep_pumps_fixed(small_twa):
    cfg = small_twa(n_traj=200, model="full_multilevel")
    ensemble = initial_ensemble(40, 1.5, cfg)
    S = _unpacked(ensemble)
    populations = np.real(np.diagonal(S, axis1=-2, axis2=-1))
    np.testing.assert_allclose(populations.sum(axis=-1), 40.0, atol=1e-9)
    np.testing.assert_allclose(S, np.conj(np.swapaxes(S, -1, -2)), atol=1e-12)


# --- Equations of motion ---

def test_free_model_is_static():
    model = build_twa_model(10, 0.0, 0.0, F=1.5)
    S = _random_hermitian(np.random.default_rng(0), model.levels.D)
    np.testing.assert_array_equal(eom_rhs(TWATrajectory(S, 0.0), model), np.zeros_like(S))


def _fd_gradient(S, model, h=1e-3):
    """dH/dS_cd from central differences along Hermitian directions."""
    D = S.shape[0]
    G = np.zeros((D, D), dtype=complex)

    def derivative(E):
        return (hamiltonian_function(S + h * E, model) - hamiltonian_function(S - h * E, model)) / (2 * h)

    for c in range(D):
        E = np.zeros((D, D), dtype=complex)
        E[c, c] = 1.0
        G[c, c] = derivative(E)
        for d in range(c + 1, D):
            E_re = np.zeros((D, D), dtype=complex)
            E_re[c, d] = E_re[d, c] = 1.0
            E_im = np.zeros((D, D), dtype=complex)
            E_im[c, d], E_im[d, c] = 1j, -1j
            d_re, d_im = derivative(E_re), derivative(E_im)
            G[c, d] = 0.5 * (d_re - 1j * d_im)
            G[d, c] = 0.5 * (d_re + 1j * d_im)
    return G


def test_equations_of_motion_follow_hamiltonian():
    model = build_twa_model(10, 0.3, 0.2, F=1.5, model="full_multilevel")
    rng = np.random.default_rng(42)
    for _ in range(100):
        S = _random_hermitian(rng, model.levels.D)
        G = _fd_gradient(S, model)
        expected = -1j * (S @ G.T - G.T @ S)
        got = eom_rhs(TWATrajectory(S, 0.0), model)
        assert np.linalg.norm(got - expected) < 1e-5 * np.linalg.norm(got)


def test_rhs_is_hermitian():
    model = build_twa_model(10, 0.3, 0.2, F=2.5)
    rng = np.random.default_rng(5)
    stack = np.stack([_random_hermitian(rng, model.levels.D) for _ in range(8)])
    rhs = eom_rhs(TWATrajectory(stack, 0.0), model)
    np.testing.assert_allclose(rhs, np.conj(np.swapaxes(rhs, -1, -2)), atol=1e-12)


def test_pumped_mean_field_is_stationary():
    model = build_twa_model(100, 0.01, F=4.5, model="four_level")
    levels = model.levels
    mean = product_state_moments(levels, {levels.gA: 50, levels.eB: 50}).mean
    np.testing.assert_allclose(eom_rhs(TWATrajectory(mean, 0.0), model), 0.0, atol=1e-14)


# --- Ensemble integration ---

def test_linear_invariants_are_conserved(small_twa):
    N, chi = 100, 0.01
    cfg = small_twa(n_traj=20, t_grid=np.linspace(0, 4, 9) / (N * chi), batch_size=10)
    run = run_twa(N, chi, cfg)
    levels = level_set(4.5, "four_level")
    pops = run.populations
    assert np.max(np.abs(pops.sum(axis=-1) - N)) < 1e-8 * N
    inversion = 0.5 * sum((1 if manifold == EXCITED else -1) * pops[..., k]
                          for k, (manifold, _) in enumerate(levels.levels))
    assert np.max(np.abs(inversion - inversion[:, :1])) < 1e-8 * N


def test_squeezing_starts_at_one(small_twa):
    ensemble = initial_ensemble(1000, 4.5, small_twa(n_traj=4000))
    spins = spin_vector(_unpacked(ensemble), ensemble.levels)
    xi2, var1, var2 = measure_squeezing(spins, 1000)
    assert xi2 == pytest.approx(1.0, abs=4 / math.sqrt(4000))
    assert var1 == pytest.approx(250.0, rel=0.1)
    assert var2 == pytest.approx(250.0, rel=0.1)


def test_squeezing_needs_two_trajectories():
    with pytest.raises(DomainError):
        measure_squeezing(np.zeros((1, 6)), 100)


def test_four_level_squeezing_follows_tms(small_twa):
    N, chi = 1000, 1e-3
    obs = run_twa(N, chi, small_twa(n_traj=2000, t_grid=(0.0, 1.0))).observables
    assert obs.xi2[-1] == pytest.approx(math.exp(-1), abs=4 * obs.standard_errors["xi2"][-1])
    assert obs.n_bar[-1] == pytest.approx(2 * math.sinh(0.5) ** 2, abs=4 * obs.standard_errors["n_bar"][-1] + 0.01)


def test_four_level_matches_exact_evolution(small_twa):
    N, chi = 100, 0.01
    t_grid = (0.0, 1.0, 1.5, 2.0)
    obs = run_twa(N, chi, small_twa(n_traj=2000, t_grid=t_grid)).observables
    exact = np.array([m.n_bar for m in moment_series(N, chi, N * chi / 2, t_grid)])
    se = obs.standard_errors["n_bar"]
    np.testing.assert_array_less(np.abs(obs.n_bar - exact)[1:], (4 * se + 0.05 * exact)[1:])


def test_results_independent_of_worker_count(small_twa):
    N, chi = 100, 0.01
    t_grid = (0.0, 1.0, 2.0)
    one = run_twa(N, chi, small_twa(n_traj=120, t_grid=t_grid, batch_size=40, workers=1))
    two = run_twa(N, chi, small_twa(n_traj=120, t_grid=t_grid, batch_size=40, workers=2))
    np.testing.assert_array_equal(one.spins, two.spins)
    np.testing.assert_array_equal(one.observables.xi2, two.observables.xi2)


def test_mismatched_levels_rejected(small_twa):
    cfg = small_twa(n_traj=4)
    ensemble = initial_ensemble(100, 4.5, cfg)
    model = build_twa_model(100, 0.01, F=4.5, model="full_multilevel")
    with pytest.raises(DomainError):
        evolve_ensemble(ensemble, cfg, model)


def test_failed_trajectories_raise(small_twa, monkeypatch):
    monkeypatch.setattr(twa_engine, "_solve", lambda *args: (None, False))
    cfg = small_twa(n_traj=10, t_grid=(0.0, 1.0))
    with pytest.raises(IntegrationError):
        run_twa(100, 0.01, cfg)


def test_jackknife_of_mean_is_standard_error():
    data = np.random.default_rng(9).normal(size=50)
    se = jackknife(lambda d: d.mean(axis=0), (data,), 50)
    assert float(se) == pytest.approx(data.std(ddof=1) / math.sqrt(50), rel=1e-12)


def test_observable_frame(small_twa):
    obs = run_twa(100, 0.01, small_twa(n_traj=40, t_grid=(0.0, 1.0), batch_size=20)).observables
    frame = obs.to_frame()
    assert list(frame["t"]) == [0.0, 1.0]
    for column in ("n_bar", "leakage", "var_delta_n", "xi2", "xi2_se", "n_bar_se"):
        assert column in frame.columns
    assert (frame["n_traj"] == 40).all()
    assert obs.leakage[0] == 0.0


def test_dump_ensemble(small_twa, tmp_path):
    run = run_twa(100, 0.01, small_twa(n_traj=3, t_grid=(0.0, 0.5, 1.0)), keep_svars=True)
    path = tmp_path / "trajectories.csv"
    dump_ensemble(str(path), np.array([0.0, 0.5, 1.0]), run.svars)
    frame = pd.read_csv(path)
    assert len(frame) == 9
    assert list(frame.columns[:2]) == ["trajectory", "t"]
    assert frame.shape[1] == 2 + 16
    with pytest.raises(IOError):
        dump_ensemble(str(tmp_path / "missing" / "x.csv"), np.array([0.0, 0.5, 1.0]), run.svars)


def test_sample_rejects_indefinite_covariance(small_twa):
    levels = level_set(4.5, "four_level")
    moments = product_state_moments(levels, {levels.gA: 2})
    broken = replace(moments, eig_values=moments.eig_values - 1.0)
    with pytest.raises(DomainError):
        sample_initial_ensemble(broken, small_twa(n_traj=2))


# --- Full multilevel cross-check ---

@pytest.mark.slow
def test_full_model_matches_exact_evolution():
    N, chi = 1000, 1e-3
    t_grid = tuple(np.linspace(0.0, 3.8, 20))
    cfg = TWAConfig(n_traj=10_000, t_grid=t_grid, model="full_multilevel", seed=20240917, workers=4)
    obs = run_twa(N, chi, cfg).observables
    exact = np.array([m.n_bar for m in moment_series(N, chi, N * chi / 2, t_grid)])
    se = obs.standard_errors["n_bar"]
    np.testing.assert_array_less(np.abs(obs.n_bar - exact)[1:], (3 * se + 0.02 * exact)[1:])
    window = obs.n_bar[1:] > 0.5
    assert np.all(obs.leakage[1:][window] / obs.n_bar[1:][window] < 0.1)
    assert np.all(obs.var_delta_n[1:][window] / obs.n_bar[1:][window] < 0.1)
