import math
from functools import reduce

import numpy as np
import pytest
from scipy.linalg import expm

import config
from errors import CutoffError, DomainError
from models import FockOracleConfig
from engines.ed_engine import (CollectiveState, SectorBasis, build_sector_hamiltonian, energy,
                               evolve_collective, fock_tms_oracle, initial_collective_state,
                               minimum_squeezing, moment_series, sector_moments, widen)
from engines.upa_analytics import entangled_pair_number


# --- Sector basis and Hamiltonian ---

def test_sector_dimension():
    assert SectorBasis(100).dim == 51
    assert SectorBasis(2).dim == 2
    with pytest.raises(DomainError):
        SectorBasis(7)


def test_two_atom_hamiltonian():
    chi, delta = 0.7, 0.2
    H = build_sector_hamiltonian(2, chi, delta).toarray()
    np.testing.assert_allclose(H, [[chi + delta, chi], [chi, chi - delta]], atol=1e-15)


def test_hamiltonian_is_hermitian():
    H = build_sector_hamiltonian(200, 0.01, 1.0).toarray()
    np.testing.assert_array_equal(H, H.conj().T)


def test_initial_state():
    state = initial_collective_state(100)
    moments = sector_moments(state)
    assert moments.Sz_A == -25.0
    assert moments.Sz_B == 25.0
    assert moments.n_bar == 0.0
    assert moments.var_S1_minus == pytest.approx(25.0, abs=1e-12)
    assert moments.xi2 == pytest.approx(1.0, abs=1e-14)


# --- Evolution ---

T_GRID = [0.0, 1.0, 2.5, 5.0]


@pytest.mark.parametrize("method", ["krylov", "adaptive_ode", "diagonalize"])
def test_norm_and_energy_conserved(method):
    chi, delta = 0.01, 0.5
    states = evolve_collective(initial_collective_state(100), T_GRID, chi, delta, method)
    e0 = energy(states[0], chi, delta)
    for s in states:
        assert s.norm == pytest.approx(1.0, abs=1e-10)
        assert energy(s, chi, delta) == pytest.approx(e0, rel=1e-9, abs=1e-9)


def test_methods_agree():
    chi, delta = 0.01, 0.5
    runs = {m: evolve_collective(initial_collective_state(100), T_GRID, chi, delta, m)
            for m in ("krylov", "adaptive_ode", "diagonalize")}
    for a, b, c in zip(runs["krylov"], runs["adaptive_ode"], runs["diagonalize"]):
        np.testing.assert_allclose(a.amplitudes, c.amplitudes, atol=1e-8)
        np.testing.assert_allclose(b.amplitudes, c.amplitudes, atol=1e-7)


def test_zero_time_is_identity():
    state = initial_collective_state(40)
    out = evolve_collective(state, [0.0], 0.05, 1.0)
    np.testing.assert_array_equal(out[0].amplitudes, state.amplitudes)


def test_time_reversal():
    chi, delta = 0.01, 0.5
    start = initial_collective_state(100)
    forward = evolve_collective(start, [4.0], chi, delta)[0]
    back = evolve_collective(forward, [0.0], chi, delta)[0]
    fidelity = abs(np.vdot(start.amplitudes, back.amplitudes)) ** 2
    assert fidelity == pytest.approx(1.0, abs=1e-8)


def test_krylov_failure_falls_back(monkeypatch):
    monkeypatch.setattr(config, "KRYLOV_TOL", -1.0)
    with pytest.warns(RuntimeWarning, match="falling back"):
        out = evolve_collective(initial_collective_state(100), [0.0, 1.0], 0.01, 0.5)
    exact = evolve_collective(initial_collective_state(100), [0.0, 1.0], 0.01, 0.5, "diagonalize")
    np.testing.assert_allclose(out[1].amplitudes, exact[1].amplitudes, atol=1e-7)


def test_unknown_method():
    with pytest.raises(DomainError):
        evolve_collective(initial_collective_state(10), [1.0], 0.1, 0.25, "euler")


# --- Pair growth ---

def test_short_time_expansion():
    # pair number n couples to n+1 with chi (n+1)(N/2 - n) and sits at -2 chi n^2
    N, t = 100, 1e-3
    M = N / 2
    expected = 2 * (t ** 2 * M ** 2 + t ** 4 * M ** 2 * (M ** 2 - 4 * M + 1) / 3)
    n_bar = moment_series(N, 1.0, M, [t])[0].n_bar
    assert n_bar == pytest.approx(expected, rel=1e-6)


def test_matches_pair_growth_law_up_to_sqrt_n():
    N, chi = 10_000, 1e-4
    t = np.linspace(0, 8, 161) / (N * chi)
    t = t[entangled_pair_number(t, N, chi) <= 0.76 * math.sqrt(N)][1:]
    series = moment_series(N, chi, N * chi / 2, t, method="krylov")
    upa = entangled_pair_number(t, N, chi)
    ed = np.array([m.n_bar for m in series])
    np.testing.assert_array_less(np.abs(ed / upa - 1), 0.05)
    # pump depletion only slows the growth
    assert np.all(ed <= upa * (1 + 1e-9))


def test_small_ensemble_early_growth():
    N, chi = 100, 0.01
    t = np.linspace(0.01, 4, 200) / (N * chi)
    t = t[entangled_pair_number(t, N, chi) <= 1.5]
    ed = np.array([m.n_bar for m in moment_series(N, chi, N * chi / 2, t)])
    np.testing.assert_array_less(np.abs(ed / entangled_pair_number(t, N, chi) - 1), 0.05)


def test_population_difference_is_fixed():
    for m in moment_series(200, 0.005, 0.5, [0.0, 2.0, 6.0]):
        assert m.var_delta_n == pytest.approx(0.0, abs=1e-9)
        assert m.Sz_A + m.Sz_B == pytest.approx(0.0, abs=1e-9)


# --- Squeezing floor ---

@pytest.mark.parametrize("N", [100, 1000])
def test_squeezing_floor(N):
    t_min, xi2_min = minimum_squeezing(N, 1.0 / N)
    assert xi2_min * math.sqrt(N) == pytest.approx(0.88, rel=0.1)
    assert t_min > 0


@pytest.mark.slow
def test_squeezing_floor_large_ensemble():
    N = 10_000
    _, xi2_min = minimum_squeezing(N, 1.0 / N)
    assert xi2_min * math.sqrt(N) == pytest.approx(0.88, rel=0.1)


def test_squeezing_tracks_tms_early():
    N, chi = 1000, 1e-3
    for m, t in zip(moment_series(N, chi, N * chi / 2, [0.5, 1.0]), [0.5, 1.0]):
        assert m.xi2 == pytest.approx(math.exp(-N * chi * t), rel=0.01)


# --- Four-atom brute force ---

def _four_atom_moments(chi, delta, t):
    """Moments from the 16-dimensional Hilbert space of two atoms per ensemble."""
    down_to_up = np.array([[0.0, 0.0], [1.0, 0.0]])
    sz = np.diag([-0.5, 0.5])
    eye = np.eye(2)

    def site(op, k):
        return reduce(np.kron, [op if i == k else eye for i in range(4)])

    S_A_plus = site(down_to_up, 0) + site(down_to_up, 1)
    S_B_plus = site(down_to_up, 2) + site(down_to_up, 3)
    Sz_A = site(sz, 0) + site(sz, 1)
    Sz_B = site(sz, 2) + site(sz, 3)
    raise_ = S_A_plus + S_B_plus
    H = chi * raise_ @ raise_.T + delta * (Sz_B - Sz_A)

    up, down = np.array([0.0, 1.0]), np.array([1.0, 0.0])
    psi0 = reduce(np.kron, [down, down, up, up]).astype(complex)
    psi = expm(-1j * H * t) @ psi0

    def ev(op):
        return np.vdot(psi, op @ psi)

    return {"Sz_A": ev(Sz_A).real, "Sz_A_sq": ev(Sz_A @ Sz_A).real, "Sz_B": ev(Sz_B).real,
            "X": ev(S_A_plus @ S_B_plus.T)}


@pytest.mark.parametrize("t", [0.3, 1.1, 2.7])
def test_four_atoms_match_brute_force(t):
    chi, delta = 0.4, 0.8
    sector = moment_series(4, chi, delta, [t])[0]
    full = _four_atom_moments(chi, delta, t)
    assert sector.Sz_A == pytest.approx(full["Sz_A"], abs=1e-12)
    assert sector.Sz_B == pytest.approx(full["Sz_B"], abs=1e-12)
    assert sector.Sz_A_sq == pytest.approx(full["Sz_A_sq"], abs=1e-12)
    assert sector.X == pytest.approx(full["X"], abs=1e-12)


def test_widened_state_keeps_moments():
    N, chi = 60, 1.0 / 60
    state = evolve_collective(initial_collective_state(N), [2.0 / (N * chi)], chi, N * chi / 2)[0]
    mean_s, cov_s = sector_moments(state).spin_covariance()
    mean_w, cov_w = widen(state).spin_covariance()
    np.testing.assert_allclose(mean_w, mean_s, atol=1e-10)
    np.testing.assert_allclose(cov_w, cov_s, atol=1e-9)


def test_widened_state_is_normalized():
    state = CollectiveState(SectorBasis(8), np.full(5, 1 / math.sqrt(5), dtype=complex))
    assert np.linalg.norm(widen(state).psi) == pytest.approx(1.0, abs=1e-14)


# --- Fock oracle ---

def test_fock_oracle_reproduces_tms():
    result = fock_tms_oracle(FockOracleConfig(n_max=130, coupling=0.5, duration=3.0))
    x = result.times
    np.testing.assert_allclose(result.n_bar, 2 * np.sinh(x / 2) ** 2, atol=1e-8)
    np.testing.assert_allclose(result.covariance[:, 1, 1], 0.5 * np.exp(-x), atol=1e-8)
    assert result.cutoff_population < 1e-8


def test_fock_oracle_starts_in_vacuum():
    result = fock_tms_oracle(FockOracleConfig(n_max=10, coupling=0.5, duration=0.0, n_times=3))
    np.testing.assert_allclose(result.covariance[0], np.eye(4) / 2, atol=1e-14)
    assert result.n_bar[0] == 0.0


def test_fock_oracle_rejects_small_cutoff():
    with pytest.raises(CutoffError):
        fock_tms_oracle(FockOracleConfig(n_max=20, coupling=0.5, duration=3.0))


@pytest.mark.slow
def test_sector_matches_fock_oracle_at_large_n():
    N = 10_000
    chi = 1.0 / N
    oracle = fock_tms_oracle(FockOracleConfig(n_max=160, coupling=N * chi / 2, duration=3.5, n_times=15))
    keep = oracle.n_bar <= 20
    series = moment_series(N, chi, N * chi / 2, oracle.times[keep], method="krylov")
    ed = np.array([m.n_bar for m in series])
    np.testing.assert_allclose(ed[1:], oracle.n_bar[keep][1:], rtol=0.02)
