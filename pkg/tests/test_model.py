import math

import numpy as np
import pytest
from sympy import Rational
from sympy.physics.wigner import clebsch_gordan as wigner_cg

from errors import DomainError, SingularDetuningError
from models import PhysicalParams
from engines.model import (EXCITED, GROUND, clebsch_gordan, clebsch_gordan_table, coupling_tensors,
                           derive_params, initial_state_moments, level_set, pack_plan, product_state_moments,
                           pump_populations, symmetric_zeeman_split, zeeman_levels)


def _rational(x):
    return Rational(int(round(2 * x)), 2)


# --- Clebsch-Gordan ---

def test_stretched_pi_coefficient():
    assert clebsch_gordan(4.5, 4.5, 0) == pytest.approx(math.sqrt(9 / 11), abs=1e-12)
    assert clebsch_gordan(4.5, 4.5, 0) == pytest.approx(0.904534, abs=1e-6)


def test_stretched_sigma_coefficient_squared():
    assert clebsch_gordan(4.5, 4.5, -1) ** 2 == pytest.approx(2 / 11, abs=1e-12)


def test_zero_m_pi_coefficient_vanishes():
    assert clebsch_gordan(1, 0, 0) == 0.0


@pytest.mark.parametrize("F", [0.5, 1, 1.5, 4.5])
def test_matches_wigner_oracle(F):
    for m in zeeman_levels(F):
        for q in (-1, 0, 1):
            if abs(m + q) > F:
                continue
            expected = float(wigner_cg(_rational(F), 1, _rational(F), _rational(m), q, _rational(m + q)))
            assert clebsch_gordan(F, m, q) == pytest.approx(expected, abs=1e-12)


def test_specific_sigma_plus_entry():
    expected = float(wigner_cg(Rational(9, 2), 1, Rational(9, 2), Rational(7, 2), 1, Rational(9, 2)))
    assert clebsch_gordan(4.5, 3.5, 1) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("F", [0.5, 1, 2.5, 4.5])
def test_pi_antisymmetry(F):
    for m in zeeman_levels(F):
        assert clebsch_gordan(F, -m, 0) == pytest.approx(-clebsch_gordan(F, m, 0), abs=1e-14)


@pytest.mark.parametrize("F", [1, 2.5, 4.5])
def test_coupled_state_normalization(F):
    # sum over (m, q) with m + q = M of <F m; 1 q | F M>^2 is one for every M
    for M in zeeman_levels(F):
        total = sum(clebsch_gordan(F, M - q, q) ** 2 for q in (-1, 0, 1) if abs(M - q) <= F)
        assert total == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("F", [1.5, 2, 3.5, 4.5, 7.5])
def test_pi_channel_dominates_on_stretched_state(F):
    assert clebsch_gordan(F, F, 0) ** 2 > clebsch_gordan(F, F, -1) ** 2


@pytest.mark.parametrize("F, m, q", [(4.5, 5.5, 0), (4.5, 4.5, 1), (4.5, 4.0, 0), (4.5, 0.5, 2), (0.0, 0.0, 0)])
def test_clebsch_gordan_domain_errors(F, m, q):
    with pytest.raises(DomainError):
        clebsch_gordan(F, m, q)


def test_clebsch_gordan_table_columns():
    table = clebsch_gordan_table(4.5)
    assert list(table.columns) == ["F", "m", "q", "value"]
    # 10 levels times 3 polarizations minus the two that leave the manifold
    assert len(table) == 28


# --- Derived parameters ---

def test_adjusted_rabi_frequency(physical):
    derived = derive_params(physical)
    assert derived.g_F == pytest.approx(0.904534, abs=1e-6)
    assert derived.chi == pytest.approx(derived.g_F ** 2 / 1000.0, rel=1e-14)
    assert derived.Gamma == pytest.approx(derived.g_F ** 2 * 1.0 / 1000.0 ** 2, rel=1e-14)
    assert derived.delta_res == pytest.approx(physical.N * derived.chi / 2, rel=1e-14)
    assert derived.cooperativity == pytest.approx(4 * derived.g_F ** 2 / (1.0 * 0.1), rel=1e-14)


def test_negative_detuning_keeps_chi_positive(physical):
    derived = derive_params(physical.model_copy(update={"delta_cavity": -1000.0}))
    assert derived.chi > 0
    assert derived.detuning_sign == -1


def test_scale_consistency(physical):
    base = derive_params(physical)
    scaled = derive_params(physical.model_copy(update={"g0": 3.0}))
    assert scaled.chi == pytest.approx(9 * base.chi, rel=1e-12)
    assert scaled.Gamma == pytest.approx(9 * base.Gamma, rel=1e-12)
    assert scaled.cooperativity == pytest.approx(9 * base.cooperativity, rel=1e-12)


def test_decoupling_limit(physical):
    derived = derive_params(physical.model_copy(update={"delta_cavity": 1e30}))
    assert derived.chi < 1e-29
    assert derived.Gamma < 1e-59


def test_zero_detuning_is_singular(physical):
    with pytest.raises(SingularDetuningError):
        derive_params(physical.model_copy(update={"delta_cavity": 0.0}))


def test_cooperativity_without_emission_is_infinite(physical):
    assert derive_params(physical.model_copy(update={"gamma": 0.0})).cooperativity == math.inf


def test_far_detuned_flag():
    near = PhysicalParams(g0=1.0, kappa=1.0, delta_cavity=50.0, N=100)
    far = PhysicalParams(g0=1.0, kappa=1.0, delta_cavity=101.0, N=100)
    assert not near.far_detuned
    assert far.far_detuned


def test_symmetric_zeeman_split():
    delta_g, delta_e = symmetric_zeeman_split(0.3, 4.5)
    assert delta_e == -delta_g
    assert 4.5 * (delta_e - delta_g) == pytest.approx(0.3, rel=1e-14)


# --- Coupling tensors ---

def test_coupling_tensors_follow_clebsch_gordan():
    tensors = coupling_tensors(4.5, 1.0, 0.1, -0.2)
    levels = tensors.levels
    pi, sigma = tensors.channels
    for m in zeeman_levels(4.5):
        assert tensors.pi_plus[m] == clebsch_gordan(4.5, m, 0)
        assert pi[levels.index(EXCITED, m), levels.index(GROUND, m)] == clebsch_gordan(4.5, m, 0)
    for (m, q), c in tensors.sigma_plus.items():
        assert c == pytest.approx(1j * clebsch_gordan(4.5, m, q) / math.sqrt(2), abs=1e-15)
        assert sigma[levels.index(EXCITED, m + q), levels.index(GROUND, m)] == c
    assert tensors.chi0 == pytest.approx(1.0 * 5.5 / 4.5, rel=1e-14)


def test_channels_only_excite():
    tensors = coupling_tensors(2.5, 1.0, 0.0, 0.0)
    levels = tensors.levels
    for channel, allowed in zip(tensors.channels, ({0}, {-1, 1})):
        rows, cols = np.nonzero(channel)
        for r, c in zip(rows, cols):
            (m_r, m_c) = (levels.levels[r][1], levels.levels[c][1])
            assert levels.levels[r][0] == EXCITED and levels.levels[c][0] == GROUND
            assert m_r - m_c in allowed


def test_four_level_model_has_no_sigma_channel():
    tensors = coupling_tensors(4.5, 1.0, 0.0, 0.0, model="four_level")
    assert tensors.levels.D == 4
    assert len(tensors.channels) == 1
    assert tensors.sigma_plus == {}


def test_zeeman_weights():
    tensors = coupling_tensors(1.5, 1.0, 0.2, -0.4)
    for (manifold, m), w in zip(tensors.levels.levels, tensors.zeeman):
        assert w == pytest.approx(m * (0.2 if manifold == GROUND else -0.4))


# --- Initial moments ---

def test_initial_means(physical):
    moments = initial_state_moments(physical)
    levels = moments.levels
    assert moments.mean[levels.gA, levels.gA] == 50
    assert moments.mean[levels.eB, levels.eB] == 50
    off = moments.mean - np.diag(np.diag(moments.mean))
    assert np.all(off == 0)
    assert np.trace(moments.mean).real == 100
    np.testing.assert_array_equal(moments.mean, moments.mean.conj().T)


def test_coherence_variance(physical):
    moments = initial_state_moments(physical)
    levels = moments.levels
    plan = pack_plan(levels.D)
    k = int(np.flatnonzero((plan.rows == levels.gA) & (plan.cols == levels.eA))[0])
    k_off = int(np.flatnonzero((plan.off_rows == levels.gA) & (plan.off_cols == levels.eA))[0])
    re, im = plan.re_pos[k], plan.im_pos[k_off]
    # each of the 50 atoms in |g> contributes (1/2)^2 to both quadratures
    assert moments.covariance[re, re] == pytest.approx(12.5, abs=1e-12)
    assert moments.covariance[im, im] == pytest.approx(12.5, abs=1e-12)
    assert moments.covariance[re, im] == pytest.approx(0.0, abs=1e-12)


def test_populations_have_no_spread(physical):
    moments = initial_state_moments(physical)
    plan = pack_plan(moments.levels.D)
    diagonal = plan.re_pos[plan.rows == plan.cols]
    assert np.allclose(moments.covariance[np.ix_(diagonal, diagonal)], 0.0, atol=1e-12)


def test_small_full_covariance_is_psd():
    moments = initial_state_moments(PhysicalParams(g0=1.0, kappa=1.0, delta_cavity=1000.0, N=4))
    assert moments.covariance.shape == (400, 400)
    assert moments.eig_values.min() >= 0.0
    np.testing.assert_allclose(moments.covariance, moments.covariance.T, atol=1e-12)


def test_imbalanced_pumps(physical):
    moments = initial_state_moments(physical, imbalance=(2, 4))
    levels = moments.levels
    assert moments.mean[levels.gA, levels.gA] == 53
    assert moments.mean[levels.eB, levels.eB] == 49
    assert moments.N == 102


@pytest.mark.parametrize("imbalance", [(1, 0), (-200, 0), (0, 300)])
def test_invalid_imbalance(imbalance):
    with pytest.raises(DomainError):
        pump_populations(100, imbalance)


def test_product_state_moments_from_excited_level():
    levels = level_set(1.5, "full_multilevel")
    moments = product_state_moments(levels, {levels.eB: 7})
    assert moments.N == 7
    assert moments.mean[levels.eB, levels.eB] == 7


def test_pack_round_trip():
    rng = np.random.default_rng(3)
    D = 6
    A = rng.normal(size=(D, D)) + 1j * rng.normal(size=(D, D))
    S = A + A.conj().T
    plan = pack_plan(D)
    x = plan.pack(S)
    assert x.shape == (D * D,)
    np.testing.assert_allclose(plan.unpack(x), S, atol=1e-14)
