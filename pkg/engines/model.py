"""Physical parameters, Clebsch-Gordan coefficients, coupling tensors and initial moments.

Internal levels are ordered lexicographically by (manifold, m) with ground = 0 and
excited = 1. The two ensembles live on the stretched states:

    A: pump |g,-F>, pair mode |e,-F>
    B: pump |e,+F>, pair mode |g,+F>

with S_A^+ = S_{eA,gA} and S_B^+ = -S_{eB,gB}, so the Pi channel restricted to the
stretched states reads -C_F^0 (S_A^+ + S_B^+).

Collective variables S_{ab} are flattened into D*D reals: for every pair a <= b in
lexicographic order, Re S_ab, then Im S_ab when a < b.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
import sympy
from sympy import Rational, factorial

from errors import DomainError, SingularDetuningError
from models import PhysicalParams

logger = logging.getLogger(__name__)

GROUND, EXCITED = 0, 1
PSD_TOLERANCE = 1e-10


def _twice(x: float, what: str) -> int:
    twice = 2 * x
    if abs(twice - round(twice)) > 1e-9:
        raise DomainError(f"{what}={x} is not a multiple of 1/2")
    return int(round(twice))


@lru_cache(maxsize=None)
def _cg_exact(F2: int, m2: int, q: int) -> sympy.Expr:
    # Racah closed sum for <j1 m1; j2 m2 | J M> with j1 = J = F, j2 = 1
    j1 = J = Rational(F2, 2)
    m1 = Rational(m2, 2)
    j2 = 1
    M = m1 + q
    prefactor = ((2 * J + 1) * factorial(J + j1 - j2) * factorial(J - j1 + j2)
                 * factorial(j1 + j2 - J) / factorial(j1 + j2 + J + 1))
    prefactor *= (factorial(J + M) * factorial(J - M) * factorial(j1 - m1) * factorial(j1 + m1)
                  * factorial(j2 - q) * factorial(j2 + q))
    total = Rational(0)
    for k in range(int(j1 + j2 - J) + 1):
        args = (k, j1 + j2 - J - k, j1 - m1 - k, j2 + q - k, J - j2 + m1 + k, J - j1 - q + k)
        if any(a < 0 for a in args):
            continue
        denominator = 1
        for a in args:
            denominator *= factorial(a)
        total += Rational((-1) ** k) / denominator
    return sympy.sqrt(prefactor) * total


def clebsch_gordan(F: float, m: float, q: int) -> float:
    """<F,m; 1,q | F,m+q> for the F -> F line, evaluated exactly then rounded to float."""
    if q not in (-1, 0, 1):
        raise DomainError(f"q must be -1, 0 or +1, got {q}")
    F2 = _twice(F, "F")
    if F2 < 1:
        raise DomainError("F must be at least 1/2")
    m2 = _twice(m, "m")
    if (F2 - m2) % 2:
        raise DomainError(f"m={m} is not a Zeeman level of F={F}")
    if abs(m2) > F2 or abs(m2 + 2 * q) > F2:
        raise DomainError(f"|m|={abs(m)} or |m+q|={abs(m + q)} exceeds F={F}")
    return float(_cg_exact(F2, m2, q))


def zeeman_levels(F: float) -> list[float]:
    F2 = _twice(F, "F")
    return [(-F2 + 2 * k) / 2 for k in range(F2 + 1)]


def clebsch_gordan_table(F: float) -> pd.DataFrame:
    rows = []
    for m in zeeman_levels(F):
        for q in (-1, 0, 1):
            if abs(m + q) <= F:
                rows.append({"F": F, "m": m, "q": q, "value": clebsch_gordan(F, m, q)})
    return pd.DataFrame(rows, columns=["F", "m", "q", "value"])


# --- Derived couplings ---

@dataclass(frozen=True)
class DerivedParams:
    g_F: float
    chi0: float
    chi: float
    Gamma: float
    delta_res: float
    cooperativity: float
    detuning_sign: int


def derive_params(p: PhysicalParams) -> DerivedParams:
    if p.delta_cavity == 0:
        raise SingularDetuningError("cavity-atom detuning is zero")
    g_F = p.g0 * math.sqrt(p.F / (p.F + 1))
    detuning = abs(p.delta_cavity)
    chi = g_F ** 2 / detuning
    if p.kappa * p.gamma > 0:
        cooperativity = 4 * g_F ** 2 / (p.kappa * p.gamma)
    else:
        cooperativity = math.inf if g_F > 0 else 0.0
    if not p.far_detuned:
        logger.warning(f"|Delta|={detuning:.3g} is not far detuned from g0*sqrt(N)={p.g0 * math.sqrt(p.N):.3g}")
    return DerivedParams(
        g_F=g_F,
        chi0=p.g0 ** 2 / detuning,
        chi=chi,
        Gamma=g_F ** 2 * p.kappa / p.delta_cavity ** 2,
        delta_res=p.N * chi / 2,
        cooperativity=cooperativity,
        detuning_sign=1 if p.delta_cavity > 0 else -1,
    )


def symmetric_zeeman_split(delta: float, F: float) -> tuple[float, float]:
    """(delta_g, delta_e) with delta_e = -delta_g and delta = F (delta_e - delta_g)."""
    return -delta / (2 * F), delta / (2 * F)


# --- Level bookkeeping ---

@dataclass(frozen=True)
class LevelSet:
    F: float
    model: str
    levels: tuple[tuple[int, float], ...]

    @property
    def D(self) -> int:
        return len(self.levels)

    def index(self, manifold: int, m: float) -> int:
        return self.levels.index((manifold, m))

    @property
    def gA(self) -> int:
        return self.index(GROUND, -self.F)

    @property
    def eA(self) -> int:
        return self.index(EXCITED, -self.F)

    @property
    def gB(self) -> int:
        return self.index(GROUND, self.F)

    @property
    def eB(self) -> int:
        return self.index(EXCITED, self.F)

    @property
    def stretched(self) -> tuple[int, int, int, int]:
        return self.gA, self.eA, self.gB, self.eB


@lru_cache(maxsize=None)
def level_set(F: float, model: str = "full_multilevel") -> LevelSet:
    if model == "full_multilevel":
        ms = zeeman_levels(F)
    elif model == "four_level":
        ms = [-F, F]
    else:
        raise DomainError(f"unknown model '{model}'")
    levels = tuple((manifold, m) for manifold in (GROUND, EXCITED) for m in ms)
    return LevelSet(F=F, model=model, levels=levels)


@dataclass(frozen=True)
class PackPlan:
    D: int
    rows: np.ndarray
    cols: np.ndarray
    re_pos: np.ndarray
    off_rows: np.ndarray
    off_cols: np.ndarray
    im_pos: np.ndarray

    @property
    def size(self) -> int:
        return self.D * self.D

    def pack(self, svars: np.ndarray) -> np.ndarray:
        out = np.empty(svars.shape[:-2] + (self.size,))
        out[..., self.re_pos] = svars[..., self.rows, self.cols].real
        out[..., self.im_pos] = svars[..., self.off_rows, self.off_cols].imag
        return out

    def unpack(self, x: np.ndarray) -> np.ndarray:
        svars = np.zeros(x.shape[:-1] + (self.D, self.D), dtype=complex)
        svars[..., self.rows, self.cols] = x[..., self.re_pos]
        svars[..., self.off_rows, self.off_cols] += 1j * x[..., self.im_pos]
        svars[..., self.off_cols, self.off_rows] = np.conj(svars[..., self.off_rows, self.off_cols])
        return svars


@lru_cache(maxsize=None)
def pack_plan(D: int) -> PackPlan:
    rows, cols = np.triu_indices(D)
    re_pos, im_pos = [], []
    pos = 0
    for a, b in zip(rows, cols):
        re_pos.append(pos)
        pos += 1
        if a < b:
            im_pos.append(pos)
            pos += 1
    off = rows < cols
    return PackPlan(D=D, rows=rows, cols=cols, re_pos=np.array(re_pos),
                    off_rows=rows[off], off_cols=cols[off], im_pos=np.array(im_pos))


def component_operators(D: int) -> np.ndarray:
    """Single-atom Hermitian operators behind each packed coordinate, shape (D*D, D, D)."""
    plan = pack_plan(D)
    ops = np.zeros((plan.size, D, D), dtype=complex)
    for k, (a, b) in enumerate(zip(plan.rows, plan.cols)):
        ops[plan.re_pos[k], a, b] += 0.5
        ops[plan.re_pos[k], b, a] += 0.5
    for k, (a, b) in enumerate(zip(plan.off_rows, plan.off_cols)):
        ops[plan.im_pos[k], a, b] += -0.5j
        ops[plan.im_pos[k], b, a] += 0.5j
    return ops


# --- Coupling tensors ---

@dataclass(frozen=True)
class CouplingTensors:
    levels: LevelSet
    chi0: float
    pi_plus: dict[float, float]
    sigma_plus: dict[tuple[float, int], complex]
    zeeman: np.ndarray
    channels: tuple[np.ndarray, ...]

    @property
    def is_decoupled(self) -> bool:
        return self.chi0 == 0 and not np.any(self.zeeman)


def coupling_tensors(F: float, chi: float, delta_g: float, delta_e: float,
                     model: str = "full_multilevel") -> CouplingTensors:
    """Jump-operator coefficients c_k with O_k^+ = sum c_k[a,b] S_ab and H = chi0 sum_k O_k^+ O_k^-."""
    levels = level_set(F, model)
    D = levels.D
    chi0 = chi * (F + 1) / F
    ms = [-F, F] if model == "four_level" else zeeman_levels(F)

    pi_plus = {m: clebsch_gordan(F, m, 0) for m in ms}
    pi = np.zeros((D, D), dtype=complex)
    for m, c in pi_plus.items():
        pi[levels.index(EXCITED, m), levels.index(GROUND, m)] = c
    channels = [pi]

    sigma_plus = {}
    if model == "full_multilevel":
        sigma = np.zeros((D, D), dtype=complex)
        for m in ms:
            for q in (-1, 1):
                if abs(m + q) <= F:
                    c = 1j * clebsch_gordan(F, m, q) / math.sqrt(2)
                    sigma_plus[(m, q)] = c
                    sigma[levels.index(EXCITED, m + q), levels.index(GROUND, m)] = c
        channels.append(sigma)

    zeeman = np.array([m * (delta_g if manifold == GROUND else delta_e)
                       for manifold, m in levels.levels])
    return CouplingTensors(levels=levels, chi0=chi0, pi_plus=pi_plus, sigma_plus=sigma_plus,
                           zeeman=zeeman, channels=tuple(channels))


# --- Initial product-state moments ---

@dataclass(frozen=True)
class InitialMoments:
    levels: LevelSet
    populations: dict[int, int]
    mean: np.ndarray
    covariance: np.ndarray
    eig_values: np.ndarray
    eig_vectors: np.ndarray

    @property
    def N(self) -> int:
        return sum(self.populations.values())

    def packed_mean(self) -> np.ndarray:
        return pack_plan(self.levels.D).pack(self.mean)


def pump_populations(N: int, imbalance: tuple[int, int] = (0, 0)) -> tuple[int, int]:
    d_tot, d_ab = imbalance
    twice_gA = N + d_tot + d_ab
    twice_eB = N + d_tot - d_ab
    if twice_gA % 2 or twice_eB % 2:
        raise DomainError(f"imbalance {imbalance} gives half-integer pump populations")
    if twice_gA < 0 or twice_eB < 0:
        raise DomainError(f"imbalance {imbalance} gives a negative pump population")
    return twice_gA // 2, twice_eB // 2


def psd_repair(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cov = 0.5 * (cov + cov.T)
    w, U = np.linalg.eigh(cov)
    if w.min() < -PSD_TOLERANCE:
        raise DomainError(f"covariance has eigenvalue {w.min():.3e} below -{PSD_TOLERANCE:g}")
    w = np.clip(w, 0.0, None)
    return (U * w) @ U.T, w, U


def product_state_moments(levels: LevelSet, populations: dict[int, int]) -> InitialMoments:
    D = levels.D
    ops = component_operators(D)
    mean = np.zeros((D, D), dtype=complex)
    cov = np.zeros((D * D, D * D))
    for k, n_k in populations.items():
        if n_k == 0:
            continue
        mean[k, k] = n_k
        expect = ops[:, k, k].real
        # symmetrized single-atom second moments in |k>
        second = np.real(ops[:, k, :] @ ops[:, :, k].T)
        cov += n_k * (second - np.outer(expect, expect))
    cov, w, U = psd_repair(cov)
    return InitialMoments(levels=levels, populations=dict(populations), mean=mean,
                          covariance=cov, eig_values=w, eig_vectors=U)


def initial_state_moments(p: PhysicalParams, imbalance: tuple[int, int] = (0, 0),
                          model: str = "full_multilevel") -> InitialMoments:
    levels = level_set(p.F, model)
    n_gA, n_eB = pump_populations(p.N, imbalance)
    return product_state_moments(levels, {levels.gA: n_gA, levels.eB: n_eB})
