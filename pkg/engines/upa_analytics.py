"""Closed-form results under the undepleted-pump approximation (UPA).

Mode conventions: a annihilates a pair particle in |e,A>, b in |g,B>, with the pumps
|g,A>, |e,B> replaced by c-numbers. Mode quadratures are r = (x_a, p_a, x_b, p_b) with
x = (c + c^dag)/sqrt(2), p = (c - c^dag)/(i sqrt(2)), and the two-mode quadratures are

    X+ = (x_b - p_a)/sqrt(2)    Y+ = (x_a + p_b)/sqrt(2)
    X- = (x_b + p_a)/sqrt(2)    Y- = (p_b - x_a)/sqrt(2)

so that S_{1,-} ~ sqrt(N/2) X- and S_{2,+} ~ sqrt(N/2) Y+.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import constants
from scipy.integrate import quad_vec, solve_ivp
from scipy.linalg import expm
from scipy.optimize import bisect, minimize_scalar

from errors import DomainError, IntegrationError

logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-6
# largest argument passed to math.exp
MAX_EXPONENT = 700.0
_SQRT2 = math.sqrt(2.0)

# Rows map r = (x_a, p_a, x_b, p_b) to (X+, Y+, X-, Y-)
QUADRATURE_MAP = np.array([
    [0.0, -1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0, 0.0],
    [-1.0, 0.0, 0.0, 1.0],
]) / _SQRT2


@dataclass(frozen=True)
class SensitivityResult:
    phi: float
    variance_phi: float
    signal_slope: float
    noise: float
    components: dict[str, float] = field(default_factory=dict)
    params_snapshot: dict[str, float | str] = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    @property
    def sub_sql(self) -> bool:
        N = self.params_snapshot.get("N")
        return N is not None and self.variance_phi < 1.0 / float(N)


def _result(phi: float, variance: float, slope: float, components: dict, params: dict,
            flags: list[str]) -> SensitivityResult:
    noise = variance * slope ** 2 if math.isfinite(variance) else math.inf
    return SensitivityResult(phi=phi, variance_phi=variance, signal_slope=slope, noise=noise,
                             components=components, params_snapshot=params, flags=tuple(flags))


# --- Pair growth and squeezing ---

def _sinhc2(x2):
    """sinh(sqrt(x2))^2 / x2, continued to sin^2/|x2| for x2 < 0."""
    x2 = np.asarray(x2, dtype=float)
    out = np.empty_like(x2)
    small = np.abs(x2) < SERIES_THRESHOLD
    pos = (x2 > 0) & ~small
    neg = (x2 < 0) & ~small
    out[small] = 1.0 + x2[small] / 3.0 + 2.0 * x2[small] ** 2 / 45.0
    out[pos] = np.sinh(np.sqrt(x2[pos])) ** 2 / x2[pos]
    out[neg] = np.sin(np.sqrt(-x2[neg])) ** 2 / (-x2[neg])
    return out


def pair_regime(N: int, chi: float, delta: float) -> str:
    s = delta * (N * chi - delta)
    if s > 0:
        return "amplifying"
    if s < 0:
        return "non_amplifying"
    return "critical"


def pair_occupation_general(t, N: int, chi: float, delta: float):
    """Occupation per pair mode for arbitrary Zeeman splitting delta.

    Outside 0 < delta < N chi the growth is oscillatory (regime 'non_amplifying').
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("t must be non-negative")
    s = delta * (N * chi - delta)
    n = (N * chi * t_arr) ** 2 / 4.0 * _sinhc2(s * t_arr ** 2)
    return float(n) if n.ndim == 0 else n


def entangled_pair_number(t, N: int, chi: float):
    n = 2.0 * np.sinh(N * chi * np.asarray(t, dtype=float) / 2.0) ** 2
    return float(n) if n.ndim == 0 else n


def time_for_pair_number(n_bar: float, N: int, chi: float) -> float:
    if n_bar < 0:
        raise DomainError("n_bar must be non-negative")
    return 2.0 / (N * chi) * math.asinh(math.sqrt(n_bar / 2.0))


def xi2_from_pair_number(n_bar):
    n = np.asarray(n_bar, dtype=float)
    xi2 = 1.0 / (n + 1.0 + np.sqrt(n * (n + 2.0)))
    return float(xi2) if xi2.ndim == 0 else xi2


def squeezing_xi2(t, N: int, chi: float):
    xi2 = np.exp(-N * chi * np.asarray(t, dtype=float))
    return float(xi2) if xi2.ndim == 0 else xi2


# --- Bogoliubov evolution of the pair modes ---

@dataclass(frozen=True)
class QuadratureState:
    mean: np.ndarray
    covariance: np.ndarray
    pump_A: float
    pump_B: float

    @classmethod
    def vacuum(cls, pump_A: float, pump_B: Optional[float] = None) -> "QuadratureState":
        return cls(mean=np.zeros(4), covariance=np.eye(4) / 2.0,
                   pump_A=float(pump_A), pump_B=float(pump_A if pump_B is None else pump_B))

    def mode_covariance(self) -> np.ndarray:
        return QUADRATURE_MAP.T @ self.covariance @ QUADRATURE_MAP

    def mode_mean(self) -> np.ndarray:
        return QUADRATURE_MAP.T @ self.mean

    @classmethod
    def from_modes(cls, mean: np.ndarray, covariance: np.ndarray, pump_A: float,
                   pump_B: float) -> "QuadratureState":
        return cls(mean=QUADRATURE_MAP @ mean, covariance=QUADRATURE_MAP @ covariance @ QUADRATURE_MAP.T,
                   pump_A=pump_A, pump_B=pump_B)


def pair_generator(pump_A, pump_B, chi: float, delta: float):
    """Entries (g11, g12, g21, g22) of i d/dt (a, b^dag) = G (a, b^dag)."""
    pump_A = np.asarray(pump_A, dtype=float)
    pump_B = np.asarray(pump_B, dtype=float)
    cross = np.sqrt(pump_A * pump_B) * chi
    return pump_A * chi - delta, cross, -cross, -pump_B * chi + delta


def mode_drift(pump_A: float, pump_B: float, chi: float, delta: float) -> np.ndarray:
    """Real 4x4 drift of r = (x_a, p_a, x_b, p_b), dr/dt = A r."""
    g11, g12, g21, g22 = (float(g) for g in pair_generator(pump_A, pump_B, chi, delta))
    return np.array([
        [0.0, g11, 0.0, -g12],
        [-g11, 0.0, -g12, 0.0],
        [0.0, g21, 0.0, -g22],
        [g21, 0.0, g22, 0.0],
    ])


def bogoliubov_map(pump_A, pump_B, chi: float, delta: float, t: float) -> np.ndarray:
    """Symplectic map R(t) on r, vectorized over pump arrays; shape (..., 4, 4)."""
    g11, g12, g21, g22 = pair_generator(pump_A, pump_B, chi, delta)
    tr = g11 + g22
    s = ((g11 - g22) / 2.0) ** 2 + g12 * g21
    x = s * t * t
    small = np.abs(x) < SERIES_THRESHOLD
    root = np.sqrt(np.abs(s))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(s >= 0, np.cos(root * t), np.cosh(root * t))
        f = np.where(s >= 0, np.sin(root * t), np.sinh(root * t)) / np.where(root > 0, root, 1.0)
    c = np.where(small, 1.0 - x / 2.0 + x * x / 24.0, c)
    f = np.where(small, t * (1.0 - x / 6.0 + x * x / 120.0), f)

    half = (g11 - g22) / 2.0
    phase = np.exp(-0.5j * tr * t)
    # U = phase [c I - i f (G - tr/2 I)]
    U = np.empty(np.shape(c) + (2, 2), dtype=complex)
    U[..., 0, 0] = phase * (c - 1j * f * half)
    U[..., 0, 1] = phase * (-1j * f * g12)
    U[..., 1, 0] = phase * (-1j * f * g21)
    U[..., 1, 1] = phase * (c + 1j * f * half)

    P = np.array([[1.0, 1j, 0.0, 0.0], [0.0, 0.0, 1.0, -1j]]) / _SQRT2
    Z = U @ P
    R = np.empty(np.shape(c) + (4, 4))
    R[..., 0, :] = _SQRT2 * Z[..., 0, :].real
    R[..., 1, :] = _SQRT2 * Z[..., 0, :].imag
    R[..., 2, :] = _SQRT2 * Z[..., 1, :].real
    R[..., 3, :] = -_SQRT2 * Z[..., 1, :].imag
    return R


def evolve_quadratures(state: QuadratureState, t: float, N: int, chi: float,
                       delta: Optional[float] = None) -> QuadratureState:
    if t < 0:
        raise DomainError("t must be non-negative")
    delta = N * chi / 2.0 if delta is None else delta
    R = bogoliubov_map(state.pump_A, state.pump_B, chi, delta, t)
    mean = R @ state.mode_mean()
    cov = R @ state.mode_covariance() @ R.T
    return QuadratureState.from_modes(mean, 0.5 * (cov + cov.T), state.pump_A, state.pump_B)


# --- Sensitivities ---

def _phase_term(phi: float, n_bar: float, N: int) -> tuple[float, list[str]]:
    if math.cos(phi) ** 2 < 1e-24:
        return math.inf, ["infinite_variance"]
    return n_bar * (n_bar + 2.0) * math.tan(phi) ** 2 / (4.0 * N ** 2), []


def sensitivity_ideal(phi: float, n_bar: float, N: int) -> SensitivityResult:
    if n_bar < 0:
        raise DomainError("n_bar must be non-negative")
    squeezed = xi2_from_pair_number(n_bar) / N
    phase, flags = _phase_term(phi, n_bar, N)
    variance = squeezed + phase
    if variance < 1.0 / N:
        flags.append("sub_sql")
    return _result(phi, variance, N / 2.0 * math.cos(phi), {"ideal": squeezed, "phase": phase},
                   {"N": N, "n_bar": n_bar, "model": "ideal"}, flags)


def sensitivity_beyond_upa(phi: float, n_bar: float, N: int) -> SensitivityResult:
    flags = []
    if n_bar < 1.0 or n_bar > N / 10.0:
        flags.append("outside_validity")
    squeezing = 1.0 / (2.0 * N * n_bar) if n_bar > 0 else math.inf
    depletion = n_bar ** 3 / (2.0 * N ** 3)
    phase, phase_flags = _phase_term(phi, n_bar, N)
    flags.extend(phase_flags)
    variance = squeezing + depletion + phase
    if variance < 1.0 / N:
        flags.append("sub_sql")
    return _result(phi, variance, N / 2.0 * math.cos(phi),
                   {"squeezing": squeezing, "depletion": depletion, "phase": phase},
                   {"N": N, "n_bar": n_bar, "model": "beyond_upa"}, flags)


def beyond_upa_optimum(N: int) -> tuple[float, float]:
    return math.sqrt(N) / 3.0 ** 0.25, 2.0 / (3.0 ** 0.75 * N ** 1.5)


def _grown(x: float, weight: float) -> float:
    """weight * e^x in log space; inf once it leaves the float range."""
    if weight == 0.0:
        return 0.0
    exponent = x + math.log(weight)
    return math.inf if exponent > MAX_EXPONENT else math.exp(exponent)


def _overflow_flags(terms: dict[str, float]) -> list[str]:
    return ["overflow"] if any(math.isinf(v) for v in terms.values()) else []


def _decoherence_terms(t: float, N: int, chi: float, Gamma: float, gamma: float) -> dict[str, float]:
    x = N * chi * t
    return {
        "ideal": math.exp(-x) / N,
        "superradiance": Gamma / (2.0 * N * chi),
        "emission": gamma / (N ** 2 * chi),
        "emission_antisqueezing": _grown(x, (gamma / (2.0 * N * chi) - gamma * t / 2.0) ** 2 / N),
        "mixed_antisqueezing": _grown(x, (Gamma / (4.0 * chi) + gamma / (2.0 * N * chi) - gamma * t / 2.0) ** 2 / N),
    }


def _first_order_flags(N: int, chi: float, Gamma: float, gamma: float) -> list[str]:
    if Gamma / chi > 0.5 or gamma / (N * chi) > 0.5:
        return ["first_order_invalid"]
    return []


def sensitivity_with_decoherence(t: float, N: int, chi: float, Gamma: float,
                                 gamma: float) -> SensitivityResult:
    terms = _decoherence_terms(t, N, chi, Gamma, gamma)
    variance = sum(terms.values())
    flags = _first_order_flags(N, chi, Gamma, gamma) + _overflow_flags(terms)
    if variance < 1.0 / N:
        flags.append("sub_sql")
    return _result(0.0, variance, N / 2.0 * math.exp(-gamma * t), terms,
                   {"N": N, "chi": chi, "Gamma": Gamma, "gamma": gamma, "t": t,
                    "model": "decoherence"}, flags)


@dataclass(frozen=True)
class OptimalTime:
    t_opt: float
    method: str
    t_approx: float
    approx_relative_error: float
    residual: float


def optimal_time(N: int, chi: float, Gamma: float, gamma: float) -> OptimalTime:
    """Stationary point of sensitivity_with_decoherence in t.

    In tau = gamma t the condition reads tau = beta + sqrt(2 exp(-2 tau/eps) + eps^2 - beta^2)
    with beta = Gamma/(4 chi), eps = gamma/(N chi); the left minus right side is increasing
    wherever the root argument is non-negative.
    """
    if gamma <= 0 or Gamma < 0 or chi <= 0:
        raise DomainError("optimal_time needs gamma > 0, Gamma >= 0 and chi > 0")
    beta = Gamma / (4.0 * chi)
    eps = gamma / (N * chi)
    gap = beta ** 2 - eps ** 2

    def disc(tau):
        return 2.0 * math.exp(-2.0 * tau / eps) + eps ** 2 - beta ** 2

    def f(tau):
        return tau - beta - math.sqrt(max(disc(tau), 0.0))

    upper = beta + _SQRT2 + eps
    if gap > 0 and gap < 2.0:
        upper = min(upper, -0.5 * eps * math.log(gap / 2.0))

    t_approx = (beta + _SQRT2 * math.exp(-N * Gamma / (4.0 * gamma))) / gamma
    if gap < 2.0 and f(upper) >= 0:
        tau = bisect(f, 0.0, upper, xtol=1e-300, rtol=1e-12, maxiter=2000)
        method = "implicit"
        residual = f(tau)
    else:
        logger.warning("implicit optimal-time equation has no root on the bracket; minimizing directly")
        # exp(N chi t) must stay representable
        tau_max = min(beta + _SQRT2 + eps, 600.0 * eps)
        res = minimize_scalar(lambda tau: sensitivity_with_decoherence(tau / gamma, N, chi, Gamma, gamma).variance_phi,
                              bounds=(0.0, tau_max), method="bounded",
                              options={"xatol": 1e-12})
        tau = float(res.x)
        method = "minimized"
        residual = math.nan
    t_opt = tau / gamma
    return OptimalTime(t_opt=t_opt, method=method, t_approx=t_approx,
                       approx_relative_error=abs(t_approx - t_opt) / t_opt if t_opt > 0 else math.inf,
                       residual=residual)


def sensitivity_at_approximate_optimum(N: int, chi: float, Gamma: float, gamma: float) -> SensitivityResult:
    """Closed-form sensitivity with t set by the approximate optimal-time formula."""
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    a = N * Gamma / (4.0 * gamma)
    decay = math.exp(-a)
    shift = _SQRT2 * N * chi / gamma * decay
    eps = gamma / (N * chi)
    flags = _first_order_flags(N, chi, Gamma, gamma)
    if a + shift > MAX_EXPONENT:
        # the approximate time only applies once N Gamma / (4 gamma) is large
        scaled = math.inf
        flags.append("outside_validity")
    else:
        scaled = (math.exp(-a - shift) + Gamma / (2.0 * chi) + eps
                  + math.exp(a + shift) * (eps ** 2 + decay ** 2 - _SQRT2 * eps * decay))
    t = (Gamma / (4.0 * chi) + _SQRT2 * decay) / gamma
    return _result(0.0, scaled / N, N / 2.0 * math.exp(-gamma * t), {"scaled": scaled},
                   {"N": N, "chi": chi, "Gamma": Gamma, "gamma": gamma, "t": t,
                    "model": "approximate_optimum"}, flags)


@dataclass(frozen=True)
class OptimalDetuning:
    delta_opt: float
    # the alternative closed form, sqrt(2) times wider
    delta_opt_wide: float
    variance_min: float
    scaled_variance: float


def optimal_detuning_and_best_sensitivity(N: int, C: float, kappa: float) -> OptimalDetuning:
    NC = N * C
    if NC <= 1:
        raise DomainError(f"N*C={NC} must exceed 1")
    log_term = math.log(2.0 * NC)
    return OptimalDetuning(
        delta_opt=kappa * math.sqrt(NC) / (2.0 * math.sqrt(log_term)),
        delta_opt_wide=kappa * math.sqrt(NC / (2.0 * log_term)),
        variance_min=math.sqrt(2.0 * log_term) / (N ** 1.5 * math.sqrt(C)),
        scaled_variance=math.sqrt(2.0 * log_term / NC),
    )


@dataclass(frozen=True)
class DecoherenceOptimum:
    delta: float
    detuning_ratio: float
    t_opt: float
    variance_min: float
    backend: str


def rates_for_detuning(delta: float, g_F: float, kappa: float) -> tuple[float, float]:
    """(chi, Gamma) for cavity detuning delta."""
    return g_F ** 2 / abs(delta), g_F ** 2 * kappa / delta ** 2


def best_over_time(N: int, chi: float, Gamma: float, gamma: float, backend: str = "closed_form") -> tuple[float, float]:
    """(t_opt, variance) minimizing over squeezing time for one set of rates."""
    guess = optimal_time(N, chi, Gamma, gamma).t_opt
    if backend == "closed_form":
        return guess, sensitivity_with_decoherence(guess, N, chi, Gamma, gamma).variance_phi
    if backend != "moments":
        raise DomainError(f"unknown decoherence backend '{backend}'")
    u0 = N * chi * guess
    res = minimize_scalar(
        lambda u: decoherence_sensitivity(u / (N * chi), N, chi, Gamma, gamma).variance_phi,
        bounds=(0.5 * u0, 1.5 * u0 + 1.0), method="bounded", options={"xatol": 1e-4})
    return float(res.x) / (N * chi), float(res.fun)


def optimize_decoherence_sensitivity(N: int, C: float, kappa: float = 1.0, g_F: float = 1.0,
                                     backend: str = "closed_form") -> DecoherenceOptimum:
    """Minimize the decoherence-limited phase variance jointly over t and cavity detuning."""
    gamma = 4.0 * g_F ** 2 / (kappa * C)
    guess = optimal_detuning_and_best_sensitivity(N, C, kappa).delta_opt

    def objective(log_delta):
        chi, Gamma = rates_for_detuning(math.exp(log_delta), g_F, kappa)
        return best_over_time(N, chi, Gamma, gamma, backend)[1]

    res = minimize_scalar(objective, bounds=(math.log(guess / 20.0), math.log(guess * 20.0)),
                          method="bounded", options={"xatol": 1e-4})
    delta = math.exp(float(res.x))
    chi, Gamma = rates_for_detuning(delta, g_F, kappa)
    t_opt, variance = best_over_time(N, chi, Gamma, gamma, backend)
    return DecoherenceOptimum(delta=delta, detuning_ratio=delta / (math.sqrt(N) * kappa),
                              t_opt=t_opt, variance_min=variance, backend=backend)


# --- Pump-number fluctuations ---

def sensitivity_with_pump_fluctuations(t: float, N: int, chi: float, sigma_tot: float,
                                       sigma_AB: float) -> SensitivityResult:
    x = N * chi * t
    ideal = math.exp(-x) / N
    pump = _grown(x, (sigma_tot ** 2 + sigma_AB ** 2) / (4.0 * N ** 3))
    flags = ["outside_validity"] if max(sigma_tot, sigma_AB) > 0.1 * N else []
    flags += _overflow_flags({"pump_fluctuation": pump})
    return _result(0.0, ideal + pump, N / 2.0, {"ideal": ideal, "pump_fluctuation": pump},
                   {"N": N, "chi": chi, "t": t, "sigma_tot": sigma_tot, "sigma_AB": sigma_AB,
                    "model": "pump_fluctuation"}, flags)


@dataclass(frozen=True)
class MonteCarloEstimate:
    variance_phi: float
    standard_error: float
    n_samples: int


def pump_fluctuation_monte_carlo(t: float, N: int, chi: float, sigma_tot: float, sigma_AB: float,
                                 n_samples: int = 10000, seed: int = 0) -> MonteCarloEstimate:
    """Average the UPA squeezed variance over Gaussian pump imbalances at fixed delta = N chi/2."""
    rng = np.random.default_rng(seed)
    d_tot = rng.normal(0.0, sigma_tot, n_samples)
    d_ab = rng.normal(0.0, sigma_AB, n_samples)
    pump_A = (N + d_tot + d_ab) / 2.0
    pump_B = (N + d_tot - d_ab) / 2.0
    if np.any(pump_A <= 0) or np.any(pump_B <= 0):
        raise DomainError("sampled pump population is not positive; sigma too large for N")
    R = bogoliubov_map(pump_A, pump_B, chi, N * chi / 2.0, t)
    # S_{1,-} = sqrt(N_eB/2) x_b + sqrt(N_gA/2) p_a
    w = np.zeros((n_samples, 4))
    w[:, 1] = np.sqrt(pump_A / 2.0)
    w[:, 2] = np.sqrt(pump_B / 2.0)
    projected = np.einsum("si,sij->sj", w, R)
    var = 0.5 * np.sum(projected ** 2, axis=1) / (N / 2.0) ** 2
    return MonteCarloEstimate(variance_phi=float(var.mean()),
                              standard_error=float(var.std(ddof=1) / math.sqrt(n_samples)),
                              n_samples=n_samples)


# --- Decoherence moment equations ---

@dataclass(frozen=True)
class DecoherenceMoments:
    """Second moments C_ij = <x_i x_j> of x = (S_A^-, S_B^-, S_A^+, S_B^+) with zero means."""
    t: float
    N: int
    second: np.ndarray
    Sz_A: float
    Sz_B: float

    def variance(self, w: np.ndarray) -> float:
        return float(np.real(w @ self.second @ w))


READOUT_S2_PLUS = np.array([0.5, 0.5j, 0.5, -0.5j])


def _inversions(t: float, N: int, gamma: float) -> tuple[float, float]:
    return -N / 4.0, N / 4.0 * (2.0 * math.exp(-gamma * t) - 1.0)


def _lowering_drift(t: float, N: int, chi: float, Gamma: float, gamma: float, delta: float) -> np.ndarray:
    Z_A, Z_B = _inversions(t, N, gamma)
    coupling = (Gamma + 2j * chi) * np.array([[Z_A, Z_A], [Z_B, Z_B]])
    return np.diag([-gamma / 2.0 + 1j * delta, -gamma / 2.0 - 1j * delta]) + coupling


def _full_drift(M: np.ndarray) -> np.ndarray:
    big = np.zeros((4, 4), dtype=complex)
    big[:2, :2] = M
    big[2:, 2:] = np.conj(M)
    return big


def _diffusion(t: float, N: int, Gamma: float, gamma: float) -> np.ndarray:
    Z = _inversions(t, N, gamma)
    D = np.zeros((4, 4), dtype=complex)
    for a in range(2):
        for b in range(2):
            D[a, 2 + b] = 4.0 * Gamma * Z[a] * Z[b] + (gamma * N / 2.0 if a == b else 0.0)
    return D


def _initial_second_moments(N: int) -> np.ndarray:
    C = np.zeros((4, 4), dtype=complex)
    C[0, 2] = N / 2.0  # <S_A^- S_A^+> with A in the ground state
    C[3, 1] = N / 2.0  # <S_B^+ S_B^-> with B in the excited state
    return C


def decoherence_moments(t: float, N: int, chi: float, Gamma: float, gamma: float,
                        delta: Optional[float] = None, method: str = "ode") -> DecoherenceMoments:
    """Moment equations with collective decay Gamma and single-atom emission gamma.

    method 'ode' integrates dC/dt = M C + C M^T + D directly; 'first_order' uses the
    interaction-picture propagator to first order in the rates.
    """
    if t < 0:
        raise DomainError("t must be non-negative")
    delta = N * chi / 2.0 if delta is None else delta
    C0 = _initial_second_moments(N)
    Z_A, Z_B = _inversions(t, N, gamma)
    if t == 0:
        return DecoherenceMoments(t=0.0, N=N, second=C0, Sz_A=Z_A, Sz_B=Z_B)

    if method == "ode":
        def rhs(s, y):
            C = y.reshape(4, 4)
            M = _full_drift(_lowering_drift(s, N, chi, Gamma, gamma, delta))
            return (M @ C + C @ M.T + _diffusion(s, N, Gamma, gamma)).ravel()

        sol = solve_ivp(rhs, (0.0, t), C0.ravel(), method="DOP853", rtol=1e-10, atol=1e-12 * N)
        if not sol.success:
            raise IntegrationError(f"moment integration failed: {sol.message}")
        C = sol.y[:, -1].reshape(4, 4)
    elif method == "first_order":
        C = _first_order_moments(t, N, chi, Gamma, gamma, delta, C0)
    else:
        raise DomainError(f"unknown method '{method}'")
    return DecoherenceMoments(t=t, N=N, second=C, Sz_A=Z_A, Sz_B=Z_B)


def _first_order_moments(t, N, chi, Gamma, gamma, delta, C0):
    M0 = _full_drift(_lowering_drift(0.0, N, chi, 0.0, 0.0, delta))

    def perturbation(s):
        return _full_drift(_lowering_drift(s, N, chi, Gamma, gamma, delta)) - M0

    def propagator_integrand(s):
        return expm(M0 * (t - s)) @ perturbation(s) @ expm(M0 * s)

    def diffusion_integrand(s):
        P = expm(M0 * (t - s))
        return P @ _diffusion(s, N, Gamma, gamma) @ P.T

    Phi = expm(M0 * t) + quad_vec(propagator_integrand, 0.0, t, epsrel=1e-10)[0]
    noise = quad_vec(diffusion_integrand, 0.0, t, epsrel=1e-10)[0]
    return Phi @ C0 @ Phi.T + noise


def decoherence_sensitivity(t: float, N: int, chi: float, Gamma: float, gamma: float,
                            method: str = "ode") -> SensitivityResult:
    """Phase variance at phi = 0 from the moment equations, readout S_{2,+}."""
    moments = decoherence_moments(t, N, chi, Gamma, gamma, method=method)
    noise = moments.variance(READOUT_S2_PLUS)
    slope = moments.Sz_B - moments.Sz_A
    variance = noise / slope ** 2
    flags = _first_order_flags(N, chi, Gamma, gamma)
    return SensitivityResult(phi=0.0, variance_phi=variance, signal_slope=slope, noise=noise,
                             components={"moments": variance},
                             params_snapshot={"N": N, "chi": chi, "Gamma": Gamma, "gamma": gamma,
                                              "t": t, "model": f"moments_{method}"},
                             flags=tuple(flags))


# --- Spin-1 BEC parameter mapping ---

@dataclass(frozen=True)
class BECMapping:
    U_s: float
    q: float
    N: int
    equivalent_chi: float
    equivalent_delta: float

    @property
    def is_resonant(self) -> bool:
        return math.isclose(self.q, -self.U_s, rel_tol=1e-12, abs_tol=0.0)


def bec_mapping(U_s: float, q: float, N: int, hbar: float = constants.hbar) -> BECMapping:
    return BECMapping(U_s=U_s, q=q, N=N, equivalent_chi=2.0 * U_s / (N * hbar),
                      equivalent_delta=q / hbar)


def bec_inverse(chi: float, delta: float, N: int, hbar: float = constants.hbar) -> BECMapping:
    return BECMapping(U_s=N * hbar * chi / 2.0, q=hbar * delta, N=N, equivalent_chi=chi,
                      equivalent_delta=delta)
