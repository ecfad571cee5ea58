"""Exact evolution of the four-level model in the conserved collective sector.

Each ensemble is a maximal collective spin j = N/4. The initial state |m_A = -j, m_B = +j>
has total inversion m_A + m_B = 0, which the Hamiltonian

    H = chi (S_A^+ + S_B^+)(S_A^- + S_B^-) + delta (S_B^z - S_A^z)

conserves. Sector state k has m_A = -j + k and m_B = -m_A, so H is tridiagonal.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.linalg import eigh_tridiagonal, expm
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import expm_multiply

import config
from errors import CutoffError, DomainError, IntegrationError
from models import FockOracleConfig
from engines.upa_analytics import QUADRATURE_MAP

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SectorBasis:
    N: int

    def __post_init__(self):
        if self.N < 2 or self.N % 2:
            raise DomainError("N must be an even integer >= 2")

    @property
    def j(self) -> float:
        return self.N / 4.0

    @property
    def dim(self) -> int:
        return self.N // 2 + 1

    @cached_property
    def m_A(self) -> np.ndarray:
        return -self.j + np.arange(self.dim)

    @property
    def m_B(self) -> np.ndarray:
        return -self.m_A

    def index(self, m_A: float) -> int:
        return int(round(m_A + self.j))


@dataclass(frozen=True)
class CollectiveState:
    basis: SectorBasis
    amplitudes: np.ndarray
    t: float = 0.0

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def initial_collective_state(N: int) -> CollectiveState:
    basis = SectorBasis(N)
    psi = np.zeros(basis.dim, dtype=complex)
    psi[0] = 1.0
    return CollectiveState(basis=basis, amplitudes=psi)


def _ladder(j: float, m: np.ndarray, sign: int) -> np.ndarray:
    return np.sqrt(np.clip(j * (j + 1) - m * (m + sign), 0.0, None))


def _pair_hopping(basis: SectorBasis) -> np.ndarray:
    """<k+1| S_A^+ S_B^- |k> for k = 0 .. dim-2."""
    m_A, m_B = basis.m_A[:-1], basis.m_B[:-1]
    return _ladder(basis.j, m_A, +1) * _ladder(basis.j, m_B, -1)


def sector_bands(N: int, chi: float, delta: float) -> tuple[np.ndarray, np.ndarray]:
    basis = SectorBasis(N)
    j, m_A, m_B = basis.j, basis.m_A, basis.m_B
    diagonal = chi * ((j * (j + 1) - m_A * (m_A - 1)) + (j * (j + 1) - m_B * (m_B - 1))) + delta * (m_B - m_A)
    return diagonal, chi * _pair_hopping(basis)


def build_sector_hamiltonian(N: int, chi: float, delta: float) -> sparse.csr_matrix:
    diagonal, off = sector_bands(N, chi, delta)
    return sparse.diags([off, diagonal, off], [-1, 0, 1], format="csr", dtype=complex)


# --- Evolution ---

class _KrylovFailure(Exception):
    pass


def _lanczos_step(H, v: np.ndarray, dt: float, m: int) -> tuple[np.ndarray, float]:
    """exp(-i H dt) v in an m-dimensional Krylov space, with its a-posteriori error estimate."""
    n = v.shape[0]
    beta0 = np.linalg.norm(v)
    m = min(m, n)
    V = np.zeros((n, m + 1), dtype=complex)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    V[:, 0] = v / beta0
    k_used = m
    for k in range(m):
        w = H @ V[:, k]
        alpha[k] = np.real(np.vdot(V[:, k], w))
        w = w - alpha[k] * V[:, k] - (beta[k - 1] * V[:, k - 1] if k > 0 else 0.0)
        # full reorthogonalization
        w = w - V[:, :k + 1] @ (V[:, :k + 1].conj().T @ w)
        beta[k] = np.linalg.norm(w)
        if beta[k] < 1e-14 * max(1.0, abs(alpha[k])):
            k_used = k + 1
            break
        V[:, k + 1] = w / beta[k]
    T = np.diag(alpha[:k_used]) + np.diag(beta[:k_used - 1], 1) + np.diag(beta[:k_used - 1], -1)
    small = expm(-1j * dt * T)[:, 0]
    error = 0.0 if k_used < m else beta0 * beta[k_used - 1] * abs(small[-1])
    return beta0 * (V[:, :k_used] @ small), error


def _krylov_propagate(H, psi: np.ndarray, duration: float, m: int, tol: float) -> np.ndarray:
    remaining = duration
    step = duration
    halvings = 0
    while abs(remaining) > 0:
        step = math.copysign(min(abs(step), abs(remaining)), duration)
        candidate, error = _lanczos_step(H, psi, step, m)
        if error > tol:
            step /= 2.0
            halvings += 1
            if halvings > 60:
                raise _KrylovFailure(f"step underflow at error {error:.2e}")
            continue
        psi = candidate
        remaining -= step
        step *= 2.0
    return psi


def _ode_propagate(H, psi: np.ndarray, duration: float) -> np.ndarray:
    sol = solve_ivp(lambda _, y: -1j * (H @ y), (0.0, duration), psi, method="DOP853",
                    rtol=1e-11, atol=1e-13)
    if not sol.success:
        raise IntegrationError(f"sector evolution failed: {sol.message}")
    return sol.y[:, -1]


def evolve_collective(state: CollectiveState, t_grid: Sequence[float], chi: float, delta: float,
                      method: str = "krylov") -> list[CollectiveState]:
    """States at the absolute times t_grid, measured from state.t; the grid may run backwards."""
    basis = state.basis
    if method == "diagonalize":
        diagonal, off = sector_bands(basis.N, chi, delta)
        w, V = eigh_tridiagonal(diagonal, off)
        coeffs = V.T @ state.amplitudes
        return [CollectiveState(basis, V @ (np.exp(-1j * w * (t - state.t)) * coeffs), t) for t in t_grid]
    if method not in ("krylov", "adaptive_ode"):
        raise DomainError(f"unknown evolution method '{method}'")

    H = build_sector_hamiltonian(basis.N, chi, delta)
    psi, t_now = state.amplitudes.copy(), state.t
    out = []
    for t in t_grid:
        duration = t - t_now
        if duration != 0:
            if method == "krylov":
                try:
                    psi = _krylov_propagate(H, psi, duration, config.KRYLOV_DIM, config.KRYLOV_TOL)
                except _KrylovFailure as e:
                    message = f"Krylov propagation did not converge ({e}); falling back to adaptive ODE"
                    logger.warning(message)
                    warnings.warn(message, RuntimeWarning)
                    psi = _ode_propagate(H, psi, duration)
            else:
                psi = _ode_propagate(H, psi, duration)
        t_now = t
        out.append(CollectiveState(basis, psi.copy(), t))
    return out


def energy(state: CollectiveState, chi: float, delta: float) -> float:
    H = build_sector_hamiltonian(state.basis.N, chi, delta)
    return float(np.real(np.vdot(state.amplitudes, H @ state.amplitudes)))


# --- Moments ---

@dataclass(frozen=True)
class SectorMoments:
    N: int
    Sz_A: float
    Sz_B: float
    Sz_A_sq: float
    Sz_B_sq: float
    # <S_A^+ S_B^->
    X: complex

    @property
    def j(self) -> float:
        return self.N / 4.0

    @property
    def ladder(self) -> dict[str, complex]:
        jj = self.j * (self.j + 1)
        return {
            "A+A-": jj - self.Sz_A_sq + self.Sz_A,
            "A-A+": jj - self.Sz_A_sq - self.Sz_A,
            "B+B-": jj - self.Sz_B_sq + self.Sz_B,
            "B-B+": jj - self.Sz_B_sq - self.Sz_B,
            "A+B-": self.X,
            "A-B+": np.conj(self.X),
            # total-inversion changing products vanish in the sector
            "A+B+": 0.0, "A-B-": 0.0, "A+A+": 0.0, "B+B+": 0.0,
        }

    @property
    def n_bar(self) -> float:
        return self.Sz_A + self.N / 2.0 - self.Sz_B

    @property
    def _transverse(self) -> float:
        jj = self.j * (self.j + 1)
        return 0.5 * ((jj - self.Sz_A_sq) + (jj - self.Sz_B_sq))

    @property
    def var_S1_minus(self) -> float:
        return self._transverse - float(np.imag(self.X))

    @property
    def var_S2_plus(self) -> float:
        return self._transverse - float(np.imag(self.X))

    @property
    def var_S1_plus(self) -> float:
        return self._transverse + float(np.imag(self.X))

    @property
    def var_S2_minus(self) -> float:
        return self._transverse + float(np.imag(self.X))

    @property
    def var_delta_n(self) -> float:
        # S_A^z + S_B^z is conserved within the sector
        return 0.0

    @property
    def xi2(self) -> float:
        return 4.0 * self.var_S1_minus / self.N

    def spin_covariance(self) -> tuple[np.ndarray, np.ndarray]:
        """Means and symmetrized covariance of (A^x, A^y, A^z, B^x, B^y, B^z)."""
        jj = self.j * (self.j + 1)
        mean = np.array([0.0, 0.0, self.Sz_A, 0.0, 0.0, self.Sz_B])
        cov = np.zeros((6, 6))
        cov[0, 0] = cov[1, 1] = 0.5 * (jj - self.Sz_A_sq)
        cov[3, 3] = cov[4, 4] = 0.5 * (jj - self.Sz_B_sq)
        re_x, im_x = float(np.real(self.X)), float(np.imag(self.X))
        cov[0, 3] = cov[3, 0] = 0.5 * re_x
        cov[1, 4] = cov[4, 1] = 0.5 * re_x
        cov[0, 4] = cov[4, 0] = -0.5 * im_x
        cov[1, 3] = cov[3, 1] = 0.5 * im_x
        var_z = self.Sz_A_sq - self.Sz_A ** 2
        cov[2, 2] = var_z
        cov[5, 5] = self.Sz_B_sq - self.Sz_B ** 2
        cov[2, 5] = cov[5, 2] = -var_z
        return mean, cov


def sector_moments(state: CollectiveState) -> SectorMoments:
    basis = state.basis
    prob = np.abs(state.amplitudes) ** 2
    psi = state.amplitudes
    X = complex(np.sum(np.conj(psi[1:]) * psi[:-1] * _pair_hopping(basis)))
    return SectorMoments(N=basis.N, Sz_A=float(prob @ basis.m_A), Sz_B=float(prob @ basis.m_B),
                         Sz_A_sq=float(prob @ basis.m_A ** 2), Sz_B_sq=float(prob @ basis.m_B ** 2), X=X)


def moment_series(N: int, chi: float, delta: float, t_grid: Sequence[float],
                  method: str = "diagonalize") -> list[SectorMoments]:
    states = evolve_collective(initial_collective_state(N), t_grid, chi, delta, method)
    return [sector_moments(s) for s in states]


def minimum_squeezing(N: int, chi: float, delta: float | None = None, t_max: float | None = None,
                      n_grid: int = 400) -> tuple[float, float]:
    """(t_min, xi2_min) by dense scan on [0, t_max] followed by bounded refinement."""
    delta = N * chi / 2.0 if delta is None else delta
    t_max = 1.5 * math.log(N) / (N * chi) if t_max is None else t_max
    diagonal, off = sector_bands(N, chi, delta)
    w, V = eigh_tridiagonal(diagonal, off)
    state0 = initial_collective_state(N)
    coeffs = V.T @ state0.amplitudes

    def xi2_at(t):
        psi = V @ (np.exp(-1j * w * t) * coeffs)
        return sector_moments(CollectiveState(state0.basis, psi, t)).xi2

    grid = np.linspace(0.0, t_max, n_grid)
    values = np.array([xi2_at(t) for t in grid])
    k = int(np.argmin(values))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    res = minimize_scalar(xi2_at, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10 * t_max})
    if res.fun < values[k]:
        return float(res.x), float(res.fun)
    return float(grid[k]), float(values[k])


# --- Widened product basis, used by Ramsey pulses ---

def spin_matrices(j: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Jx, Jy, Jz) in the basis m = -j .. j."""
    m = -j + np.arange(int(round(2 * j)) + 1)
    raise_ = np.diag(_ladder(j, m[:-1], +1), -1)
    Jx = 0.5 * (raise_ + raise_.T)
    Jy = -0.5j * (raise_ - raise_.T)
    return Jx, Jy, np.diag(m)


@dataclass(frozen=True)
class ProductState:
    """Two-spin amplitudes psi[k_A, k_B] with m = -j + k for each ensemble."""
    j: float
    psi: np.ndarray

    @property
    def m(self) -> np.ndarray:
        return -self.j + np.arange(self.psi.shape[0])

    def rotate(self, n_A: np.ndarray, n_B: np.ndarray, angle: float) -> "ProductState":
        Jx, Jy, Jz = spin_matrices(self.j)
        D_A = expm(-1j * angle * (n_A[0] * Jx + n_A[1] * Jy + n_A[2] * Jz))
        D_B = expm(-1j * angle * (n_B[0] * Jx + n_B[1] * Jy + n_B[2] * Jz))
        return ProductState(self.j, D_A @ self.psi @ D_B.T)

    def spin_covariance(self) -> tuple[np.ndarray, np.ndarray]:
        """Means and symmetrized covariance of (A^x, A^y, A^z, B^x, B^y, B^z)."""
        Jx, Jy, Jz = spin_matrices(self.j)
        ops = [Jx, Jy, Jz]
        psi = self.psi
        acted = [op @ psi for op in ops] + [psi @ op.T for op in ops]
        mean = np.array([np.real(np.vdot(psi, a)) for a in acted])
        cov = np.empty((6, 6))
        for a in range(6):
            for b in range(6):
                if a < 3 and b < 3:
                    second = np.vdot(psi, ops[a] @ acted[b])
                elif a >= 3 and b >= 3:
                    second = np.vdot(psi, acted[b] @ ops[a - 3].T)
                else:
                    second = np.vdot(acted[a], acted[b])
                cov[a, b] = np.real(second) - mean[a] * mean[b]
        return mean, 0.5 * (cov + cov.T)


def widen(state: CollectiveState) -> ProductState:
    basis = state.basis
    psi = np.zeros((basis.dim, basis.dim), dtype=complex)
    k = np.arange(basis.dim)
    psi[k, basis.dim - 1 - k] = state.amplitudes
    return ProductState(basis.j, psi)


# --- Bosonic two-mode oracle ---

@dataclass(frozen=True)
class FockOracleResult:
    times: np.ndarray
    n_bar: np.ndarray
    covariance: np.ndarray
    cutoff_population: float


def fock_tms_oracle(cfg: FockOracleConfig) -> FockOracleResult:
    """Brute-force evolution of coupling (a^dag b^dag + a b) from the two-mode vacuum."""
    n = cfg.n_max + 1
    lower = sparse.diags(np.sqrt(np.arange(1, n)), 1, format="csr")
    eye = sparse.identity(n, format="csr")
    a = sparse.kron(lower, eye, format="csr")
    b = sparse.kron(eye, lower, format="csr")
    pair = a.T @ b.T
    H = cfg.coupling * (pair + pair.T)

    psi0 = np.zeros(n * n, dtype=complex)
    psi0[0] = 1.0
    times = np.linspace(0.0, cfg.duration, cfg.n_times)
    if cfg.duration > 0:
        states = expm_multiply(-1j * H, psi0, start=0.0, stop=cfg.duration, num=cfg.n_times, endpoint=True)
    else:
        states = np.repeat(psi0[None, :], cfg.n_times, axis=0)

    occupation = np.arange(n)
    n_a = np.repeat(occupation, n)
    n_b = np.tile(occupation, n)
    edge = (n_a == cfg.n_max) | (n_b == cfg.n_max)
    sq2 = math.sqrt(2.0)
    quad = [(a + a.T) / sq2, (a - a.T) / (1j * sq2), (b + b.T) / sq2, (b - b.T) / (1j * sq2)]

    n_bar, covs, worst = [], [], 0.0
    for psi in states:
        prob = np.abs(psi) ** 2
        worst = max(worst, float(prob[edge].sum()))
        n_bar.append(float(prob @ (n_a + n_b)))
        acted = [q @ psi for q in quad]
        mean = np.array([np.real(np.vdot(psi, v)) for v in acted])
        cov = np.array([[np.real(np.vdot(acted[i], acted[k])) for k in range(4)] for i in range(4)])
        cov = 0.5 * (cov + cov.T) - np.outer(mean, mean)
        covs.append(QUADRATURE_MAP @ cov @ QUADRATURE_MAP.T)
    if worst > 1e-8:
        raise CutoffError(f"population {worst:.2e} reaches the Fock cutoff n_max={cfg.n_max}; increase n_max")
    return FockOracleResult(times=times, n_bar=np.array(n_bar), covariance=np.array(covs),
                            cutoff_population=worst)
