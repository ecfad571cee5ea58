"""Ramsey sequences on the two joint Bloch spheres.

Every frame operator is a linear form over the six collective spin components
(A^x, A^y, A^z, B^x, B^y, B^z). A pulse exp(-i theta (u_A.S_A + u_B.S_B)) rotates the
expectation vector of each ensemble by theta about its own axis, so moment-based states
transform as mean -> R mean, cov -> R cov R^T and sampled states sample by sample.

Differential sequence: pulse S2+ (pi/2), imprint about S3-, pulse S1+ (pi/2), read S3-.
Sum sequence: pulse S2- (pi/2), imprint about S3+, pulse S1- (pi/2), read S3+.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy.linalg import block_diag
from scipy.spatial.transform import Rotation

import config
from errors import DegenerateProtocolError, DomainError, UnsupportedOperationError
from models import RamseyConfig, TWAConfig
from engines.ed_engine import (ProductState, SectorMoments, evolve_collective, initial_collective_state,
                               sector_moments, widen)
from engines.twa_engine import run_twa
from engines.upa_analytics import (DecoherenceMoments, QuadratureState, SensitivityResult,
                                   decoherence_moments, evolve_quadratures)

logger = logging.getLogger(__name__)

FRAME_FORMS = {
    "S1+": np.array([0.0, 1.0, 0.0, 1.0, 0.0, 0.0]),
    "S2+": np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    "S1-": np.array([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]),
    "S2-": np.array([-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    "S3-": np.array([0.0, 0.0, -1.0, 0.0, 0.0, 1.0]),
    "S3+": np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
}
PULSE_GENERATORS = ("S2+", "S1+", "S2-", "S1-")
IMPRINT_AXES = ("S3-", "S3+")

# (first pulse, imprint axis, second pulse, readout)
PROTOCOLS = {
    "differential": ("S2+", "S3-", "S1+", "S3-"),
    "sum": ("S2-", "S3+", "S1-", "S3+"),
}
_MIRROR = {"differential": "sum", "sum": "differential"}

_TRANSVERSE = [0, 1, 3, 4]


# --- Frame algebra ---

@dataclass(frozen=True)
class SpinQuadratureFrame:
    forms: dict[str, np.ndarray]

    def form(self, name: str) -> np.ndarray:
        try:
            return self.forms[name]
        except KeyError:
            raise DomainError(f"unknown frame operator '{name}'") from None

    @staticmethod
    def commutator(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Coefficients c with [u.S, v.S] = i c.S."""
        return np.concatenate([np.cross(u[:3], v[:3]), np.cross(u[3:], v[3:])])

    def mode_form(self, name: str, pump_A: float, pump_B: float) -> np.ndarray:
        """Image of a transverse form over (x_a, p_a, x_b, p_b) under the pump substitution."""
        w = self.form(name)
        if np.any(w[[2, 5]] != 0):
            raise DomainError(f"'{name}' is not transverse")
        return w[_TRANSVERSE] @ _spin_image(pump_A, pump_B)


FRAME = SpinQuadratureFrame(FRAME_FORMS)


def _spin_image(pump_A: float, pump_B: float) -> np.ndarray:
    """Linear map (x_a, p_a, x_b, p_b) -> (A^x, A^y, B^x, B^y)."""
    c_a, c_b = math.sqrt(pump_A / 2.0), math.sqrt(pump_B / 2.0)
    return np.diag([c_a, -c_a, c_b, c_b])


def rotation_matrix(form: np.ndarray, angle: float) -> np.ndarray:
    """6x6 action of exp(-i angle form.S) on the expectation vector."""
    return block_diag(Rotation.from_rotvec(angle * form[:3]).as_matrix(),
                      Rotation.from_rotvec(angle * form[3:]).as_matrix())


def _cross_matrix(u: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])


def rotation_generator(form: np.ndarray) -> np.ndarray:
    return block_diag(_cross_matrix(form[:3]), _cross_matrix(form[3:]))


# --- Backend states ---

@dataclass(frozen=True)
class SpinMoments:
    """Means and symmetrized covariance of the six spin components."""
    N: int
    mean: np.ndarray
    covariance: np.ndarray

    def rotate(self, R: np.ndarray) -> "SpinMoments":
        cov = R @ self.covariance @ R.T
        return SpinMoments(self.N, R @ self.mean, 0.5 * (cov + cov.T))


@dataclass(frozen=True)
class SpinEnsemble:
    """Sampled classical spin vectors, shape (n_traj, 6)."""
    N: int
    samples: np.ndarray

    def rotate(self, R: np.ndarray) -> "SpinEnsemble":
        return SpinEnsemble(self.N, self.samples @ R.T)


@dataclass(frozen=True)
class WidenedState:
    N: int
    product: ProductState


RamseyState = Union[SpinMoments, SpinEnsemble, WidenedState, QuadratureState]


def _number_moments(V: np.ndarray, mu: np.ndarray, i: slice, k: slice) -> float:
    """Symmetric covariance of the occupations of modes i and k for a Gaussian state."""
    return 0.5 * float(np.sum(V[i, k] ** 2)) + float(mu[i] @ V[i, k] @ mu[k])


def from_quadratures(state: QuadratureState) -> SpinMoments:
    """Spin moments of a Gaussian pair-mode state, with the pumps held undepleted."""
    V, mu = state.mode_covariance(), state.mode_mean()
    T = _spin_image(state.pump_A, state.pump_B)
    a, b = slice(0, 2), slice(2, 4)
    N = int(round(state.pump_A + state.pump_B))

    mean = np.zeros(6)
    mean[_TRANSVERSE] = T @ mu
    mean[2], mean[5] = -state.pump_A / 2.0, state.pump_B / 2.0

    cov = np.zeros((6, 6))
    cov[np.ix_(_TRANSVERSE, _TRANSVERSE)] = T @ V @ T.T
    # S_A^z = n_a - pump_A/2, S_B^z = pump_B/2 - n_b
    cov[2, 2] = _number_moments(V, mu, a, a) - 0.25
    cov[5, 5] = _number_moments(V, mu, b, b) - 0.25
    cov[2, 5] = cov[5, 2] = -_number_moments(V, mu, a, b)
    with_a = T @ (V[:, a] @ mu[a])
    with_b = -T @ (V[:, b] @ mu[b])
    cov[_TRANSVERSE, 2] = cov[2, _TRANSVERSE] = with_a
    cov[_TRANSVERSE, 5] = cov[5, _TRANSVERSE] = with_b
    return SpinMoments(N, mean, cov)


def from_sector_moments(moments: SectorMoments) -> SpinMoments:
    mean, cov = moments.spin_covariance()
    return SpinMoments(moments.N, mean, cov)


# (A^x, A^y, B^x, B^y) in terms of x = (S_A^-, S_B^-, S_A^+, S_B^+)
_LADDER_TO_TRANSVERSE = np.array([
    [0.5, 0.0, 0.5, 0.0],
    [0.5j, 0.0, -0.5j, 0.0],
    [0.0, 0.5, 0.0, 0.5],
    [0.0, 0.5j, 0.0, -0.5j],
])


def from_decoherence_moments(moments: DecoherenceMoments, gamma: float) -> SpinMoments:
    """Spin moments of the moment-equation state.

    Inversion fluctuations follow from Gaussian factorization of the pair occupations
    plus the binomial spread of spontaneous emission out of ensemble B.
    """
    N, C = moments.N, moments.second
    sym = 0.5 * (C + C.T)
    mean = np.zeros(6)
    mean[2], mean[5] = moments.Sz_A, moments.Sz_B
    cov = np.zeros((6, 6))
    cov[np.ix_(_TRANSVERSE, _TRANSVERSE)] = np.real(_LADDER_TO_TRANSVERSE @ sym @ _LADDER_TO_TRANSVERSE.T)

    scale = (N / 2.0) ** 2
    var_a = np.real(C[2, 2] * C[0, 0] + C[2, 0] * C[0, 2]) / scale
    var_b = np.real(C[1, 1] * C[3, 3] + C[1, 3] * C[3, 1]) / scale
    cov_ab = np.real(C[2, 1] * C[0, 3] + C[2, 3] * C[0, 1]) / scale
    p = 1.0 - math.exp(-gamma * moments.t)
    cov[2, 2] = var_a
    cov[5, 5] = var_b + N / 2.0 * p * (1.0 - p)
    cov[2, 5] = cov[5, 2] = -cov_ab
    return SpinMoments(N, mean, cov)


def spin_moments(state: RamseyState) -> SpinMoments:
    if isinstance(state, SpinMoments):
        return state
    if isinstance(state, SpinEnsemble):
        return SpinMoments(state.N, state.samples.mean(axis=0), np.cov(state.samples, rowvar=False))
    if isinstance(state, WidenedState):
        mean, cov = state.product.spin_covariance()
        return SpinMoments(state.N, mean, cov)
    if isinstance(state, QuadratureState):
        return from_quadratures(state)
    raise UnsupportedOperationError(f"no spin moments for {type(state).__name__}")


# --- Operations ---

def _rotate(state: RamseyState, form: np.ndarray, angle: float) -> RamseyState:
    if isinstance(state, WidenedState):
        return WidenedState(state.N, state.product.rotate(form[:3], form[3:], angle))
    return state.rotate(rotation_matrix(form, angle))


def apply_pulse(state: RamseyState, generator: str, angle: float) -> RamseyState:
    if generator not in PULSE_GENERATORS:
        raise UnsupportedOperationError(f"'{generator}' is not a pulse generator")
    if isinstance(state, QuadratureState):
        raise UnsupportedOperationError("pulses leave the pair-mode description; convert to spin moments first")
    return _rotate(state, FRAME.form(generator), angle)


def imprint_phase(state: RamseyState, axis: str, phi: float) -> RamseyState:
    if axis not in IMPRINT_AXES:
        raise UnsupportedOperationError(f"'{axis}' is not an imprint axis")
    form = FRAME.form(axis)
    if isinstance(state, QuadratureState):
        # passive phase rotation of the pair modes
        T = _spin_image(state.pump_A, state.pump_B)
        R = rotation_matrix(form, phi)[np.ix_(_TRANSVERSE, _TRANSVERSE)]
        M = np.linalg.solve(T, R @ T)
        cov = M @ state.mode_covariance() @ M.T
        return QuadratureState.from_modes(M @ state.mode_mean(), 0.5 * (cov + cov.T), state.pump_A, state.pump_B)
    return _rotate(state, form, phi)


def readout(state: RamseyState, protocol: str) -> tuple[float, float]:
    """(signal, noise) of the protocol's inversion readout."""
    w = FRAME.form(PROTOCOLS[protocol][3])
    if isinstance(state, SpinEnsemble):
        values = state.samples @ w
        return float(values.mean()), float(values.var(ddof=1))
    moments = spin_moments(state)
    return float(w @ moments.mean), float(w @ moments.covariance @ w)


def run_sequence(state: RamseyState, protocol: str, phi: float) -> RamseyState:
    first, axis, second, _ = PROTOCOLS[protocol]
    state = apply_pulse(state, first, math.pi / 2.0)
    state = imprint_phase(state, axis, phi)
    return apply_pulse(state, second, math.pi / 2.0)


def _analytic_slope(moments: SpinMoments, protocol: str, phi: float) -> float:
    first, axis, second, read = PROTOCOLS[protocol]
    R1 = rotation_matrix(FRAME.form(first), math.pi / 2.0)
    R2 = rotation_matrix(FRAME.form(second), math.pi / 2.0)
    imprint = FRAME.form(axis)
    dR = rotation_generator(imprint) @ rotation_matrix(imprint, phi)
    return float(FRAME.form(read) @ R2 @ dR @ R1 @ moments.mean)


# --- Squeezing stage per backend ---

def squeeze(cfg: RamseyConfig, widen_ed: Optional[bool] = None) -> RamseyState:
    """State after the pair-production stage of duration cfg.squeeze_time."""
    N, chi, t, delta = cfg.N, cfg.chi, cfg.squeeze_time, cfg.resonant_delta
    if cfg.backend == "gaussian_upa":
        return from_quadratures(evolve_quadratures(QuadratureState.vacuum(N / 2.0), t, N, chi, delta))
    if cfg.backend == "decoherence_moments":
        Gamma, gamma = cfg.decoherence
        return from_decoherence_moments(decoherence_moments(t, N, chi, Gamma, gamma, delta), gamma)
    if cfg.backend == "ed":
        state = evolve_collective(initial_collective_state(N), [t], chi, delta, cfg.ed_method)[-1]
        widen_ed = N <= config.ED_WIDEN_MAX_N if widen_ed is None else widen_ed
        if widen_ed:
            return WidenedState(N, widen(state))
        return from_sector_moments(sector_moments(state))
    if cfg.backend == "twa":
        twa_cfg = cfg.twa or TWAConfig()
        grid = (0.0,) if t == 0 else (0.0, t)
        run = run_twa(N, chi, twa_cfg.model_copy(update={"t_grid": grid}), F=cfg.F, delta=delta)
        return SpinEnsemble(N, run.spins[:, -1, :])
    raise UnsupportedOperationError(f"unknown backend '{cfg.backend}'")


# --- Sensitivity ---

def _sensitivity(squeezed: RamseyState, cfg: RamseyConfig, protocol: str) -> tuple[float, float, float]:
    signal, noise = readout(run_sequence(squeezed, protocol, cfg.phi), protocol)
    if cfg.backend in ("gaussian_upa", "decoherence_moments"):
        slope = _analytic_slope(spin_moments(squeezed), protocol, cfg.phi)
    else:
        h = config.FD_PHASE_STEP
        up, _ = readout(run_sequence(squeezed, protocol, cfg.phi + h), protocol)
        down, _ = readout(run_sequence(squeezed, protocol, cfg.phi - h), protocol)
        slope = (up - down) / (2.0 * h)
    return signal, noise, slope


def run_protocol(cfg: RamseyConfig, widen_ed: Optional[bool] = None) -> SensitivityResult:
    """Squeeze, pulse, imprint, pulse and read; (dphi)^2 = noise / slope^2."""
    squeezed = squeeze(cfg, widen_ed)
    signal, noise, slope = _sensitivity(squeezed, cfg, cfg.protocol)
    if abs(slope) < 1e-12 * cfg.N:
        raise DegenerateProtocolError(f"signal slope {slope:.3g} vanishes for {cfg.protocol} protocol")
    variance = noise / slope ** 2

    flags = []
    if cfg.phi == 0.0:
        _, mirror_noise, mirror_slope = _sensitivity(squeezed, cfg, _MIRROR[cfg.protocol])
        mirror = mirror_noise / mirror_slope ** 2 if mirror_slope else math.inf
        if not math.isclose(mirror, variance, rel_tol=1e-6):
            logger.warning(f"Sum and differential protocols disagree: {variance:.6g} vs {mirror:.6g}")
            flags.append("protocol_asymmetry")
    if variance < 1.0 / cfg.N:
        flags.append("sub_sql")

    snapshot = {"N": cfg.N, "chi": cfg.chi, "t": cfg.squeeze_time, "phi": cfg.phi,
                "backend": cfg.backend, "protocol": cfg.protocol, "model": f"ramsey_{cfg.backend}"}
    if cfg.decoherence is not None:
        snapshot["Gamma"], snapshot["gamma"] = cfg.decoherence
    return SensitivityResult(phi=cfg.phi, variance_phi=variance, signal_slope=slope, noise=noise,
                             components={"signal": signal}, params_snapshot=snapshot, flags=tuple(flags))


def protocol_trace(cfg: RamseyConfig, widen_ed: Optional[bool] = None) -> pd.DataFrame:
    """Means and variances of every frame operator after each stage of the sequence."""
    first, axis, second, _ = PROTOCOLS[cfg.protocol]
    state = squeeze(cfg, widen_ed)
    stages = [("squeezed", state)]
    state = apply_pulse(state, first, math.pi / 2.0)
    stages.append(("pulse_1", state))
    state = imprint_phase(state, axis, cfg.phi)
    stages.append(("imprint", state))
    state = apply_pulse(state, second, math.pi / 2.0)
    stages.append(("pulse_2", state))

    rows = []
    for stage, s in stages:
        moments = spin_moments(s)
        row = {"stage": stage}
        for name, w in FRAME_FORMS.items():
            label = name.replace("+", "_plus").replace("-", "_minus")
            row[f"{label}_mean"] = float(w @ moments.mean)
            row[f"{label}_var"] = float(w @ moments.covariance @ w)
        rows.append(row)
    return pd.DataFrame(rows)
