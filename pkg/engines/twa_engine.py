"""Truncated-Wigner simulation of the multilevel cavity spin model.

Each trajectory carries the classical collective variables S_ab over the internal levels.
With O_k^+ = sum_ab c_k[a,b] S_ab the Weyl symbol of the Hamiltonian is

    H(S) = Tr(h^T S) + chi0 sum_k |O_k^+|^2,   h = Zeeman + chi0/2 sum_k (c_k c_k^dag - c_k^dag c_k)

and the symmetric decoupling of the Heisenberg equations gives dS/dt = -i [S, W] with
W = h^T + chi0 sum_k (O_k^- c_k^T + O_k^+ c_k^*). Only the a <= b triangle is integrated.
"""
import concurrent.futures as cf
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

import config
from errors import DomainError, IntegrationError
from models import TWAConfig
from engines.model import (CouplingTensors, InitialMoments, LevelSet, coupling_tensors, pack_plan,
                           product_state_moments, pump_populations, level_set, symmetric_zeeman_split)

logger = logging.getLogger(__name__)

# Rows of (A^x, A^y, A^z, B^x, B^y, B^z)
SPIN_LABELS = ("A_x", "A_y", "A_z", "B_x", "B_y", "B_z")


@dataclass(frozen=True)
class TWAModel:
    tensors: CouplingTensors
    N: int
    h_lin: np.ndarray

    @property
    def levels(self) -> LevelSet:
        return self.tensors.levels

    @property
    def chi0(self) -> float:
        return self.tensors.chi0


def build_twa_model(N: int, chi: float, delta: Optional[float] = None, F: float = 4.5,
                    model: str = "full_multilevel", delta_g: Optional[float] = None,
                    delta_e: Optional[float] = None) -> TWAModel:
    """Zeeman shifts default to the resonant delta = N chi/2 split as delta_e = -delta_g."""
    if delta_g is None or delta_e is None:
        delta = N * chi / 2.0 if delta is None else delta
        delta_g, delta_e = symmetric_zeeman_split(delta, F)
    tensors = coupling_tensors(F, chi, delta_g, delta_e, model)
    h = np.diag(tensors.zeeman).astype(complex)
    for c in tensors.channels:
        h += 0.5 * tensors.chi0 * (c @ c.conj().T - c.conj().T @ c)
    return TWAModel(tensors=tensors, N=N, h_lin=h)


@dataclass(frozen=True)
class TWATrajectory:
    svars: np.ndarray
    time: float


@dataclass(frozen=True)
class TWAEnsemble:
    levels: LevelSet
    N: int
    samples: np.ndarray
    seed: int

    @property
    def n_traj(self) -> int:
        return self.samples.shape[0]

    def trajectory(self, index: int) -> TWATrajectory:
        return TWATrajectory(pack_plan(self.levels.D).unpack(self.samples[index]), 0.0)


# --- Sampling ---

def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_initial_ensemble(moments: InitialMoments, cfg: TWAConfig) -> TWAEnsemble:
    if np.any(moments.eig_values < 0):
        raise DomainError("initial covariance is not positive semidefinite")
    size = moments.levels.D ** 2
    mean = moments.packed_mean()
    factor = moments.eig_vectors * np.sqrt(moments.eig_values)
    z = np.stack([trajectory_rng(cfg.seed, i).standard_normal(size) for i in range(cfg.n_traj)])
    samples = mean + z @ factor.T
    return TWAEnsemble(levels=moments.levels, N=moments.N, samples=samples, seed=cfg.seed)


def initial_ensemble(N: int, F: float, cfg: TWAConfig, imbalance: tuple[int, int] = (0, 0)) -> TWAEnsemble:
    levels = level_set(F, cfg.model)
    n_gA, n_eB = pump_populations(N, imbalance)
    return sample_initial_ensemble(product_state_moments(levels, {levels.gA: n_gA, levels.eB: n_eB}), cfg)


# --- Equations of motion ---

def jump_amplitudes(svars: np.ndarray, model: TWAModel) -> list[np.ndarray]:
    """O_k^+ for every channel, batched over leading axes of svars."""
    return [np.einsum("...ab,ab->...", svars, c) for c in model.tensors.channels]


def effective_field(svars: np.ndarray, model: TWAModel) -> np.ndarray:
    W = np.broadcast_to(model.h_lin.T, svars.shape).copy()
    for c, o_plus in zip(model.tensors.channels, jump_amplitudes(svars, model)):
        o_plus = o_plus[..., None, None]
        W += model.chi0 * (np.conj(o_plus) * c.T + o_plus * np.conj(c))
    return W


def eom_rhs(traj: TWATrajectory, model: TWAModel) -> np.ndarray:
    """dS/dt for one trajectory (or a stack of them)."""
    S = traj.svars
    W = effective_field(S, model)
    return -1j * (S @ W - W @ S)


def hamiltonian_function(svars: np.ndarray, model: TWAModel) -> float:
    energy = np.real(np.trace(model.h_lin.T @ svars))
    for o_plus in jump_amplitudes(svars, model):
        energy += model.chi0 * abs(o_plus) ** 2
    return float(energy)


def _packed_rhs(model: TWAModel, n_batch: int):
    plan = pack_plan(model.levels.D)

    def rhs(_, y):
        S = plan.unpack(y.reshape(n_batch, plan.size))
        W = effective_field(S, model)
        return plan.pack(-1j * (S @ W - W @ S)).ravel()

    return rhs


# --- Ensemble integration ---

def spin_vector(svars: np.ndarray, levels: LevelSet) -> np.ndarray:
    """(A^x, A^y, A^z, B^x, B^y, B^z) from collective variables, batched over leading axes."""
    gA, eA, gB, eB = levels.stretched
    coh_A = svars[..., gA, eA]
    coh_B = svars[..., gB, eB]
    return np.stack([
        coh_A.real,
        -coh_A.imag,
        0.5 * (svars[..., eA, eA].real - svars[..., gA, gA].real),
        -coh_B.real,
        coh_B.imag,
        0.5 * (svars[..., eB, eB].real - svars[..., gB, gB].real),
    ], axis=-1)


@dataclass(frozen=True)
class _BatchResult:
    populations: np.ndarray
    spins: np.ndarray
    svars: Optional[np.ndarray]
    failed: np.ndarray


def _solve(model: TWAModel, x0: np.ndarray, t_grid: tuple[float, ...], rtol: float, atol: float):
    n_batch = x0.shape[0]
    if len(t_grid) == 1:
        return x0[:, None, :], True
    sol = solve_ivp(_packed_rhs(model, n_batch), (t_grid[0], t_grid[-1]), x0.ravel(), method="DOP853",
                    t_eval=t_grid, rtol=rtol, atol=atol)
    if not sol.success or not np.all(np.isfinite(sol.y)):
        return None, False
    # (n_batch, T, D*D)
    return sol.y.reshape(n_batch, -1, len(t_grid)).transpose(0, 2, 1), True


def _integrate_batch(args) -> _BatchResult:
    model, x0, t_grid, rtol, atol, keep_svars = args
    plan = pack_plan(model.levels.D)
    packed, ok = _solve(model, x0, t_grid, rtol, atol)
    failed = np.zeros(x0.shape[0], dtype=bool)
    if not ok:
        # retry one by one so a single stiff trajectory does not sink the batch
        packed = np.full((x0.shape[0], len(t_grid), plan.size), np.nan)
        for i in range(x0.shape[0]):
            single, single_ok = _solve(model, x0[i:i + 1], t_grid, rtol, atol)
            if single_ok:
                packed[i] = single[0]
            else:
                failed[i] = True
    S = plan.unpack(np.nan_to_num(packed))
    populations = np.real(np.diagonal(S, axis1=-2, axis2=-1))
    return _BatchResult(populations=populations, spins=spin_vector(S, model.levels),
                        svars=packed if keep_svars else None, failed=failed)


@dataclass(frozen=True)
class TWAObservables:
    model: str
    N: int
    times: np.ndarray
    occupations: np.ndarray
    n_bar: np.ndarray
    leakage: np.ndarray
    pump_population: np.ndarray
    var_S1_minus: np.ndarray
    var_S2_plus: np.ndarray
    var_delta_n: np.ndarray
    xi2: np.ndarray
    standard_errors: dict[str, np.ndarray]
    n_traj_used: int
    n_failed: int

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "t": self.times,
            "n_bar": self.n_bar,
            "leakage": self.leakage,
            "pump_population": self.pump_population,
            "var_S1_minus": self.var_S1_minus,
            "var_S2_plus": self.var_S2_plus,
            "var_delta_n": self.var_delta_n,
            "xi2": self.xi2,
        })
        for name, se in self.standard_errors.items():
            frame[f"{name}_se"] = se
        frame["n_traj"] = self.n_traj_used
        return frame


@dataclass(frozen=True)
class TWARun:
    observables: TWAObservables
    spins: np.ndarray
    populations: np.ndarray
    svars: Optional[np.ndarray]


def _batches(ensemble: TWAEnsemble, batch_size: int):
    for start in range(0, ensemble.n_traj, batch_size):
        yield ensemble.samples[start:start + batch_size]


def evolve_ensemble(ensemble: TWAEnsemble, cfg: TWAConfig, model: TWAModel,
                    keep_svars: bool = False) -> TWARun:
    """Integrate every trajectory over cfg.t_grid and reduce to observables.

    Batches have a fixed size independent of the worker count and are reassembled in
    submission order, so results do not depend on scheduling.
    """
    if model.levels != ensemble.levels:
        raise DomainError("ensemble and model use different level sets")
    atol = cfg.abs_tol if cfg.abs_tol is not None else config.TWA_ABS_TOL_PER_ATOM * ensemble.N
    jobs = [(model, x0, cfg.t_grid, cfg.rel_tol, atol, keep_svars) for x0 in _batches(ensemble, cfg.batch_size)]
    logger.info(f"TWA: {ensemble.n_traj} trajectories in {len(jobs)} batches on {cfg.workers} worker(s)")
    if cfg.workers > 1 and len(jobs) > 1:
        with cf.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_integrate_batch, jobs))
    else:
        results = [_integrate_batch(job) for job in jobs]

    failed = np.concatenate([r.failed for r in results])
    n_failed = int(failed.sum())
    if n_failed:
        logger.warning(f"TWA: excluded {n_failed} failed trajectories")
    if n_failed > config.TWA_MAX_FAILURE_FRACTION * ensemble.n_traj:
        raise IntegrationError(f"{n_failed} of {ensemble.n_traj} trajectories failed")
    keep = ~failed
    spins = np.concatenate([r.spins for r in results])[keep]
    populations = np.concatenate([r.populations for r in results])[keep]
    svars = np.concatenate([r.svars for r in results])[keep] if keep_svars else None
    observables = _observables(np.asarray(cfg.t_grid), populations, spins, model, n_failed)
    return TWARun(observables=observables, spins=spins, populations=populations, svars=svars)


# --- Estimators ---

def _squeezed_variances(spins: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s1_minus = spins[..., 3] - spins[..., 1]
    s2_plus = spins[..., 4] + spins[..., 0]
    return s1_minus.var(axis=0, ddof=1), s2_plus.var(axis=0, ddof=1)


def measure_squeezing(spins: np.ndarray, N: int) -> tuple[float, float, float]:
    """(xi2, var S_{1,-}, var S_{2,+}) from a snapshot of spin vectors, shape (n_traj, 6)."""
    if spins.shape[0] < 2:
        raise DomainError("need at least two trajectories to estimate a variance")
    var1, var2 = _squeezed_variances(spins)
    return float(2.0 * (var1 + var2) / N), float(var1), float(var2)


def jackknife(estimator, data: tuple[np.ndarray, ...], blocks: int) -> np.ndarray:
    """Block-jackknife standard error of estimator(*data) over the trajectory axis."""
    n = data[0].shape[0]
    blocks = max(2, min(blocks, n))
    edges = np.linspace(0, n, blocks + 1).astype(int)
    partial = []
    for b in range(blocks):
        keep = np.ones(n, dtype=bool)
        keep[edges[b]:edges[b + 1]] = False
        partial.append(estimator(*(d[keep] for d in data)))
    partial = np.array(partial)
    return np.sqrt((blocks - 1) / blocks * np.sum((partial - partial.mean(axis=0)) ** 2, axis=0))


def _observables(times, populations, spins, model: TWAModel, n_failed: int) -> TWAObservables:
    levels = model.levels
    gA, eA, gB, eB = levels.stretched
    others = [k for k in range(levels.D) if k not in levels.stretched]
    N = model.N

    def n_bar(pop, _):
        return (pop[..., eA] + pop[..., gB]).mean(axis=0)

    def leakage(pop, _):
        return pop[..., others].sum(axis=-1).mean(axis=0) if others else np.zeros(pop.shape[1])

    def var_delta(pop, _):
        return (pop[..., eA] - pop[..., gB]).var(axis=0, ddof=1)

    def var1(_, sp):
        return _squeezed_variances(sp)[0]

    def var2(_, sp):
        return _squeezed_variances(sp)[1]

    def xi2(_, sp):
        v1, v2 = _squeezed_variances(sp)
        return 2.0 * (v1 + v2) / N

    estimators = {"n_bar": n_bar, "leakage": leakage, "var_delta_n": var_delta,
                  "var_S1_minus": var1, "var_S2_plus": var2, "xi2": xi2}
    data = (populations, spins)
    values = {name: f(*data) for name, f in estimators.items()}
    errors = {name: jackknife(f, data, config.TWA_JACKKNIFE_BLOCKS) for name, f in estimators.items()}
    return TWAObservables(
        model=levels.model, N=N, times=times,
        occupations=populations.mean(axis=0),
        n_bar=values["n_bar"], leakage=values["leakage"],
        pump_population=(populations[..., gA] + populations[..., eB]).mean(axis=0),
        var_S1_minus=values["var_S1_minus"], var_S2_plus=values["var_S2_plus"],
        var_delta_n=values["var_delta_n"], xi2=values["xi2"],
        standard_errors=errors, n_traj_used=populations.shape[0], n_failed=n_failed,
    )


def run_twa(N: int, chi: float, cfg: TWAConfig, F: float = 4.5, delta: Optional[float] = None,
            keep_svars: bool = False) -> TWARun:
    model = build_twa_model(N, chi, delta, F, cfg.model)
    ensemble = initial_ensemble(N, F, cfg)
    return evolve_ensemble(ensemble, cfg, model, keep_svars=keep_svars)


def ensemble_frame(times: np.ndarray, svars: np.ndarray) -> pd.DataFrame:
    """Packed trajectories, shape (n_traj, T, D*D), as rows (trajectory, t, x0 ...)."""
    n_traj, n_t, size = svars.shape
    frame = pd.DataFrame(svars.reshape(n_traj * n_t, size), columns=[f"x{k}" for k in range(size)])
    frame.insert(0, "t", np.tile(np.asarray(times), n_traj))
    frame.insert(0, "trajectory", np.repeat(np.arange(n_traj), n_t))
    return frame


def dump_ensemble(path: str, times: np.ndarray, svars: np.ndarray) -> None:
    frame = ensemble_frame(times, svars)
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        logger.exception(f"Error writing trajectory dump '{path}':")
        raise IOError(f"Error writing trajectory dump '{path}': {e}") from e
