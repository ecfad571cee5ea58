"""Experiment registry: sweep points, per-point evaluation and figure panels.

Each experiment turns a RunConfig into a list of sweep points, evaluates every point
independently (in a process pool when workers > 1) and assembles one table per panel.
Results are reassembled in point order, so outputs never depend on the worker count.
"""
import concurrent.futures as cf
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from models import PointStatus, RamseyConfig, RunConfig, TWAConfig
from engines.model import clebsch_gordan_table, derive_params
from engines.ed_engine import minimum_squeezing, moment_series
from engines.ramsey import protocol_trace, run_protocol
from engines.twa_engine import ensemble_frame, run_twa
from engines.upa_analytics import (beyond_upa_optimum, best_over_time, entangled_pair_number,
                                   optimal_detuning_and_best_sensitivity, optimal_time,
                                   optimize_decoherence_sensitivity, pump_fluctuation_monte_carlo,
                                   rates_for_detuning, sensitivity_beyond_upa, sensitivity_ideal,
                                   sensitivity_with_decoherence, sensitivity_with_pump_fluctuations,
                                   squeezing_xi2, time_for_pair_number)

logger = logging.getLogger(__name__)

# Default detuning grid, Delta / (sqrt(N) kappa)
DEFAULT_DETUNING_RATIOS = list(np.geomspace(0.05, 5.0, 25))


@dataclass(frozen=True)
class PointResult:
    status: PointStatus
    rows: dict[str, list[dict]] = field(default_factory=dict)


def _axis(cfg: RunConfig, name: str, default: list[float]) -> list[float]:
    return cfg.sweep.values(name) or list(default)


def _atom_numbers(cfg: RunConfig) -> list[int]:
    return [int(n) for n in cfg.sweep.N] if cfg.sweep.N else [cfg.physical.N]


def _couplings(cfg: RunConfig, N: int) -> tuple[float, float]:
    """(chi, delta) for the physical parameters at atom number N."""
    physical = cfg.physical.model_copy(update={"N": N})
    derived = derive_params(physical)
    if physical.delta_g is not None:
        return derived.chi, physical.F * (physical.delta_e - physical.delta_g)
    return derived.chi, derived.delta_res


def _cooperativities(cfg: RunConfig) -> list[float]:
    if cfg.sweep.cooperativity:
        return list(cfg.sweep.cooperativity)
    return [derive_params(cfg.physical).cooperativity]


class Experiment:
    name = ""
    description = ""
    # panel name -> column documentation
    panels: dict[str, str] = {}
    parallel_points = True

    def points(self, cfg: RunConfig) -> list[dict]:
        raise NotImplementedError

    def evaluate(self, cfg: RunConfig, point: dict) -> dict[str, list[dict]]:
        raise NotImplementedError


class SqueezeSweep(Experiment):
    name = "squeeze_sweep"
    description = "Exact squeezing and pair growth versus N chi t, with the minimum squeezing per N."
    panels = {
        "xi2_curves": "N, nchi_t, t, n_bar_ed, n_bar_upa, xi2_ed, xi2_upa",
        "xi2_min": "N, t_min, nchi_t_min, xi2_min, sqrt_n_xi2_min, reference_sqrt_n_xi2_min",
    }

    def points(self, cfg):
        return [{"N": N} for N in _atom_numbers(cfg)]

    def evaluate(self, cfg, point):
        N = point["N"]
        chi, delta = _couplings(cfg, N)
        nchi_t = np.array(_axis(cfg, "nchi_t", np.linspace(0.0, 8.0, 161)))
        times = nchi_t / (N * chi)
        series = moment_series(N, chi, delta, times, method="diagonalize")
        curves = [{"N": N, "nchi_t": x, "t": t, "n_bar_ed": m.n_bar, "n_bar_upa": entangled_pair_number(t, N, chi),
                   "xi2_ed": m.xi2, "xi2_upa": squeezing_xi2(t, N, chi)}
                  for x, t, m in zip(nchi_t, times, series)]
        t_min, xi2_min = minimum_squeezing(N, chi, delta, t_max=float(times[-1]) if times[-1] > 0 else None)
        summary = {"N": N, "t_min": t_min, "nchi_t_min": N * chi * t_min, "xi2_min": xi2_min,
                   "sqrt_n_xi2_min": math.sqrt(N) * xi2_min, "reference_sqrt_n_xi2_min": 0.88}
        return {"xi2_curves": curves, "xi2_min": [summary]}


class SensitivityTime(Experiment):
    name = "sensitivity_time"
    description = "Scaled decoherence-limited sensitivity sqrt(N) dphi versus time for each detuning."
    panels = {
        "scaled_sensitivity_vs_time": "N, C, detuning_ratio, nchi_t, t, sqrt_n_dphi",
        "optimal_time": "N, C, detuning_ratio, t_opt, nchi_t_opt, t_approx, approx_relative_error, sqrt_n_dphi_opt",
    }

    def points(self, cfg):
        ratios = _axis(cfg, "detuning_ratio", [0.25, 0.5, 1.0, 2.0])
        return [{"N": N, "C": C, "detuning_ratio": r}
                for N in _atom_numbers(cfg) for C in _cooperativities(cfg) for r in ratios]

    def evaluate(self, cfg, point):
        N, C, ratio = point["N"], point["C"], point["detuning_ratio"]
        kappa = cfg.physical.kappa
        g_F = derive_params(cfg.physical).g_F
        chi, Gamma = rates_for_detuning(ratio * math.sqrt(N) * kappa, g_F, kappa)
        gamma = 4.0 * g_F ** 2 / (kappa * C)
        rows = []
        for x in _axis(cfg, "nchi_t", np.linspace(0.0, 12.0, 121)):
            t = x / (N * chi)
            result = sensitivity_with_decoherence(t, N, chi, Gamma, gamma)
            rows.append({"N": N, "C": C, "detuning_ratio": ratio, "nchi_t": x, "t": t,
                         "sqrt_n_dphi": math.sqrt(N * result.variance_phi)})
        opt = optimal_time(N, chi, Gamma, gamma)
        best = sensitivity_with_decoherence(opt.t_opt, N, chi, Gamma, gamma)
        summary = {"N": N, "C": C, "detuning_ratio": ratio, "t_opt": opt.t_opt, "nchi_t_opt": N * chi * opt.t_opt,
                   "t_approx": opt.t_approx, "approx_relative_error": opt.approx_relative_error,
                   "sqrt_n_dphi_opt": math.sqrt(N * best.variance_phi)}
        return {"scaled_sensitivity_vs_time": rows, "optimal_time": [summary]}


class SensitivityDetuning(Experiment):
    name = "sensitivity_detuning"
    description = "Best sensitivity over time N^(3/4) dphi versus Delta/(sqrt(N) kappa), with the analytic optimum."
    panels = {
        "best_vs_detuning": "N, C, detuning_ratio, n34_dphi_closed_form, n34_dphi_moments, marker_ratio",
        "optimum": "N, C, marker_ratio_opt, marker_ratio_wide, variance_analytic, "
                   "ratio_closed_form, variance_closed_form, ratio_moments, variance_moments",
    }

    def points(self, cfg):
        return [{"N": N, "C": C} for N in _atom_numbers(cfg) for C in _cooperativities(cfg)]

    def evaluate(self, cfg, point):
        N, C = point["N"], point["C"]
        kappa = cfg.physical.kappa
        g_F = derive_params(cfg.physical).g_F
        gamma = 4.0 * g_F ** 2 / (kappa * C)
        analytic = optimal_detuning_and_best_sensitivity(N, C, kappa)
        marker = analytic.delta_opt / (math.sqrt(N) * kappa)
        scale = N ** 0.75
        rows = []
        for ratio in _axis(cfg, "detuning_ratio", DEFAULT_DETUNING_RATIOS):
            chi, Gamma = rates_for_detuning(ratio * math.sqrt(N) * kappa, g_F, kappa)
            closed = best_over_time(N, chi, Gamma, gamma, "closed_form")[1]
            moments = best_over_time(N, chi, Gamma, gamma, "moments")[1]
            rows.append({"N": N, "C": C, "detuning_ratio": ratio, "n34_dphi_closed_form": scale * math.sqrt(closed),
                         "n34_dphi_moments": scale * math.sqrt(moments), "marker_ratio": marker})
        closed_opt = optimize_decoherence_sensitivity(N, C, kappa, g_F, "closed_form")
        moments_opt = optimize_decoherence_sensitivity(N, C, kappa, g_F, "moments")
        summary = {"N": N, "C": C, "marker_ratio_opt": marker,
                   "marker_ratio_wide": analytic.delta_opt_wide / (math.sqrt(N) * kappa),
                   "variance_analytic": analytic.variance_min,
                   "ratio_closed_form": closed_opt.detuning_ratio, "variance_closed_form": closed_opt.variance_min,
                   "ratio_moments": moments_opt.detuning_ratio, "variance_moments": moments_opt.variance_min}
        return {"best_vs_detuning": rows, "optimum": [summary]}


class TWABenchmark(Experiment):
    name = "twa_benchmark"
    description = "Multilevel truncated-Wigner pair growth against exact four-level evolution."
    panels = {
        "pair_number": "N, nchi_t, t, n_bar_twa, n_bar_twa_se, n_bar_ed, n_bar_upa",
        "leakage": "N, nchi_t, leakage_ratio, leakage_ratio_se",
        "number_difference": "N, nchi_t, var_delta_n_ratio, var_delta_n_ratio_se",
        "trajectories": "trajectory, t, x0 .. x(D^2-1) (only with dump_trajectories)",
    }
    # trajectories already run in parallel inside each point
    parallel_points = False

    def points(self, cfg):
        return [{"N": N} for N in _atom_numbers(cfg)]

    def evaluate(self, cfg, point):
        N = point["N"]
        chi, delta = _couplings(cfg, N)
        twa_cfg = cfg.twa or TWAConfig()
        if cfg.sweep.nchi_t is not None:
            nchi_t = np.array(cfg.sweep.values("nchi_t"))
        elif len(twa_cfg.t_grid) > 1:
            nchi_t = np.array(twa_cfg.t_grid) * N * chi
        else:
            window = N * chi * time_for_pair_number(0.76 * math.sqrt(N), N, chi)
            nchi_t = np.linspace(0.0, window, 21)
        times = nchi_t / (N * chi)
        twa_cfg = twa_cfg.model_copy(update={"t_grid": tuple(float(t) for t in times), "seed": cfg.seed,
                                             "workers": cfg.workers})
        run = run_twa(N, chi, twa_cfg, F=cfg.physical.F, delta=delta, keep_svars=cfg.dump_trajectories)
        obs = run.observables
        ed = moment_series(N, chi, delta, times, method="diagonalize")
        se = obs.standard_errors
        with np.errstate(divide="ignore", invalid="ignore"):
            leak = obs.leakage / obs.n_bar
            var_dn = obs.var_delta_n / obs.n_bar
        rows = {"pair_number": [], "leakage": [], "number_difference": []}
        for k, (x, t) in enumerate(zip(nchi_t, times)):
            rows["pair_number"].append({"N": N, "nchi_t": x, "t": t, "n_bar_twa": obs.n_bar[k],
                                        "n_bar_twa_se": se["n_bar"][k], "n_bar_ed": ed[k].n_bar,
                                        "n_bar_upa": entangled_pair_number(t, N, chi)})
            rows["leakage"].append({"N": N, "nchi_t": x, "leakage_ratio": leak[k],
                                    "leakage_ratio_se": se["leakage"][k] / obs.n_bar[k] if obs.n_bar[k] else math.nan})
            rows["number_difference"].append({"N": N, "nchi_t": x, "var_delta_n_ratio": var_dn[k],
                                              "var_delta_n_ratio_se": se["var_delta_n"][k] / obs.n_bar[k]
                                              if obs.n_bar[k] else math.nan})
        if cfg.dump_trajectories:
            frame = ensemble_frame(times, run.svars)
            frame.insert(0, "N", N)
            rows["trajectories"] = frame.to_dict("records")
        return rows


class UPATable(Experiment):
    name = "upa_table"
    description = "Tabulated closed-form sensitivities: ideal, beyond-UPA, decoherence optimum and pump fluctuations."
    panels = {
        "ideal_and_beyond_upa": "N, n_bar, phi, variance_ideal, variance_beyond_upa, sub_sql_ideal, sub_sql_beyond_upa",
        "beyond_upa_optimum": "N, n_bar_opt, variance_min",
        "decoherence_optimum": "N, C, delta_opt, delta_opt_wide, variance_min, n_variance_min",
        "pump_fluctuation_formula": "N, sigma_over_sqrt_n, nchi_t, variance_phi",
        "clebsch_gordan": "F, m, q, value",
    }

    def points(self, cfg):
        return [{"N": N} for N in _atom_numbers(cfg)]

    def evaluate(self, cfg, point):
        N = point["N"]
        kappa = cfg.physical.kappa
        n_bars = _axis(cfg, "n_bar", [1.0, math.sqrt(N) / 3 ** 0.25, N / 10.0])
        phis = _axis(cfg, "phi", [0.0, 0.01, 0.1])
        table = []
        for n_bar in n_bars:
            for phi in phis:
                ideal = sensitivity_ideal(phi, n_bar, N)
                beyond = sensitivity_beyond_upa(phi, n_bar, N)
                table.append({"N": N, "n_bar": n_bar, "phi": phi, "variance_ideal": ideal.variance_phi,
                              "variance_beyond_upa": beyond.variance_phi, "sub_sql_ideal": ideal.sub_sql,
                              "sub_sql_beyond_upa": beyond.sub_sql})
        n_opt, var_opt = beyond_upa_optimum(N)
        optimum = []
        for C in _axis(cfg, "cooperativity", [1.0, 10.0, 100.0]):
            best = optimal_detuning_and_best_sensitivity(N, C, kappa)
            optimum.append({"N": N, "C": C, "delta_opt": best.delta_opt, "delta_opt_wide": best.delta_opt_wide,
                            "variance_min": best.variance_min, "n_variance_min": best.scaled_variance})
        chi, _ = _couplings(cfg, N)
        pump = []
        for s in _axis(cfg, "sigma_over_sqrt_n", [1.0]):
            sigma = s * math.sqrt(N)
            for x in _axis(cfg, "nchi_t", [0.5 * math.log(N)]):
                result = sensitivity_with_pump_fluctuations(x / (N * chi), N, chi, sigma, sigma)
                pump.append({"N": N, "sigma_over_sqrt_n": s, "nchi_t": x, "variance_phi": result.variance_phi})
        rows = {"ideal_and_beyond_upa": table,
                "beyond_upa_optimum": [{"N": N, "n_bar_opt": n_opt, "variance_min": var_opt}],
                "decoherence_optimum": optimum, "pump_fluctuation_formula": pump}
        if N == _atom_numbers(cfg)[0]:
            rows["clebsch_gordan"] = clebsch_gordan_table(cfg.physical.F).to_dict("records")
        return rows


class PumpFluctuation(Experiment):
    name = "pump_fluctuation"
    description = "Monte-Carlo average over Gaussian pump imbalances against the closed form."
    panels = {
        "robustness": "N, sigma_over_sqrt_n, nchi_t, variance_formula, variance_monte_carlo, "
                      "variance_monte_carlo_se, relative_deviation",
    }

    def points(self, cfg):
        return [{"N": N, "sigma_over_sqrt_n": s}
                for N in _atom_numbers(cfg) for s in _axis(cfg, "sigma_over_sqrt_n", [1.0])]

    def evaluate(self, cfg, point):
        N, s = point["N"], point["sigma_over_sqrt_n"]
        chi, _ = _couplings(cfg, N)
        sigma = s * math.sqrt(N)
        rows = []
        # e^{N chi t} = sqrt(N) by default
        for k, x in enumerate(_axis(cfg, "nchi_t", [0.5 * math.log(N)])):
            t = x / (N * chi)
            formula = sensitivity_with_pump_fluctuations(t, N, chi, sigma, sigma).variance_phi
            mc = pump_fluctuation_monte_carlo(t, N, chi, sigma, sigma, cfg.mc_samples,
                                              seed=int(np.random.SeedSequence([cfg.seed, N, k]).generate_state(1)[0]))
            rows.append({"N": N, "sigma_over_sqrt_n": s, "nchi_t": x, "variance_formula": formula,
                         "variance_monte_carlo": mc.variance_phi, "variance_monte_carlo_se": mc.standard_error,
                         "relative_deviation": mc.variance_phi / formula - 1.0})
        return {"robustness": rows}


class RamseyProtocol(Experiment):
    name = "ramsey_protocol"
    description = "Full Ramsey sequence on a chosen backend over squeezing time and phase, plus a stage trace."
    panels = {
        "sensitivity": "nchi_t, t, phi, variance_phi, n_variance_phi, signal, slope, noise, flags",
        "trace": "stage, S*_mean, S*_var for S1+, S2+, S1-, S2-, S3-, S3+",
    }

    def _ramsey(self, cfg: RunConfig) -> RamseyConfig:
        ramsey = cfg.ramsey
        if ramsey.backend == "twa":
            twa = (ramsey.twa or cfg.twa or TWAConfig()).model_copy(update={"seed": cfg.seed, "workers": cfg.workers})
            ramsey = ramsey.model_copy(update={"twa": twa})
        return ramsey

    def points(self, cfg):
        ramsey = cfg.ramsey
        nchi_t = _axis(cfg, "nchi_t", [ramsey.N * ramsey.chi * ramsey.squeeze_time])
        phis = _axis(cfg, "phi", [ramsey.phi])
        return [{"kind": "trace"}] + [{"kind": "sensitivity", "nchi_t": x, "phi": p} for x in nchi_t for p in phis]

    def evaluate(self, cfg, point):
        ramsey = self._ramsey(cfg)
        if point["kind"] == "trace":
            return {"trace": protocol_trace(ramsey).to_dict("records")}
        t = point["nchi_t"] / (ramsey.N * ramsey.chi)
        result = run_protocol(ramsey.model_copy(update={"squeeze_time": t, "phi": point["phi"]}))
        return {"sensitivity": [{"nchi_t": point["nchi_t"], "t": t, "phi": point["phi"],
                                 "variance_phi": result.variance_phi, "n_variance_phi": ramsey.N * result.variance_phi,
                                 "signal": result.components["signal"], "slope": result.signal_slope,
                                 "noise": result.noise, "flags": ";".join(result.flags)}]}


EXPERIMENTS: dict[str, Experiment] = {e.name: e for e in (
    SqueezeSweep(), SensitivityTime(), SensitivityDetuning(), TWABenchmark(),
    UPATable(), PumpFluctuation(), RamseyProtocol(),
)}


def _evaluate_point(args) -> PointResult:
    name, cfg, index, point = args
    params = dict(point)
    try:
        rows = EXPERIMENTS[name].evaluate(cfg, point)
        return PointResult(PointStatus(index=index, params=params, status="ok"), rows)
    except Exception as e:
        logger.exception(f"Point {index} of '{name}' failed:")
        return PointResult(PointStatus(index=index, params=params, status="failed", message=str(e)))


def run_points(cfg: RunConfig) -> list[PointResult]:
    experiment = EXPERIMENTS[cfg.experiment]
    points = experiment.points(cfg)
    jobs = [(cfg.experiment, cfg, i, p) for i, p in enumerate(points)]
    logger.info(f"Experiment '{cfg.experiment}': {len(points)} point(s) on {cfg.workers} worker(s)")
    if experiment.parallel_points and cfg.workers > 1 and len(jobs) > 1:
        with cf.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_evaluate_point, jobs))
    return [_evaluate_point(job) for job in jobs]


def emit_figure_data(cfg: RunConfig, results: list[PointResult]) -> dict[str, pd.DataFrame]:
    """One table per panel, rows in point order."""
    experiment = EXPERIMENTS[cfg.experiment]
    frames = {}
    for panel in experiment.panels:
        rows = [row for r in results for row in r.rows.get(panel, [])]
        if rows:
            frames[panel] = pd.DataFrame(rows)
    return frames
