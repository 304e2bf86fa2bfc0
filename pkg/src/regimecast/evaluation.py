"""Simulation-study outcome metrics and the replication harness.

Classification quality of the regime extraction (sensitivity/specificity
over person-occasion cells, split into observed-window, forecast-window, and
overall), interval coverage of the true factor scores, the squared-error
score per forecast step, mean forecast-interval width per step, switch
times, and the generate -> fit -> forecast -> evaluate loop aggregated over
replications and conditions.
"""

from __future__ import annotations

import traceback
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .datagen import PopulationDistribution, generate_dataset, sample_population_params
from .ffbs import ForecastConfig, forecast_from_posterior
from .model import ModelSpec, simulation_spec
from .sampler import McmcConfig, PriorConfig, run_mcmc, summarize

__all__ = [
    "EvalReport",
    "sensitivity_specificity",
    "coverage_rate",
    "score_function",
    "score_curve",
    "fi_width",
    "width_curve",
    "switch_time",
    "switch_times",
    "run_replication",
    "replicate_study",
]


def sensitivity_specificity(predicted: np.ndarray, true: np.ndarray):
    """Cell-level regime classification quality.

    predicted/true: aligned arrays with regime values in {1, 2}. Returns
    (sensitivity, specificity) = (P(pred 2 | true 2), P(pred 1 | true 1));
    an empty reference class yields NaN (not-applicable marker).
    """
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ValueError("predicted and true grids must align")
    if predicted.size == 0:
        return float("nan"), float("nan")
    is2 = true == 2
    is1 = true == 1
    sens = float((predicted[is2] == 2).mean()) if is2.any() else float("nan")
    spec = float((predicted[is1] == 1).mean()) if is1.any() else float("nan")
    return sens, spec


def coverage_rate(lower: np.ndarray, upper: np.ndarray,
                  truth: np.ndarray) -> float:
    """Fraction of cells whose true value lies inside [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return float(((truth >= lower) & (truth <= upper)).mean())


def score_function(forecast_means: np.ndarray, true_scores: np.ndarray,
                   h: int) -> float:
    """Sum of squared forecast errors over persons and factors at step h.

    forecast_means/true_scores: (N, q, H) grids; h is 1-based.
    """
    forecast_means = np.asarray(forecast_means, dtype=float)
    true_scores = np.asarray(true_scores, dtype=float)
    diff = forecast_means[:, :, h - 1] - true_scores[:, :, h - 1]
    return float(np.sum(diff ** 2))


def score_curve(forecast_means: np.ndarray, true_scores: np.ndarray) -> np.ndarray:
    """score_function over every forecast step: (H,)."""
    h_max = np.asarray(forecast_means).shape[2]
    return np.array([score_function(forecast_means, true_scores, h + 1)
                     for h in range(h_max)])


def fi_width(lower: np.ndarray, upper: np.ndarray, h: int) -> float:
    """Mean interval width over persons and factors at 1-based step h."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return float((upper[:, :, h - 1] - lower[:, :, h - 1]).mean())


def width_curve(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    h_max = np.asarray(lower).shape[2]
    return np.array([fi_width(lower, upper, h + 1) for h in range(h_max)])


def switch_time(states: np.ndarray, sustain: int = 2) -> Optional[int]:
    """First occasion (1-based) starting a sustained run of regime 2.

    A switch counts once regime 2 persists for at least `sustain`
    consecutive occasions; a shorter excursion is treated as a classification
    blip. Returns None if no sustained run exists.
    """
    states = np.asarray(states).ravel()
    run = 0
    for t, s in enumerate(states):
        run = run + 1 if s == 2 else 0
        if run >= sustain:
            return t - sustain + 2  # 1-based start of the run
    return None


def switch_times(states: np.ndarray, sustain: int = 2) -> np.ndarray:
    """Vectorized switch_time over persons; NaN where no switch."""
    out = np.full(states.shape[0], np.nan)
    for i in range(states.shape[0]):
        t = switch_time(states[i], sustain=sustain)
        if t is not None:
            out[i] = t
    return out


@dataclass
class EvalReport:
    """Aggregated simulation-study outcomes.

    table_rows: one dict per (N_t, N_1) condition with mean sensitivity /
    specificity (overall, observed window, forecast window) and coverage.
    curves: condition -> {"delta_h": (H,), "fi_width": (H,)} means.
    replications: per-replication metric dicts. failures: per-condition
    error strings. nonconverged: replication counts above the Rhat gate,
    reported separately (those runs stay in the aggregates).
    """

    table_rows: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    replications: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    nonconverged: dict = field(default_factory=dict)
    rhat_threshold: float = 1.1

    def validate(self):
        for row in self.table_rows:
            for key, value in row.items():
                if key.startswith(("sens", "spec", "coverage")) and np.isfinite(value):
                    if not 0.0 <= value <= 1.0:
                        raise ValueError(f"{key} outside [0, 1]")
        for cond in self.curves.values():
            if np.any(np.asarray(cond["delta_h"]) < 0):
                raise ValueError("delta_h must be nonnegative")
            if np.any(np.asarray(cond["fi_width"]) < 0):
                raise ValueError("fi_width must be nonnegative")


def run_replication(spec: ModelSpec, dist: PopulationDistribution,
                    priors: PriorConfig, mcmc: McmcConfig,
                    forecast_config: ForecastConfig, seed_params: int,
                    seed_data: int, classify_threshold: float = 0.5,
                    rhat_threshold: float = 1.1,
                    dropout_run_length: int = 5,
                    share_rows: bool = False) -> dict:
    """One generate -> fit -> forecast -> evaluate pass; returns metrics."""
    params = sample_population_params(spec, dist, seed_params,
                                      share_rows=share_rows)
    dataset, truth = generate_dataset(spec, params, seed_data,
                                      dropout_run_length=dropout_run_length)
    draws = run_mcmc(dataset, spec, priors, mcmc)

    n, q, h_max = spec.n_persons, spec.n_within_factors, spec.forecast_horizon
    true_obs = truth.estimation_states(spec)
    p2_obs = draws.state2_probability()
    pred_obs = np.where(p2_obs > classify_threshold, 2, 1)
    sens_obs, spec_obs = sensitivity_specificity(pred_obs, true_obs)

    fr = forecast_from_posterior(draws, dataset, spec, h_max, forecast_config)
    p2_fc = fr.state2_prob_by_horizon(n, h_max)
    pred_fc = np.where(p2_fc > classify_threshold, 2, 1)
    true_fc = truth.holdout_states(spec)
    sens_fc, spec_fc = sensitivity_specificity(pred_fc, true_fc)
    sens_all, spec_all = sensitivity_specificity(
        np.concatenate([pred_obs, pred_fc], axis=1),
        np.concatenate([true_obs, true_fc], axis=1))

    mean = fr.forecast_grid("mean", n, q, h_max)
    lower = fr.forecast_grid("lower", n, q, h_max)
    upper = fr.forecast_grid("upper", n, q, h_max)
    true_eta = np.swapaxes(truth.holdout_eta1(spec), 1, 2)   # (N, q, H)

    max_rhat = float(np.nanmax([
        row["rhat"] for row in summarize(draws)
        if np.isfinite(row["rhat"])
    ]))
    return {
        "sens_overall": sens_all, "sens_observed": sens_obs, "sens_forecast": sens_fc,
        "spec_overall": spec_all, "spec_observed": spec_obs, "spec_forecast": spec_fc,
        "coverage": coverage_rate(lower, upper, true_eta),
        "delta_h": score_curve(mean, true_eta),
        "fi_width": width_curve(lower, upper),
        "switch_time_true": switch_times(truth.latent.states),
        "switch_time_pred": switch_times(np.where(
            np.concatenate([p2_obs, p2_fc], axis=1) > classify_threshold, 2, 1)),
        "max_rhat": max_rhat,
        "converged": bool(max_rhat <= rhat_threshold),
    }


def _replication_task(args):
    label, kwargs = args
    try:
        return label, run_replication(**kwargs), None
    except Exception:
        return label, None, traceback.format_exc(limit=4)


def replicate_study(n1_grid: Sequence[int], nt_grid: Sequence[int], r: int,
                    seed: int, priors: Optional[PriorConfig] = None,
                    mcmc: Optional[McmcConfig] = None,
                    forecast_config: Optional[ForecastConfig] = None,
                    dist: Optional[PopulationDistribution] = None,
                    forecast_horizon: int = 10,
                    rhat_threshold: float = 1.1,
                    workers: int = 1, classify_threshold: float = 0.5,
                    share_rows: bool = False,
                    progress=None) -> EvalReport:
    """Replicate the simulation study over a {N_1} x {N_t} grid.

    Per condition, r replications are generated, fitted, forecast, and
    scored; means are aggregated into a table row per condition plus
    delta_h / interval-width curves. Replication seeds are derived from the
    master seed and the (condition, replication) coordinates, so the study
    is reproducible under any worker count. Failed replications are
    excluded from aggregates and reported with their errors; non-converged
    replications (max Rhat above the gate) are counted separately.
    """
    priors = priors or PriorConfig()
    mcmc = mcmc or McmcConfig()
    forecast_config = forecast_config or ForecastConfig()
    dist = dist or PopulationDistribution()

    tasks = []
    for ci, (n_t, n_1) in enumerate([(t, n) for t in nt_grid for n in n1_grid]):
        spec = simulation_spec(n_persons=n_1, n_occasions=n_t,
                               forecast_horizon=forecast_horizon)
        for rep in range(r):
            ss = np.random.SeedSequence(seed, spawn_key=(ci, rep))
            s_params, s_data, s_mcmc = ss.generate_state(3).tolist()
            tasks.append(((n_t, n_1, rep), dict(
                spec=spec, dist=dist, priors=priors,
                mcmc=replace(mcmc, seed=int(s_mcmc)),
                forecast_config=forecast_config,
                seed_params=int(s_params), seed_data=int(s_data),
                classify_threshold=classify_threshold,
                rhat_threshold=rhat_threshold,
                share_rows=share_rows,
            )))

    if workers > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(workers) as pool:
            raw = pool.map(_replication_task, tasks)
    else:
        raw = []
        for task in tasks:
            raw.append(_replication_task(task))
            if progress is not None:
                progress(task[0])

    report = EvalReport(rhat_threshold=rhat_threshold)
    by_condition = {}
    for (n_t, n_1, rep), metrics, err in raw:
        if err is not None:
            report.failures.append({"n_t": n_t, "n_1": n_1, "rep": rep,
                                    "error": err})
            continue
        metrics = dict(metrics, n_t=n_t, n_1=n_1, rep=rep)
        report.replications.append(metrics)
        by_condition.setdefault((n_t, n_1), []).append(metrics)

    scalar_keys = ("sens_overall", "sens_observed", "sens_forecast",
                   "spec_overall", "spec_observed", "spec_forecast",
                   "coverage")
    for (n_t, n_1), reps in sorted(by_condition.items()):
        row = {"n_t": n_t, "n_1": n_1, "r_completed": len(reps)}
        for key in scalar_keys:
            row[key] = float(np.nanmean([m[key] for m in reps]))
        report.table_rows.append(row)
        report.curves[(n_t, n_1)] = {
            "delta_h": np.mean([m["delta_h"] for m in reps], axis=0),
            "fi_width": np.mean([m["fi_width"] for m in reps], axis=0),
        }
        report.nonconverged[(n_t, n_1)] = sum(
            1 for m in reps if not m["converged"])
    report.validate()
    return report
