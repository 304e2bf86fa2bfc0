"""Command-line entry point: simulate | fit | forecast | evaluate | replicate.

Every run resolves its configuration (defaults, then the --config JSON
document, then command-line overrides), writes the resolved snapshot next to
its outputs, and derives all randomness from the mandatory seed. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from .datagen import (
    ConfigError,
    NumericError,
    PopulationDistribution,
    generate_dataset,
    inject_missingness,
    sample_population_params,
)
from .evaluation import (
    coverage_rate,
    replicate_study,
    score_curve,
    sensitivity_specificity,
    switch_times,
    width_curve,
)
from .ffbs import FilterNumericError, ForecastConfig, forecast_from_posterior
from .io_utils import (
    fmt,
    load_dataset,
    load_draws,
    load_ground_truth,
    save_dataset,
    save_draws,
    save_forecast,
    save_ground_truth,
    spec_from_dict,
    write_csv,
)
from .model import SpecError
from .sampler import McmcConfig, PriorConfig, SamplerError, run_mcmc
from .svg import line_plot

ENV_WORKERS = "REGIMECAST_WORKERS"

DEFAULTS = {
    "spec": {
        "n_within_factors": 3,
        "items_per_within_factor": [3, 3, 3],
        "n_between_items": 3,
        "n_states": 2,
        "interaction_factor_indices": [0, 1, 2],
        "n_persons": 25,
        "n_occasions": 25,
        "forecast_horizon": 10,
        "p_initial_state1": 1.0,
    },
    "population": {},
    "missing_rate": 0.0,
    "dropout_run_length": 5,
    "priors": {},
    "mcmc": {
        "n_chains": 2,
        "n_iterations": 4000,
        "n_burnin": 2000,
        "thinning": 1,
        "latent_thin": 10,
        "eta1_sampler": "ffbs",
    },
    "forecast": {
        "h_max": None,
        "level": 0.95,
        "theta_init": "model",
        "c0_scale": 1.0,
        "max_draws": 0,
        "classify_threshold": 0.5,
        "plot_persons": [1, 2, 3, 4],
    },
    "replicate": {
        "n1_grid": [25, 50],
        "nt_grid": [25],
        "r": 20,
        "forecast_horizon": 10,
        "rhat_threshold": 1.1,
        "share_rows": False,
    },
}


class UsageError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = _merge(cfg, json.load(fh))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "seed" not in cfg:
        raise UsageError("a seed is mandatory: pass --seed or set it in the config")
    if getattr(args, "half_data", False):
        cfg["half_data"] = True
    cfg.setdefault("half_data", False)
    return cfg


def resolve_workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{ENV_WORKERS} must be an integer, got {env!r}")
    return 1


def _write_resolved(cfg, out_dir, command):
    os.makedirs(out_dir, exist_ok=True)
    payload = dict(cfg, command=command)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _population(cfg) -> PopulationDistribution:
    overrides = {k: tuple(v) for k, v in cfg.get("population", {}).items()}
    return PopulationDistribution(**overrides)


def _priors(cfg) -> PriorConfig:
    return PriorConfig(**cfg.get("priors", {}))


def _mcmc_config(cfg, seed) -> McmcConfig:
    sub = dict(cfg["mcmc"])
    sub["seed"] = seed
    return McmcConfig(**sub)


def _forecast_config(cfg) -> ForecastConfig:
    sub = cfg["forecast"]
    return ForecastConfig(
        theta_init=sub["theta_init"], c0_scale=sub["c0_scale"],
        level=sub["level"], max_draws=sub["max_draws"],
        classify_threshold=sub["classify_threshold"],
    )


def _sub_seed(master, *key) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args)
    spec = spec_from_dict(cfg["spec"])
    seed = int(cfg["seed"])
    params = sample_population_params(spec, _population(cfg),
                                      _sub_seed(seed, 0))
    dataset, truth = generate_dataset(
        spec, params, _sub_seed(seed, 1),
        dropout_run_length=int(cfg["dropout_run_length"]))
    rate = float(cfg["missing_rate"])
    if rate > 0:
        dataset = inject_missingness(dataset, rate, _sub_seed(seed, 2))
    save_dataset(dataset, spec, args.out,
                 meta={"seed": seed, "missing_rate": rate})
    save_ground_truth(truth, os.path.join(args.out, "ground_truth.json"))
    _write_resolved(cfg, args.out, "simulate")
    print(f"simulate: wrote dataset for N={spec.n_persons}, "
          f"T={spec.n_occasions} to {args.out}")
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args)
    workers = resolve_workers(args)
    if not args.data:
        raise UsageError("fit requires --data DIR")
    dataset, spec, _ = load_dataset(args.data)
    fitted_occasions = dataset.n_occasions
    if cfg["half_data"]:
        fitted_occasions = dataset.n_occasions // 2
        dataset = dataset.slice_occasions(fitted_occasions)
    mcmc = _mcmc_config(cfg, int(cfg["seed"]))
    draws = run_mcmc(dataset, spec, _priors(cfg), mcmc, workers=workers)
    from .sampler import summarize
    rows = summarize(draws)
    finite = [r["rhat"] for r in rows if np.isfinite(r["rhat"])]
    max_rhat = max(finite) if finite else None
    threshold = float(cfg["replicate"]["rhat_threshold"])
    converged = max_rhat is not None and max_rhat <= threshold
    save_draws(draws, args.out, manifest_extra={
        "half_data": bool(cfg["half_data"]),
        "fitted_occasions": fitted_occasions,
        "rhat_threshold": threshold,
        "converged": bool(converged),
    })
    kept = draws.n_kept
    for name in ("gamma1", "p12", "var_zeta3", "alpha_s1[1]"):
        comp = draws.component(name)
        line_plot(
            os.path.join(args.out, f"trace_{name.replace('[', '_').rstrip(']')}.svg"),
            x=list(range(1, kept + 1)),
            series=[{"y": comp[c].tolist(), "name": f"chain {c + 1}"}
                    for c in range(draws.n_chains)],
            title=f"trace: {name}", x_label="kept iteration", y_label=name,
        )
    _write_resolved(cfg, args.out, "fit")
    flag = "" if converged else " (non-convergence flagged in manifest)"
    print(f"fit: {draws.n_chains} chains x {mcmc.n_iterations} iterations, "
          f"max Rhat {max_rhat:.3f}{flag}")
    return 0


def cmd_forecast(args) -> int:
    cfg = load_config(args)
    if not args.fit or not args.data:
        raise UsageError("forecast requires --fit DIR and --data DIR")
    try:
        draws = load_draws(args.fit)
    except FileNotFoundError:
        print("forecast: no draws found in --fit directory", file=sys.stderr)
        return 2
    dataset, spec, _ = load_dataset(args.data)
    with open(os.path.join(args.fit, "manifest.json")) as fh:
        manifest = json.load(fh)
    fitted = manifest.get("fitted_occasions", dataset.n_occasions)
    h_max = cfg["forecast"]["h_max"]
    if h_max is None:
        if manifest.get("half_data"):
            h_max = dataset.n_occasions - fitted
        else:
            h_max = spec.forecast_horizon
    h_max = int(h_max)
    fc = _forecast_config(cfg)
    result = forecast_from_posterior(draws, dataset, spec, h_max, fc) \
        if h_max > 0 else forecast_from_posterior(draws, dataset, spec, 1, fc)
    if h_max == 0:
        # smoothing only: drop the forecast block
        import dataclasses
        empty = np.zeros(0)
        result = dataclasses.replace(
            result, person=np.zeros(0, dtype=int), factor=np.zeros(0, dtype=int),
            horizon=np.zeros(0, dtype=int), mean=empty, variance=empty,
            lower=empty, upper=empty, p_state2=empty)
    save_forecast(result, args.out)

    t_fit = result.smoothed.shape[1]
    persons = [p - 1 for p in cfg["forecast"]["plot_persons"]
               if 1 <= p <= spec.n_persons]
    for i in persons:
        for j in range(spec.n_within_factors):
            xs = list(range(1, t_fit + h_max + 1))
            smooth = result.smoothed[i, :, j].tolist()
            if h_max > 0:
                sel = (result.person == i) & (result.factor == j)
                order = np.argsort(result.horizon[sel])
                f_mean = result.mean[sel][order]
                f_lo = result.lower[sel][order]
                f_hi = result.upper[sel][order]
                mean_line = smooth + f_mean.tolist()
                lo_line = [float("nan")] * t_fit + f_lo.tolist()
                hi_line = [float("nan")] * t_fit + f_hi.tolist()
                bands = [{"lo": lo_line, "hi": hi_line}]
            else:
                mean_line, bands = smooth, []
            line_plot(
                os.path.join(args.out, f"forecast_p{i + 1:02d}_f{j + 1}.svg"),
                x=xs,
                series=[{"y": mean_line, "name": "smoothed + forecast",
                         "color": "#c23b22"}],
                bands=bands,
                title=f"person {i + 1}, factor {j + 1}",
                x_label="occasion", y_label="factor score",
                vline=t_fit + 0.5 if h_max > 0 else None,
            )
    _write_resolved(cfg, args.out, "forecast")
    print(f"forecast: wrote h={h_max} steps for {spec.n_persons} persons to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    if not args.fit or not args.data or not args.truth:
        raise UsageError("evaluate requires --fit, --data, and --truth")
    draws = load_draws(args.fit)
    dataset, spec, _ = load_dataset(args.data)
    truth = load_ground_truth(args.truth)
    threshold = float(cfg["forecast"]["classify_threshold"])
    with open(os.path.join(args.fit, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("half_data"):
        h_max = dataset.n_occasions - manifest["fitted_occasions"]
    else:
        h_max = spec.forecast_horizon
    fc = _forecast_config(cfg)
    result = forecast_from_posterior(draws, dataset, spec, h_max, fc)

    n, q = spec.n_persons, spec.n_within_factors
    p2_obs = draws.state2_probability()
    t_fit = p2_obs.shape[1]
    pred_obs = np.where(p2_obs > threshold, 2, 1)
    true_obs = truth.latent.states[:, :t_fit]
    p2_fc = result.state2_prob_by_horizon(n, h_max)
    pred_fc = np.where(p2_fc > threshold, 2, 1)
    true_fc = truth.latent.states[:, t_fit:t_fit + h_max]

    sens_obs, spec_obs = sensitivity_specificity(pred_obs, true_obs)
    sens_fc, spec_fc = sensitivity_specificity(pred_fc, true_fc)
    sens_all, spec_all = sensitivity_specificity(
        np.concatenate([pred_obs, pred_fc], axis=1),
        np.concatenate([true_obs, true_fc], axis=1))
    mean = result.forecast_grid("mean", n, q, h_max)
    lo = result.forecast_grid("lower", n, q, h_max)
    hi = result.forecast_grid("upper", n, q, h_max)
    true_eta = np.swapaxes(
        truth.latent.eta1[:, t_fit:t_fit + h_max, :], 1, 2)
    pred_path = np.where(np.concatenate([p2_obs, p2_fc], axis=1) > threshold, 2, 1)
    report = {
        "sens_overall": sens_all, "sens_observed": sens_obs,
        "sens_forecast": sens_fc, "spec_overall": spec_all,
        "spec_observed": spec_obs, "spec_forecast": spec_fc,
        "coverage": coverage_rate(lo, hi, true_eta),
        "delta_h": score_curve(mean, true_eta).tolist(),
        "fi_width": width_curve(lo, hi).tolist(),
        "switch_time_pred": [None if np.isnan(v) else float(v)
                             for v in switch_times(pred_path)],
        "switch_time_true": [None if np.isnan(v) else float(v)
                             for v in switch_times(truth.latent.states)],
    }
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_csv(os.path.join(args.out, "curves.csv"),
              ["h", "delta_h", "fi_width"],
              [(h + 1, fmt(report["delta_h"][h]), fmt(report["fi_width"][h]))
               for h in range(h_max)])
    _write_resolved(cfg, args.out, "evaluate")
    print(f"evaluate: coverage {report['coverage']:.3f}, "
          f"overall sens/spec {sens_all:.3f}/{spec_all:.3f}")
    return 0


def cmd_replicate(args) -> int:
    cfg = load_config(args)
    workers = resolve_workers(args)
    rep = cfg["replicate"]
    mcmc = _mcmc_config(cfg, 0)  # per-replication seeds are derived inside
    report = replicate_study(
        n1_grid=rep["n1_grid"], nt_grid=rep["nt_grid"], r=int(rep["r"]),
        seed=int(cfg["seed"]), priors=_priors(cfg), mcmc=mcmc,
        forecast_config=_forecast_config(cfg), dist=_population(cfg),
        forecast_horizon=int(rep["forecast_horizon"]),
        rhat_threshold=float(rep["rhat_threshold"]), workers=workers,
        classify_threshold=float(cfg["forecast"]["classify_threshold"]),
        share_rows=bool(rep.get("share_rows", False)),
        progress=lambda label: print(f"  replication done: N_t={label[0]} "
                                     f"N_1={label[1]} rep={label[2]}",
                                     flush=True),
    )
    os.makedirs(args.out, exist_ok=True)
    header = ["n_t", "n_1", "r_completed", "sens_overall", "sens_observed",
              "sens_forecast", "spec_overall", "spec_observed",
              "spec_forecast", "coverage"]
    write_csv(os.path.join(args.out, "table.csv"), header,
              [[row["n_t"], row["n_1"], row["r_completed"]]
               + [fmt(row[k]) for k in header[3:]]
               for row in report.table_rows])
    curve_rows = []
    for (n_t, n_1), curves in sorted(report.curves.items()):
        for h in range(len(curves["delta_h"])):
            curve_rows.append((n_t, n_1, h + 1, fmt(curves["delta_h"][h]),
                               fmt(curves["fi_width"][h])))
    write_csv(os.path.join(args.out, "curves.csv"),
              ["n_t", "n_1", "h", "delta_h", "fi_width"], curve_rows)
    for metric in ("delta_h", "fi_width"):
        series = []
        xs = None
        for (n_t, n_1), curves in sorted(report.curves.items()):
            xs = list(range(1, len(curves[metric]) + 1))
            series.append({"y": np.asarray(curves[metric]).tolist(),
                           "name": f"N_t={n_t}, N_1={n_1}"})
        if xs:
            line_plot(os.path.join(args.out, f"{metric}.svg"), xs, series,
                      title=metric, x_label="forecast step h", y_label=metric)
    summary = {
        "failures": report.failures,
        "nonconverged": {f"{k[0]}x{k[1]}": v
                         for k, v in report.nonconverged.items()},
        "orderings": {
            "forecast_spec_below_observed": bool(all(
                row["spec_forecast"] < row["spec_observed"]
                for row in report.table_rows)),
            "fi_width_nondecreasing": bool(all(
                np.all(np.diff(c["fi_width"]) >= -1e-9)
                for c in report.curves.values())),
        },
        "table": report.table_rows,
    }
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(cfg, args.out, "replicate")
    for row in report.table_rows:
        print(f"N_t={row['n_t']} N_1={row['n_1']}: "
              f"sens {row['sens_overall']:.2f}/{row['sens_observed']:.2f}/"
              f"{row['sens_forecast']:.2f} "
              f"spec {row['spec_overall']:.2f}/{row['spec_observed']:.2f}/"
              f"{row['spec_forecast']:.2f} coverage {row['coverage']:.2f}")
    if report.failures:
        print(f"replicate: {len(report.failures)} replication(s) failed and "
              "were excluded", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regimecast",
        description="Regime-switching latent factor models: simulation, "
                    "estimation, forecasting, replication.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("fit", cmd_fit),
                     ("forecast", cmd_forecast), ("evaluate", cmd_evaluate),
                     ("replicate", cmd_replicate)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, help="master seed (mandatory here "
                                                "or in the config)")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default: ${ENV_WORKERS} or 1)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--half-data", action="store_true", dest="half_data",
                       help="fit on the first half of the occasions / "
                            "forecast the second half")
        if name in ("fit", "forecast", "evaluate"):
            p.add_argument("--data", help="dataset directory (from simulate)")
        if name in ("forecast", "evaluate"):
            p.add_argument("--fit", help="fit directory (from fit)")
        if name == "evaluate":
            p.add_argument("--truth", help="ground_truth.json path")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (UsageError, ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (SamplerError, FilterNumericError, NumericError,
            np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
