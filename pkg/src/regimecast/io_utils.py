"""Deterministic file persistence: CSV, JSON manifests, latent-draw archives.

CSV floats are written with repr (shortest round-trip form), JSON with
sorted keys; reruns under the same seed produce byte-identical files.
Person, occasion, and item identifiers are 1-based in files and 0-based in
memory.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Optional

import numpy as np

from .datagen import GroundTruth
from .ffbs import ForecastResult
from .model import DROPOUT_NONE, Dataset, LatentState, ModelSpec, Parameters
from .sampler import McmcConfig, PosteriorDraws, PriorConfig

__all__ = [
    "fmt",
    "write_csv",
    "save_dataset",
    "load_dataset",
    "save_ground_truth",
    "load_ground_truth",
    "save_draws",
    "load_draws",
    "save_forecast",
]


def fmt(x) -> str:
    """Round-trip-exact float formatting; empty string for NaN."""
    x = float(x)
    if np.isnan(x):
        return ""
    return repr(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "n_within_factors": spec.n_within_factors,
        "items_per_within_factor": list(spec.items_per_within_factor),
        "n_between_items": spec.n_between_items,
        "n_states": spec.n_states,
        "interaction_factor_indices": list(spec.interaction_factor_indices),
        "n_persons": spec.n_persons,
        "n_occasions": spec.n_occasions,
        "forecast_horizon": spec.forecast_horizon,
        "p_initial_state1": spec.p_initial_state1,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        n_within_factors=d["n_within_factors"],
        items_per_within_factor=tuple(d["items_per_within_factor"]),
        n_between_items=d["n_between_items"],
        n_states=d["n_states"],
        interaction_factor_indices=tuple(d["interaction_factor_indices"]),
        n_persons=d["n_persons"],
        n_occasions=d["n_occasions"],
        forecast_horizon=d["forecast_horizon"],
        p_initial_state1=d.get("p_initial_state1", 1.0),
    )


def params_to_dict(params: Parameters) -> dict:
    out = {}
    for name in ("lambda_within", "lambda_between", "alpha_state", "b2",
                 "b1_state", "omega2_state", "gamma3", "gamma4", "var_zeta1",
                 "var_zeta2", "var_eps1", "var_eps2"):
        out[name] = getattr(params, name).tolist()
    out["gamma1"] = params.gamma1
    out["gamma2"] = params.gamma2
    out["var_zeta3"] = params.var_zeta3
    out["p12"] = params.p12
    return out


def params_from_dict(d: dict) -> Parameters:
    arrays = {k: np.array(v) for k, v in d.items()
              if k not in ("gamma1", "gamma2", "var_zeta3", "p12")}
    return Parameters(gamma1=d["gamma1"], gamma2=d["gamma2"],
                      var_zeta3=d["var_zeta3"], p12=d["p12"], **arrays)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, spec: ModelSpec, out_dir, meta: dict):
    """Write dataset.csv (long format), dataset_between.csv, and a sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    n, t, j = dataset.within_items.shape
    for i in range(n):
        for tt in range(t):
            for k in range(j):
                rows.append((i + 1, tt + 1, k + 1,
                             fmt(dataset.within_items[i, tt, k])))
    write_csv(os.path.join(out_dir, "dataset.csv"),
              ["person_id", "occasion", "item_id", "value"], rows)
    rows2 = [(i + 1, k + 1, fmt(dataset.between_items[i, k]))
             for i in range(n) for k in range(dataset.between_items.shape[1])]
    write_csv(os.path.join(out_dir, "dataset_between.csv"),
              ["person_id", "item_id", "value"], rows2)
    sidecar = {
        "spec": spec_to_dict(spec),
        "occasion_times": np.asarray(dataset.occasion_times).tolist(),
        "observed_dropout": [int(x) + 1 if x != DROPOUT_NONE else None
                             for x in dataset.observed_dropout],
    }
    sidecar.update(meta)
    _write_json(os.path.join(out_dir, "dataset_meta.json"), sidecar)


def load_dataset(in_dir):
    """Read a dataset directory back; returns (Dataset, ModelSpec, meta)."""
    with open(os.path.join(in_dir, "dataset_meta.json")) as fh:
        meta = json.load(fh)
    spec = spec_from_dict(meta["spec"])
    times = np.array(meta["occasion_times"])
    n, t, j = spec.n_persons, len(times), spec.n_within_items
    within = np.full((n, t, j), np.nan)
    with open(os.path.join(in_dir, "dataset.csv")) as fh:
        for row in csv.DictReader(fh):
            if row["value"] != "":
                within[int(row["person_id"]) - 1, int(row["occasion"]) - 1,
                       int(row["item_id"]) - 1] = float(row["value"])
    between = np.full((n, spec.n_between_items), np.nan)
    with open(os.path.join(in_dir, "dataset_between.csv")) as fh:
        for row in csv.DictReader(fh):
            if row["value"] != "":
                between[int(row["person_id"]) - 1,
                        int(row["item_id"]) - 1] = float(row["value"])
    dropout = np.array([DROPOUT_NONE if d is None else int(d) - 1
                        for d in meta["observed_dropout"]])
    return Dataset(within, between, times, dropout), spec, meta


def save_ground_truth(truth: GroundTruth, path):
    payload = {
        "seed": truth.seed,
        "params": params_to_dict(truth.params),
        "eta1": truth.latent.eta1.tolist(),
        "eta2": truth.latent.eta2.tolist(),
        "zeta2": truth.latent.zeta2.tolist(),
        "states": truth.latent.states.tolist(),
        "holdout_items": truth.holdout_items.tolist(),
    }
    _write_json(path, payload)


def load_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        d = json.load(fh)
    latent = LatentState(eta1=np.array(d["eta1"]), eta2=np.array(d["eta2"]),
                         zeta2=np.array(d["zeta2"]),
                         states=np.array(d["states"], dtype=np.int8))
    return GroundTruth(params=params_from_dict(d["params"]), latent=latent,
                       holdout_items=np.array(d["holdout_items"]),
                       seed=d["seed"])


# ---------------------------------------------------------------------------
# Posterior draws
# ---------------------------------------------------------------------------

def save_draws(draws: PosteriorDraws, out_dir, manifest_extra: Optional[dict] = None):
    """Columnar CSV per chain, latent archives, manifest, summary table."""
    from .sampler import summarize
    os.makedirs(out_dir, exist_ok=True)
    names = draws.parameter_names()
    for c in range(draws.n_chains):
        cols = [draws.component(name)[c] for name in names]
        rows = [[it + 1] + [fmt(col[it]) for col in cols]
                for it in range(draws.n_kept)]
        write_csv(os.path.join(out_dir, f"chain_{c:02d}.csv"),
                  ["iteration"] + names, rows)
        extra = {}
        if draws.state2_smoothed is not None:
            extra["state2_smoothed"] = draws.state2_smoothed[c]
        np.savez_compressed(
            os.path.join(out_dir, f"latents_{c:02d}.npz"),
            eta1=draws.eta1[c], eta2=draws.eta2[c], zeta2=draws.zeta2[c],
            states=draws.states[c],
            latent_param_index=draws.latent_param_index, **extra)
    summary = summarize(draws)
    write_csv(os.path.join(out_dir, "summary.csv"),
              ["parameter", "mean", "sd", "q2.5", "q97.5", "rhat"],
              [[r["parameter"], fmt(r["mean"]), fmt(r["sd"]), fmt(r["q2.5"]),
                fmt(r["q97.5"]),
                "NA" if not np.isfinite(r["rhat"]) else fmt(r["rhat"])]
               for r in summary])
    rhat_vals = [r["rhat"] for r in summary if np.isfinite(r["rhat"])]
    manifest = {
        "n_chains": draws.n_chains,
        "n_kept": draws.n_kept,
        "seed": draws.config.seed,
        "n_iterations": draws.config.n_iterations,
        "n_burnin": draws.config.n_burnin,
        "thinning": draws.config.thinning,
        "latent_thin": draws.config.latent_thin,
        "eta1_sampler": draws.config.eta1_sampler,
        "acceptance": draws.acceptance,
        "max_rhat": max(rhat_vals) if rhat_vals else None,
        "spec": spec_to_dict(draws.spec),
        "priors": {
            "coef_mean": draws.priors.coef_mean,
            "coef_sd": draws.priors.coef_sd,
            "loading_mean": draws.priors.loading_mean,
            "loading_sd": draws.priors.loading_sd,
            "gamma_shape": draws.priors.gamma_shape,
            "gamma_rate": draws.priors.gamma_rate,
            "p12_upper": draws.priors.p12_upper,
        },
    }
    manifest.update(manifest_extra or {})
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def load_draws(in_dir) -> PosteriorDraws:
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec = spec_from_dict(manifest["spec"])
    priors = PriorConfig(**manifest["priors"])
    config = McmcConfig(
        n_chains=manifest["n_chains"], n_iterations=manifest["n_iterations"],
        n_burnin=manifest["n_burnin"], thinning=manifest["thinning"],
        seed=manifest["seed"], latent_thin=manifest["latent_thin"],
        eta1_sampler=manifest["eta1_sampler"],
    )
    n_chains = manifest["n_chains"]
    params: dict = {}
    chains_cols = []
    for c in range(n_chains):
        with open(os.path.join(in_dir, f"chain_{c:02d}.csv")) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(v) for v in row[1:]] for row in reader])
        chains_cols.append((header[1:], data))
    names = chains_cols[0][0]
    bases: dict = {}
    for idx, name in enumerate(names):
        base = name.split("[")[0]
        bases.setdefault(base, []).append(idx)
    for base, idxs in bases.items():
        stacked = np.stack([cols[1][:, idxs] for cols in chains_cols])
        params[base] = stacked[:, :, 0] if len(idxs) == 1 and "[" not in names[idxs[0]] \
            else stacked
    lat = [np.load(os.path.join(in_dir, f"latents_{c:02d}.npz"))
           for c in range(n_chains)]
    smoothed = None
    if "state2_smoothed" in lat[0]:
        smoothed = np.stack([l["state2_smoothed"] for l in lat])
    return PosteriorDraws(
        spec=spec, params=params,
        eta1=np.stack([l["eta1"] for l in lat]),
        eta2=np.stack([l["eta2"] for l in lat]),
        zeta2=np.stack([l["zeta2"] for l in lat]),
        states=np.stack([l["states"] for l in lat]),
        latent_param_index=lat[0]["latent_param_index"],
        acceptance=manifest["acceptance"],
        config=config, priors=priors,
        state2_smoothed=smoothed,
    )


# ---------------------------------------------------------------------------
# Forecast results
# ---------------------------------------------------------------------------

def save_forecast(result: ForecastResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rows = [
        (int(result.person[i]) + 1, int(result.factor[i]) + 1,
         int(result.horizon[i]), fmt(result.mean[i]), fmt(result.variance[i]),
         fmt(result.lower[i]), fmt(result.upper[i]), fmt(result.p_state2[i]))
        for i in range(result.person.shape[0])
    ]
    write_csv(os.path.join(out_dir, "forecast.csv"),
              ["person", "factor", "h", "mean", "var", "lo", "hi", "p_state2"],
              rows)
    n, t, q = result.smoothed.shape
    rows = [(i + 1, j + 1, tt + 1, fmt(result.smoothed[i, tt, j]),
             fmt(result.state_prob_in_sample[i, tt]))
            for i in range(n) for j in range(q) for tt in range(t)]
    write_csv(os.path.join(out_dir, "smoothed.csv"),
              ["person", "factor", "occasion", "mean", "p_state2"], rows)
