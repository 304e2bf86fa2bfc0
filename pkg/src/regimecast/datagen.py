"""Synthetic panel generation from the full generative model.

Used by the simulation-study harness and as the ground-truth oracle for
sampler/forecaster tests. Every replication draws its own parameter vector
from a population distribution (normal per scalar parameter), then generates
the panel by ancestral sampling through the model equations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    DROPOUT_NONE,
    Dataset,
    LatentState,
    ModelSpec,
    Parameters,
    SpecError,
    between_measurement_mean,
    person_effects,
    transition_matrix,
    within_measurement_mean,
)

__all__ = [
    "PopulationDistribution",
    "GroundTruth",
    "ConfigError",
    "NumericError",
    "sample_population_params",
    "generate_dataset",
    "inject_missingness",
]

MAX_REJECTS = 10_000


class ConfigError(ValueError):
    """Invalid generation configuration."""


class NumericError(RuntimeError):
    """A generated quantity became nonfinite."""


@dataclass(frozen=True)
class PopulationDistribution:
    """Per-parameter (mean, sd) pairs for population sampling.

    Defaults are the cross-scale means and standard deviations of the
    empirical estimates that calibrate the simulation (scalar parameters use
    their posterior mean and sd). Variance parameters are redrawn until
    positive; the regime-2 intercept is redrawn until it does not fall below
    regime 1; p12 is clamped to [0, 0.1].
    """

    lambda_within: tuple[float, float] = (1.02, 0.16)
    lambda_between: tuple[float, float] = (0.80, 0.56)
    b1_s1: tuple[float, float] = (0.31, 0.11)
    b1_s2: tuple[float, float] = (0.52, 0.14)
    b2: tuple[float, float] = (-0.68, 0.35)
    alpha_s1: tuple[float, float] = (0.02, 0.12)
    alpha_s2: tuple[float, float] = (0.33, 0.14)
    omega2_s1: tuple[float, float] = (0.07, 0.28)
    omega2_s2: tuple[float, float] = (0.20, 0.19)
    gamma1: tuple[float, float] = (1.48, 0.05)
    gamma2: tuple[float, float] = (-1.17, 0.79)
    gamma3: tuple[float, float] = (-0.19, 0.51)
    gamma4: tuple[float, float] = (-0.60, 0.36)
    var_zeta1: tuple[float, float] = (0.09, 0.05)
    var_zeta2: tuple[float, float] = (0.14, 0.03)
    var_zeta3: tuple[float, float] = (0.20, 0.05)
    var_eps1: tuple[float, float] = (0.38, 0.17)
    var_eps2: tuple[float, float] = (0.82, 0.10)
    p12: tuple[float, float] = (0.097, 0.0)

    def __post_init__(self):
        for name, (mean, sd) in self.__dict__.items():
            if sd < 0:
                raise ConfigError(f"{name}: sd must be >= 0")


@dataclass(frozen=True)
class GroundTruth:
    """Everything used to generate a dataset, including the holdout block.

    latent covers all n_occasions + forecast_horizon occasions; the last
    forecast_horizon of them are the holdout. holdout_items carries the item
    responses of the holdout occasions (never part of the Dataset).
    """

    params: Parameters
    latent: LatentState
    holdout_items: np.ndarray
    seed: int

    def holdout_eta1(self, spec: ModelSpec) -> np.ndarray:
        """(N, forecast_horizon, q) true factor scores of the holdout block."""
        return self.latent.eta1[:, spec.n_occasions:, :]

    def estimation_states(self, spec: ModelSpec) -> np.ndarray:
        return self.latent.states[:, :spec.n_occasions]

    def holdout_states(self, spec: ModelSpec) -> np.ndarray:
        return self.latent.states[:, spec.n_occasions:]


def _draw_positive(rng: np.random.Generator, mean: float, sd: float,
                   name: str) -> float:
    if sd == 0.0:
        if mean <= 0:
            raise ConfigError(f"{name}: degenerate draw at {mean} is not positive")
        return mean
    for _ in range(MAX_REJECTS):
        x = rng.normal(mean, sd)
        if x > 0:
            return x
    raise ConfigError(f"{name}: rejection sampling failed after {MAX_REJECTS} draws")


def sample_population_params(spec: ModelSpec, dist: PopulationDistribution,
                             seed: int, share_rows: bool = False) -> Parameters:
    """Draw one replication's parameter vector from the population.

    Each scalar parameter is an independent normal draw; variances are
    truncated to be positive, the regime-2 intercept is redrawn until the
    censoring constraint holds, and p12 is clamped to [0, 0.1].

    With share_rows=True each structural population row is drawn once and
    shared across the within factors (measurement rows stay per item): the
    replication then varies between-replication but is homogeneous across
    factors, the other defensible reading of sampling parameters "from
    normal distributions using these population values".
    """
    rng = np.random.default_rng(seed)
    q, big_j, j2 = spec.n_within_factors, spec.n_within_items, spec.n_between_items

    def row(pair, size, positive=False, name=""):
        n = 1 if share_rows else size
        if positive:
            vals = np.array([_draw_positive(rng, *pair, name=name)
                             for _ in range(n)])
        else:
            vals = rng.normal(*pair, size=n)
        return np.full(size, vals[0]) if share_rows else vals

    lam1 = rng.normal(*dist.lambda_within, size=big_j)
    lam1[spec.scaling_item_mask] = 1.0
    lam2 = rng.normal(*dist.lambda_between, size=j2)
    lam2[0] = 1.0

    alpha1 = row(dist.alpha_s1, q)
    alpha2 = row(dist.alpha_s2, q)
    tries = 0
    while np.any(alpha2 < alpha1):
        bad = alpha2 < alpha1
        fresh = row(dist.alpha_s2, q)
        alpha2 = np.where(bad, fresh, alpha2)
        tries += 1
        if tries > MAX_REJECTS:
            raise ConfigError("alpha_s2: censoring rejection failed")

    gamma4 = np.zeros(q)
    g4_shared = rng.normal(*dist.gamma4) if share_rows else None
    for j in spec.interaction_factor_indices:
        gamma4[j] = g4_shared if share_rows else rng.normal(*dist.gamma4)

    params = Parameters(
        lambda_within=lam1,
        lambda_between=lam2,
        alpha_state=np.stack([alpha1, alpha2]),
        b2=row(dist.b2, q),
        b1_state=np.stack([row(dist.b1_s1, q), row(dist.b1_s2, q)]),
        omega2_state=np.stack([row(dist.omega2_s1, q),
                               row(dist.omega2_s2, q)]),
        gamma1=rng.normal(*dist.gamma1),
        gamma2=rng.normal(*dist.gamma2),
        gamma3=row(dist.gamma3, q),
        gamma4=gamma4,
        var_zeta1=row(dist.var_zeta1, q, positive=True, name="var_zeta1"),
        var_zeta2=row(dist.var_zeta2, q, positive=True, name="var_zeta2"),
        var_zeta3=_draw_positive(rng, *dist.var_zeta3, name="var_zeta3"),
        var_eps1=np.array([_draw_positive(rng, *dist.var_eps1, name="var_eps1")
                           for _ in range(big_j)]),
        var_eps2=np.array([_draw_positive(rng, *dist.var_eps2, name="var_eps2")
                           for _ in range(j2)]),
        p12=float(np.clip(rng.normal(*dist.p12), 0.0, 0.1)),
    )
    params.validate(spec)
    return params


def generate_dataset(spec: ModelSpec, params: Parameters, seed: int,
                     dropout_run_length: int = 5):
    """Ancestral sampling of one panel; returns (Dataset, GroundTruth).

    Generates n_occasions + forecast_horizon occasions; the last
    forecast_horizon are held out of the Dataset and live only in the
    GroundTruth. A person whose regime stays 2 for dropout_run_length
    consecutive estimation occasions is marked as a manifest dropout from
    the occasion completing that run, making the regime observed thereafter.
    """
    params.validate(spec)
    rng = np.random.default_rng(seed)
    n, q = spec.n_persons, spec.n_within_factors
    t_total = spec.n_occasions + spec.forecast_horizon

    eta2 = rng.normal(0.0, np.sqrt(params.var_zeta3), size=n)
    zeta2 = rng.normal(0.0, np.sqrt(params.var_zeta2), size=(n, q))

    # Person effects per regime, fixed over time: (K, n, q) each.
    alpha_is = np.empty((2, n, q))
    b1_is = np.empty((2, n, q))
    for s in (1, 2):
        alpha_is[s - 1], b1_is[s - 1] = person_effects(params, s, eta2, zeta2)

    sd_z1 = np.sqrt(params.var_zeta1)
    states = np.empty((n, t_total), dtype=np.int8)
    eta1 = np.empty((n, t_total, q))
    dropout = np.full(n, DROPOUT_NONE, dtype=int)
    detect = dropout_run_length >= 1

    states[:, 0] = np.where(rng.random(n) < spec.p_initial_state1, 1, 2)
    s0 = states[:, 0] - 1
    eta1[:, 0, :] = alpha_is[s0, np.arange(n)] + rng.normal(0.0, 1.0, (n, q)) * sd_z1
    run2 = (states[:, 0] == 2).astype(int)
    if detect:
        dropout[(run2 >= dropout_run_length)] = 0

    for t in range(1, t_total):
        lag = eta1[:, t - 1, :]
        trans = transition_matrix(spec, params, eta2, lag)  # (n, 2, 2)
        prev = states[:, t - 1] - 1
        p_stay1 = trans[np.arange(n), prev, 0]
        drawn = np.where(rng.random(n) < p_stay1, 1, 2)
        # A manifest dropout cannot resume the study: the path stays at 2.
        states[:, t] = np.where(dropout != DROPOUT_NONE, 2, drawn)
        run2 = np.where(states[:, t] == 2, run2 + 1, 0)
        if detect and t < spec.n_occasions:
            hit = (run2 >= dropout_run_length) & (dropout == DROPOUT_NONE)
            dropout[hit] = t
        s = states[:, t] - 1
        mean = alpha_is[s, np.arange(n)] + b1_is[s, np.arange(n)] * lag
        eta1[:, t, :] = mean + rng.normal(0.0, 1.0, (n, q)) * sd_z1

    if not np.all(np.isfinite(eta1)):
        i, t, j = np.argwhere(~np.isfinite(eta1))[0]
        raise NumericError(f"nonfinite factor score at person {i}, occasion {t}, factor {j}")

    mean1 = within_measurement_mean(spec, params, eta1)  # (n, t_total, J)
    y1 = mean1 + rng.normal(0.0, 1.0, mean1.shape) * np.sqrt(params.var_eps1)
    mean2 = between_measurement_mean(params, eta2)
    y2 = mean2 + rng.normal(0.0, 1.0, mean2.shape) * np.sqrt(params.var_eps2)
    if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
        raise NumericError("nonfinite item response generated")

    dataset = Dataset(
        within_items=y1[:, :spec.n_occasions, :],
        between_items=y2,
        occasion_times=np.arange(spec.n_occasions),
        observed_dropout=dropout,
    )
    truth = GroundTruth(
        params=params,
        latent=LatentState(eta1=eta1, eta2=eta2, zeta2=zeta2, states=states),
        holdout_items=y1[:, spec.n_occasions:, :],
        seed=seed,
    )
    return dataset, truth


def inject_missingness(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Mark within-item cells missing completely at random at the given rate."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("missingness rate must lie in [0, 1)")
    if rate == 0.0:
        return dataset
    rng = np.random.default_rng(seed)
    items = dataset.within_items.copy()
    drop = rng.random(items.shape) < rate
    items[drop] = np.nan
    return Dataset(items, dataset.between_items, dataset.occasion_times,
                   dataset.observed_dropout)
