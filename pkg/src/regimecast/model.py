"""Core model: domain types and the structural/measurement/switching equations.

Two-level dynamic latent factor model with discrete regimes. Within-person
factor trajectories follow a regime-specific AR(1) whose intercepts and AR
coefficients are moderated by a stable person-level factor; regime
transitions follow a Markov switching model with a logistic stay probability
driven by the lagged within factors, the person factor, and their
interactions.

All functions here are pure and operate on immutable inputs; they are shared
by the data generator, the MCMC sampler, and the forecaster. Regime values
are 1-based (1 = baseline regime, 2 = switched regime); occasion indices in
arrays are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ModelSpec",
    "Parameters",
    "Dataset",
    "LatentState",
    "SpecError",
    "within_measurement_mean",
    "between_measurement_mean",
    "within_structural_mean",
    "person_effects",
    "switch_logit",
    "stay_probability",
    "transition_matrix",
    "insert_phantom_occasions",
    "preprocess_items",
]


class SpecError(ValueError):
    """Raised when inputs violate the model specification."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and structure of the model.

    Attributes
    ----------
    n_within_factors:
        Number of within-person latent factors (q).
    items_per_within_factor:
        Items loading on each within factor (simple structure: every item
        belongs to exactly one factor; the first item of each factor is the
        scaling item with loading fixed to 1).
    n_between_items:
        Number of baseline indicator items for the person-level factor.
    n_states:
        Number of discrete regimes K (the switching equations require K=2).
    interaction_factor_indices:
        0-based indices of within factors whose lagged values interact with
        the person factor in the switching equation.
    n_persons, n_occasions, forecast_horizon:
        Panel dimensions: persons, estimation occasions, held-out horizon.
    p_initial_state1:
        Probability that a person starts in regime 1 at the first occasion.
        Default 1.0: everyone starts in the baseline regime.
    """

    n_within_factors: int
    items_per_within_factor: tuple[int, ...]
    n_between_items: int
    n_states: int
    interaction_factor_indices: tuple[int, ...]
    n_persons: int
    n_occasions: int
    forecast_horizon: int
    p_initial_state1: float = 1.0

    def __post_init__(self):
        object.__setattr__(
            self, "items_per_within_factor", tuple(int(m) for m in self.items_per_within_factor)
        )
        object.__setattr__(
            self, "interaction_factor_indices",
            tuple(int(i) for i in self.interaction_factor_indices),
        )
        counts = (
            self.n_within_factors, self.n_between_items, self.n_states,
            self.n_persons, self.n_occasions,
        )
        if any(c < 1 for c in counts):
            raise SpecError("all counts must be >= 1")
        if self.forecast_horizon < 0:
            raise SpecError("forecast_horizon must be >= 0")
        if len(self.items_per_within_factor) != self.n_within_factors:
            raise SpecError("items_per_within_factor length must equal n_within_factors")
        if any(m < 1 for m in self.items_per_within_factor):
            raise SpecError("every factor needs at least one item")
        if any(not 0 <= i < self.n_within_factors for i in self.interaction_factor_indices):
            raise SpecError("interaction_factor_indices out of range")
        if len(set(self.interaction_factor_indices)) != len(self.interaction_factor_indices):
            raise SpecError("interaction_factor_indices must be unique")
        if not 0.0 <= self.p_initial_state1 <= 1.0:
            raise SpecError("p_initial_state1 must be a probability")

    @property
    def n_within_items(self) -> int:
        return int(sum(self.items_per_within_factor))

    @property
    def item_factor(self) -> np.ndarray:
        """0-based factor index of each within item, shape (n_within_items,)."""
        return np.repeat(np.arange(self.n_within_factors),
                         np.asarray(self.items_per_within_factor))

    @property
    def scaling_item_mask(self) -> np.ndarray:
        """Boolean mask of scaling items (first item per factor), shape (n_within_items,)."""
        mask = np.zeros(self.n_within_items, dtype=bool)
        mask[np.cumsum((0,) + self.items_per_within_factor[:-1])] = True
        return mask

    @property
    def interaction_mask(self) -> np.ndarray:
        """Boolean mask over factors that enter the switching interaction."""
        mask = np.zeros(self.n_within_factors, dtype=bool)
        mask[list(self.interaction_factor_indices)] = True
        return mask


def simulation_spec(n_persons: int = 25, n_occasions: int = 25,
                    forecast_horizon: int = 10) -> ModelSpec:
    """The 3-factor, 3-items-per-factor configuration used in simulations."""
    return ModelSpec(
        n_within_factors=3,
        items_per_within_factor=(3, 3, 3),
        n_between_items=3,
        n_states=2,
        interaction_factor_indices=(0, 1, 2),
        n_persons=n_persons,
        n_occasions=n_occasions,
        forecast_horizon=forecast_horizon,
    )


@dataclass(frozen=True)
class Parameters:
    """All model coefficients and variances.

    Shapes (q = n_within_factors, J = n_within_items, J2 = n_between_items,
    K = n_states):

    - lambda_within: (J,) per-item loading; scaling items fixed to 1
    - lambda_between: (J2,) with the first entry fixed to 1
    - alpha_state: (K, q) regime-specific structural intercepts
    - b2: (q,) main effect of the person factor on the within factors
    - b1_state: (K, q) diagonal AR coefficients per regime
    - omega2_state: (K, q) diagonal cross-level interaction per regime
    - gamma1, gamma2: scalars (switch intercept, person-factor effect)
    - gamma3: (q,) lagged within-factor effects on the stay logit
    - gamma4: (q,) interaction effects, nonzero only at interaction factors
    - var_zeta1: (q,) within structural residual variances
    - var_zeta2: (q,) person-level random intercept variances
    - var_zeta3: scalar variance of the person factor
    - var_eps1: (J,) within item residual variances
    - var_eps2: (J2,) baseline item residual variances
    - p12: probability of switching back from regime 2 to regime 1
    """

    lambda_within: np.ndarray
    lambda_between: np.ndarray
    alpha_state: np.ndarray
    b2: np.ndarray
    b1_state: np.ndarray
    omega2_state: np.ndarray
    gamma1: float
    gamma2: float
    gamma3: np.ndarray
    gamma4: np.ndarray
    var_zeta1: np.ndarray
    var_zeta2: np.ndarray
    var_zeta3: float
    var_eps1: np.ndarray
    var_eps2: np.ndarray
    p12: float

    def __post_init__(self):
        for name in ("lambda_within", "lambda_between", "alpha_state", "b2",
                     "b1_state", "omega2_state", "gamma3", "gamma4",
                     "var_zeta1", "var_zeta2", "var_eps1", "var_eps2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "gamma1", float(self.gamma1))
        object.__setattr__(self, "gamma2", float(self.gamma2))
        object.__setattr__(self, "var_zeta3", float(self.var_zeta3))
        object.__setattr__(self, "p12", float(self.p12))

    @property
    def delta_alpha(self) -> np.ndarray:
        """Regime-2 intercept lift, alpha_state[1] - alpha_state[0] (>= 0)."""
        return self.alpha_state[1] - self.alpha_state[0]

    def validate(self, spec: ModelSpec) -> None:
        """Check dimensions and invariants against a spec; raise SpecError."""
        q, J, J2, K = (spec.n_within_factors, spec.n_within_items,
                       spec.n_between_items, spec.n_states)
        shapes = {
            "lambda_within": (J,), "lambda_between": (J2,),
            "alpha_state": (K, q), "b2": (q,), "b1_state": (K, q),
            "omega2_state": (K, q), "gamma3": (q,), "gamma4": (q,),
            "var_zeta1": (q,), "var_zeta2": (q,), "var_eps1": (J,),
            "var_eps2": (J2,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise SpecError(f"{name} has shape {got}, expected {want}")
        for name in ("var_zeta1", "var_zeta2", "var_eps1", "var_eps2"):
            if not np.all(getattr(self, name) > 0):
                raise SpecError(f"{name} must be strictly positive")
        if not self.var_zeta3 > 0:
            raise SpecError("var_zeta3 must be strictly positive")
        if K >= 2 and np.any(self.delta_alpha < 0):
            raise SpecError("regime-2 intercepts must not fall below regime-1 (censoring)")
        if not 0.0 <= self.p12 <= 0.1:
            raise SpecError("p12 must lie in [0, 0.1]")
        if not np.allclose(self.lambda_within[spec.scaling_item_mask], 1.0):
            raise SpecError("scaling loadings must be fixed to 1")
        if not np.isclose(self.lambda_between[0], 1.0):
            raise SpecError("first baseline loading must be fixed to 1")
        off = ~spec.interaction_mask
        if np.any(self.gamma4[off] != 0.0):
            raise SpecError("gamma4 must be zero outside interaction_factor_indices")

    def loading_matrix(self, spec: ModelSpec) -> np.ndarray:
        """Materialize the (J, q) simple-structure loading matrix."""
        lam = np.zeros((spec.n_within_items, spec.n_within_factors))
        lam[np.arange(spec.n_within_items), spec.item_factor] = self.lambda_within
        return lam


DROPOUT_NONE = -1  # sentinel in Dataset.observed_dropout


@dataclass(frozen=True)
class Dataset:
    """A person x occasion panel of item responses.

    - within_items: (N, T, J) float, NaN marks missing cells. Phantom
      occasions are rows of all-NaN.
    - between_items: (N, J2) float, NaN allowed.
    - occasion_times: (T,) strictly increasing calendar indices; after
      phantom expansion this is an equidistant grid.
    - observed_dropout: (N,) int, 0-based occasion from which the regime is
      observed to be 2, or DROPOUT_NONE.
    """

    within_items: np.ndarray
    between_items: np.ndarray
    occasion_times: np.ndarray
    observed_dropout: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "within_items", np.asarray(self.within_items, dtype=float))
        object.__setattr__(self, "between_items", np.asarray(self.between_items, dtype=float))
        object.__setattr__(self, "occasion_times", np.asarray(self.occasion_times))
        object.__setattr__(self, "observed_dropout",
                           np.asarray(self.observed_dropout, dtype=int))
        if self.within_items.ndim != 3:
            raise SpecError("within_items must be (persons, occasions, items)")
        n, t = self.within_items.shape[:2]
        if self.between_items.shape[0] != n or self.observed_dropout.shape != (n,):
            raise SpecError("person dimensions disagree")
        if self.occasion_times.shape != (t,):
            raise SpecError("occasion_times length must match occasions")
        if t > 1 and not np.all(np.diff(self.occasion_times) > 0):
            raise SpecError("occasion_times must be strictly increasing")
        bad = (self.observed_dropout != DROPOUT_NONE) & (
            (self.observed_dropout < 0) | (self.observed_dropout >= t))
        if np.any(bad):
            raise SpecError("dropout indices must lie in [0, n_occasions)")

    @property
    def n_persons(self) -> int:
        return self.within_items.shape[0]

    @property
    def n_occasions(self) -> int:
        return self.within_items.shape[1]

    def clamp_mask(self) -> np.ndarray:
        """(N, T) bool: cells at/after an observed dropout (regime fixed at 2)."""
        t_idx = np.arange(self.n_occasions)[None, :]
        drop = self.observed_dropout[:, None]
        return (drop != DROPOUT_NONE) & (t_idx >= drop)

    def slice_occasions(self, n_keep: int) -> "Dataset":
        """First n_keep occasions; dropout markers not yet manifest are removed."""
        if not 1 <= n_keep <= self.n_occasions:
            raise SpecError("n_keep out of range")
        drop = self.observed_dropout.copy()
        drop[(drop != DROPOUT_NONE) & (drop >= n_keep)] = DROPOUT_NONE
        return Dataset(self.within_items[:, :n_keep], self.between_items,
                       self.occasion_times[:n_keep], drop)


@dataclass(frozen=True)
class LatentState:
    """Latent variables of the full model.

    - eta1: (N, T, q) within factor scores
    - eta2: (N,) person factor scores
    - zeta2: (N, q) person-level random intercept residuals
    - states: (N, T) int regimes in {1..K}
    """

    eta1: np.ndarray
    eta2: np.ndarray
    zeta2: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta1", np.asarray(self.eta1, dtype=float))
        object.__setattr__(self, "eta2", np.asarray(self.eta2, dtype=float))
        object.__setattr__(self, "zeta2", np.asarray(self.zeta2, dtype=float))
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int8))

    def validate(self, spec: ModelSpec,
                 observed_dropout: Optional[np.ndarray] = None) -> None:
        n, t, q = self.eta1.shape
        if q != spec.n_within_factors or n != spec.n_persons:
            raise SpecError("eta1 dimensions disagree with spec")
        if self.eta2.shape != (n,) or self.zeta2.shape != (n, q):
            raise SpecError("eta2/zeta2 dimensions disagree")
        if self.states.shape != (n, t):
            raise SpecError("states dimensions disagree")
        if self.states.min() < 1 or self.states.max() > spec.n_states:
            raise SpecError("states must lie in {1..K}")
        if observed_dropout is not None:
            t_idx = np.arange(t)[None, :]
            clamp = (observed_dropout[:, None] != DROPOUT_NONE) & (
                t_idx >= observed_dropout[:, None])
            if np.any(self.states[clamp] != 2):
                raise SpecError("states must be 2 at and after an observed dropout")


# ---------------------------------------------------------------------------
# Model equations
# ---------------------------------------------------------------------------

def within_measurement_mean(spec: ModelSpec, params: Parameters,
                            eta1_it: np.ndarray) -> np.ndarray:
    """Expected within-item vector given factor scores (regime-invariant).

    eta1_it may carry leading batch dimensions; the trailing axis must be the
    factor axis.
    """
    eta1_it = np.asarray(eta1_it, dtype=float)
    if eta1_it.shape[-1] != spec.n_within_factors:
        raise SpecError("factor vector has wrong length")
    return params.lambda_within * eta1_it[..., spec.item_factor]


def between_measurement_mean(params: Parameters, eta2_i) -> np.ndarray:
    """Expected baseline-item vector given the person factor score."""
    eta2_i = np.asarray(eta2_i, dtype=float)
    return params.lambda_between * eta2_i[..., None]


def within_structural_mean(alpha1_is: np.ndarray, b1_is: np.ndarray,
                           eta1_lag: np.ndarray) -> np.ndarray:
    """AR(1) conditional mean: alpha1_is + diag(b1_is) @ eta1_lag."""
    alpha1_is = np.asarray(alpha1_is, dtype=float)
    b1_is = np.asarray(b1_is, dtype=float)
    eta1_lag = np.asarray(eta1_lag, dtype=float)
    if not (alpha1_is.shape[-1] == b1_is.shape[-1] == eta1_lag.shape[-1]):
        raise SpecError("factor dimensions disagree")
    return alpha1_is + b1_is * eta1_lag


def person_effects(params: Parameters, s: int, eta2_i, zeta2_i):
    """Person-specific intercepts and AR coefficients in regime s.

    Returns (alpha1_is, b1_is): the intercept vector
    alpha_state[s] + b2 * eta2 + zeta2 and the diagonal AR coefficients
    b1_state[s] + omega2_state[s] * eta2. Broadcasts over leading axes of
    eta2_i / zeta2_i.
    """
    if not 1 <= s <= params.alpha_state.shape[0]:
        raise SpecError(f"regime {s} out of range")
    eta2_i = np.asarray(eta2_i, dtype=float)
    zeta2_i = np.asarray(zeta2_i, dtype=float)
    alpha = params.alpha_state[s - 1] + params.b2 * eta2_i[..., None] + zeta2_i
    b1 = params.b1_state[s - 1] + params.omega2_state[s - 1] * eta2_i[..., None]
    return alpha, b1


def switch_logit(params: Parameters, eta2_i, eta1_lag: np.ndarray):
    """Logit of staying in regime 1: gamma1 + gamma2*eta2 + Gamma3'lag + Gamma4'(lag*eta2)."""
    eta2_i = np.asarray(eta2_i, dtype=float)
    eta1_lag = np.asarray(eta1_lag, dtype=float)
    main = eta1_lag @ params.gamma3
    inter = (eta1_lag @ params.gamma4) * eta2_i
    return params.gamma1 + params.gamma2 * eta2_i + main + inter


def stay_probability(nu_vector: np.ndarray) -> np.ndarray:
    """Softmax over regime logits; overflow-safe via max subtraction.

    The trailing axis indexes regimes. For K=2 the competing regime's logit
    is fixed at 0 by convention, making the first component the logistic of
    the stay logit.
    """
    nu = np.asarray(nu_vector, dtype=float)
    if not np.all(np.isfinite(nu)):
        raise SpecError("switch logits must be finite")
    shifted = nu - nu.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def transition_matrix(spec: ModelSpec, params: Parameters, eta2_i,
                      eta1_lag: np.ndarray) -> np.ndarray:
    """Row-stochastic K x K regime transition matrix (K=2).

    Row 1 is (stay, 1-stay) with the stay probability from the switching
    model; row 2 is (p12, 1-p12). Broadcasts: with batched inputs the result
    has shape (..., 2, 2).
    """
    if spec.n_states != 2:
        raise SpecError("transition_matrix requires K=2")
    nu = switch_logit(params, eta2_i, eta1_lag)
    nu = np.asarray(nu, dtype=float)
    two = np.stack([nu, np.zeros_like(nu)], axis=-1)
    stay = stay_probability(two)[..., 0]
    out = np.empty(np.shape(stay) + (2, 2))
    out[..., 0, 0] = stay
    out[..., 0, 1] = 1.0 - stay
    out[..., 1, 0] = params.p12
    out[..., 1, 1] = 1.0 - params.p12
    return out


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

def insert_phantom_occasions(within_items: np.ndarray,
                             occasion_times: Sequence[int]):
    """Expand unequal calendar gaps to an equidistant grid.

    Inserts all-missing phantom rows wherever consecutive occasion_times
    differ by more than the smallest gap. Returns (expanded_items,
    expanded_times, phantom_mask).
    """
    times = np.asarray(occasion_times)
    if times.ndim != 1 or times.shape[0] != within_items.shape[1]:
        raise SpecError("occasion_times must match the occasion axis")
    if np.any(np.diff(times) <= 0):
        raise SpecError("occasion_times must be strictly increasing")
    if len(times) < 2:
        return within_items.copy(), times.copy(), np.zeros(len(times), dtype=bool)
    step = int(np.min(np.diff(times)))
    grid = np.arange(times[0], times[-1] + 1, step)
    if np.any((times - times[0]) % step != 0):
        raise SpecError("occasion_times are not expressible on an equidistant grid")
    n, _, j = within_items.shape
    expanded = np.full((n, len(grid), j), np.nan)
    pos = ((times - times[0]) // step).astype(int)
    expanded[:, pos, :] = within_items
    phantom = np.ones(len(grid), dtype=bool)
    phantom[pos] = False
    return expanded, grid, phantom


def preprocess_items(within_items: np.ndarray,
                     invert_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Center items at their first-occasion mean and sign-invert flagged items.

    Direction flags are a data-configuration concern; pass the mask from the
    run config. Missing cells stay missing.
    """
    out = np.array(within_items, dtype=float)
    if invert_mask is not None:
        invert_mask = np.asarray(invert_mask, dtype=bool)
        out[:, :, invert_mask] *= -1.0
    with np.errstate(invalid="ignore"):
        first = np.nanmean(out[:, 0, :], axis=0)  # (J,)
    first = np.where(np.isfinite(first), first, 0.0)
    return out - first[None, None, :]
