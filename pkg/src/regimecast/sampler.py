"""Metropolis-within-Gibbs estimation of the regime-switching factor model.

Block structure per sweep: person factor scores (independence MH with a
conjugate Gaussian proposal), random intercepts (conjugate), within factor
trajectories (forward-filter backward-sample proposals per factor with a
Metropolis correction for the regime-transition feedback, or single-site
Gibbs), regime paths (exact discrete forward-backward draw), measurement and
structural coefficients (conjugate normal / truncated normal), precisions
(conjugate gamma), and the switching coefficients (adaptive random-walk
Metropolis per sub-block) with the switchback probability drawn from a
truncated beta.

Priors: standard normal on coefficients, positivity-truncated standard
normal on free loadings and the regime-2 intercept lift, Gamma(9, 4) on all
precisions, uniform(0, 0.1) on the switchback probability. All
hyperparameters are overridable through PriorConfig.

With `likelihood_disabled` every block draws from its prior (data and
cross-block contributions are dropped), which makes prior-recovery checks
exact block by block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.special import betainc, betaincinv, log_expit, ndtr, ndtri

from .model import Dataset, ModelSpec, Parameters, SpecError

__all__ = [
    "PriorConfig",
    "McmcConfig",
    "PosteriorDraws",
    "SamplerError",
    "run_mcmc",
    "rhat",
    "summarize",
    "normal_regression_posterior",
    "gamma_posterior_params",
]


class SamplerError(RuntimeError):
    """Numeric failure inside the sampler (named by block)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the prior distributions."""

    coef_mean: float = 0.0
    coef_sd: float = 1.0
    loading_mean: float = 0.0
    loading_sd: float = 1.0       # positivity-truncated for free loadings
    gamma_shape: float = 9.0      # on precisions
    gamma_rate: float = 4.0
    p12_upper: float = 0.1        # uniform(0, p12_upper) switchback prior

    def __post_init__(self):
        if self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise SpecError("gamma hyperparameters must be positive")
        if self.coef_sd <= 0 or self.loading_sd <= 0:
            raise SpecError("prior sds must be positive")
        if not 0 < self.p12_upper <= 1:
            raise SpecError("p12_upper must lie in (0, 1]")


@dataclass(frozen=True)
class McmcConfig:
    """Sampler run settings.

    eta1_sampler selects the trajectory block: "ffbs" (block draw) or
    "single_site". latent_thin stores latent draws every latent_thin-th kept
    iteration. frozen_blocks names blocks to skip (testing hook);
    likelihood_disabled switches every block to its prior.
    """

    n_chains: int = 2
    n_iterations: int = 4000
    n_burnin: int = 2000
    thinning: int = 1
    seed: int = 20_240_101
    latent_thin: int = 10
    eta1_sampler: str = "ffbs"
    proposal_scale: float = 0.3
    adapt_window: int = 25
    adapt_target: float = 0.35
    likelihood_disabled: bool = False
    frozen_blocks: frozenset = frozenset()

    def __post_init__(self):
        if self.n_burnin >= self.n_iterations:
            raise SpecError("burnin must be smaller than n_iterations")
        if self.n_chains < 1:
            raise SpecError("need at least one chain")
        if self.thinning < 1 or self.latent_thin < 1:
            raise SpecError("thinning intervals must be >= 1")
        if self.eta1_sampler not in ("ffbs", "single_site"):
            raise SpecError("eta1_sampler must be 'ffbs' or 'single_site'")
        object.__setattr__(self, "frozen_blocks", frozenset(self.frozen_blocks))


# parameter name -> (kind, dimension key); order fixes the summary layout
_PARAM_LAYOUT = (
    ("alpha_s1", "q"), ("b2", "q"), ("b1_s1", "q"), ("omega2_s1", "q"),
    ("delta_alpha", "q"), ("delta_b1", "q"), ("delta_omega2", "q"),
    ("var_zeta1", "q"), ("var_zeta2", "q"), ("var_zeta3", "scalar"),
    ("p12", "scalar"),
    ("gamma1", "scalar"), ("gamma2", "scalar"), ("gamma3", "q"), ("gamma4", "q"),
    ("lambda_within", "J"), ("lambda_between", "J2"),
    ("var_eps1", "J"), ("var_eps2", "J2"),
)


@dataclass
class PosteriorDraws:
    """Post-burnin draws of parameters and (thinned) latent variables.

    params: name -> array (n_chains, n_kept) or (n_chains, n_kept, dim).
    Latent arrays share the leading (n_chains, n_latent_kept) axes.
    latent_param_index maps each latent draw to its kept-iteration index.
    """

    spec: ModelSpec
    params: dict
    eta1: np.ndarray
    eta2: np.ndarray
    zeta2: np.ndarray
    states: np.ndarray
    latent_param_index: np.ndarray
    acceptance: dict
    config: McmcConfig
    priors: PriorConfig
    state2_smoothed: Optional[np.ndarray] = None  # (n_chains, N, T) RB marginals

    @property
    def n_chains(self) -> int:
        return self.eta1.shape[0]

    @property
    def n_kept(self) -> int:
        return self.params["p12"].shape[1]

    def parameter_names(self) -> list:
        """Flattened parameter names in the summary-table row order."""
        names = []
        for name, kind in _PARAM_LAYOUT:
            if kind == "scalar":
                names.append(name)
            else:
                dim = self.params[name].shape[2]
                names.extend(f"{name}[{i + 1}]" for i in range(dim))
        return names

    def component(self, name: str) -> np.ndarray:
        """(n_chains, n_kept) draws of one flattened parameter component."""
        if "[" in name:
            base, idx = name[:-1].split("[")
            return self.params[base][:, :, int(idx) - 1]
        arr = self.params[name]
        if arr.ndim != 2:
            raise KeyError(f"{name} is vector-valued; index it like {name}[1]")
        return arr

    def parameters_at(self, chain: int, kept_index: int) -> Parameters:
        """Materialize a Parameters object from one kept draw."""
        p = {k: v[chain, kept_index] for k, v in self.params.items()}
        alpha1 = p["alpha_s1"]
        return Parameters(
            lambda_within=p["lambda_within"],
            lambda_between=p["lambda_between"],
            alpha_state=np.stack([alpha1, alpha1 + p["delta_alpha"]]),
            b2=p["b2"],
            b1_state=np.stack([p["b1_s1"], p["b1_s1"] + p["delta_b1"]]),
            omega2_state=np.stack([p["omega2_s1"],
                                   p["omega2_s1"] + p["delta_omega2"]]),
            gamma1=p["gamma1"], gamma2=p["gamma2"],
            gamma3=p["gamma3"], gamma4=p["gamma4"],
            var_zeta1=p["var_zeta1"], var_zeta2=p["var_zeta2"],
            var_zeta3=p["var_zeta3"],
            var_eps1=p["var_eps1"], var_eps2=p["var_eps2"],
            p12=p["p12"],
        )

    def iter_latent_draws(self) -> Iterator[dict]:
        """Yield per-draw dicts: params, eta1, eta2, zeta2, states."""
        for c in range(self.n_chains):
            for d in range(self.eta1.shape[1]):
                yield {
                    "params": self.parameters_at(c, int(self.latent_param_index[d])),
                    "eta1": self.eta1[c, d],
                    "eta2": self.eta2[c, d],
                    "zeta2": self.zeta2[c, d],
                    "states": self.states[c, d],
                }

    def state2_probability(self) -> np.ndarray:
        """(N, T) posterior probability of regime 2.

        Uses the Rao-Blackwellized smoothed marginals accumulated over every
        post-burnin sweep when available, falling back to the frequency of
        the stored (thinned) state draws.
        """
        if self.state2_smoothed is not None:
            return self.state2_smoothed.mean(axis=0)
        return (self.states == 2).mean(axis=(0, 1))

    def validate_invariants(self, priors: Optional[PriorConfig] = None) -> None:
        priors = priors or self.priors
        if np.any(self.params["delta_alpha"] < 0):
            raise SamplerError("stored draw violates delta_alpha >= 0")
        p12 = self.params["p12"]
        if np.any((p12 < 0) | (p12 > priors.p12_upper)):
            raise SamplerError("stored draw violates the p12 range")
        for name in ("var_zeta1", "var_zeta2", "var_zeta3", "var_eps1", "var_eps2"):
            if np.any(self.params[name] <= 0):
                raise SamplerError(f"stored draw violates {name} > 0")


# ---------------------------------------------------------------------------
# Conjugate building blocks
# ---------------------------------------------------------------------------

def _posterior_from_stats(prior_mean, prior_var, prec_stat, num_stat):
    """Normal posterior (mean, var) from precision/score statistics."""
    prec = 1.0 / prior_var + prec_stat
    mean = (prior_mean / prior_var + num_stat) / prec
    return mean, 1.0 / prec


def normal_regression_posterior(prior_mean, prior_var, x, y, noise_var):
    """Textbook scalar-coefficient regression posterior for y = theta*x + e."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return _posterior_from_stats(prior_mean, prior_var,
                                 np.sum(x * x) / noise_var,
                                 np.sum(x * y) / noise_var)


def gamma_posterior_params(shape, rate, residuals):
    """Gamma posterior (shape, rate) on a precision given normal residuals."""
    residuals = np.asarray(residuals, dtype=float)
    return shape + residuals.size / 2.0, rate + np.sum(residuals ** 2) / 2.0


def _sample_trunc_normal_scalar(rng, mean, sd, low=0.0):
    """Lower-truncated normal draw; exponential rejection deep in the tail."""
    a = (low - mean) / sd
    if a < 4.0:
        base = ndtr(a)
        u = base + (1.0 - base) * rng.random()
        u = min(u, 1.0 - 1e-16)
        return mean + sd * ndtri(u)
    # Robert's exponential-proposal rejection for far tails.
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    for _ in range(10_000):
        x = a + rng.exponential(1.0 / lam)
        if rng.random() <= np.exp(-0.5 * (x - lam) ** 2):
            return mean + sd * x
    raise SamplerError("truncated normal rejection failed")


def _sample_trunc_beta(rng, a, b, upper):
    """Beta(a, b) draw truncated to [0, upper] via the inverse CDF."""
    cap = betainc(a, b, upper)
    if cap <= 1e-300:
        return upper * (1.0 - 1e-12)
    u = rng.random() * cap
    return float(betaincinv(a, b, u))


# ---------------------------------------------------------------------------
# Chain state
# ---------------------------------------------------------------------------

_MH_BLOCKS = ("gamma1", "gamma2", "gamma3", "gamma4", "eta1", "eta2")


class _ChainState:
    """Mutable state of one MCMC chain."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, priors: PriorConfig,
                 config: McmcConfig, rng: np.random.Generator):
        self.spec = spec
        self.priors = priors
        self.config = config
        self.rng = rng
        n, t, q = spec.n_persons, dataset.n_occasions, spec.n_within_factors
        self.N, self.T, self.q = n, t, q
        self.J, self.J2 = spec.n_within_items, spec.n_between_items

        self.obs1 = np.isfinite(dataset.within_items)
        self.y1 = np.where(self.obs1, dataset.within_items, 0.0)
        self.obs2 = np.isfinite(dataset.between_items)
        self.y2 = np.where(self.obs2, dataset.between_items, 0.0)
        self.clamp2 = dataset.clamp_mask()
        self.item_factor = spec.item_factor
        self.scaling = spec.scaling_item_mask
        self.factor_onehot = np.zeros((self.J, q))
        self.factor_onehot[np.arange(self.J), self.item_factor] = 1.0
        self.interaction = spec.interaction_mask

        # parameters
        self.lam1 = np.ones(self.J)
        self.lam2 = np.ones(self.J2)
        self.alpha_base = np.zeros(q)
        self.delta_alpha = np.full(q, 0.3)
        self.b2 = np.zeros(q)
        self.b1_base = np.full(q, 0.3)
        self.delta_b1 = np.full(q, 0.1)
        self.om_base = np.zeros(q)
        self.delta_om = np.zeros(q)
        self.g1 = 1.5
        self.g2 = 0.0
        self.g3 = np.full(q, -0.5)
        self.g4 = np.where(self.interaction, -0.5, 0.0)
        self.var_z1 = np.full(q, 0.1)
        self.var_z2 = np.full(q, 0.1)
        self.var_z3 = 0.2
        self.var_e1 = np.full(self.J, 0.4)
        self.var_e2 = np.full(self.J2, 0.8)
        self.p12 = 0.05

        # latents, initialized from per-factor item means
        sums = np.einsum("ntj,jq->ntq", self.y1 * self.obs1, self.factor_onehot)
        cnts = np.einsum("ntj,jq->ntq", self.obs1.astype(float), self.factor_onehot)
        self.eta1 = np.where(cnts > 0, sums / np.maximum(cnts, 1.0), 0.0)
        row2 = np.where(self.obs2.any(axis=1),
                        (self.y2 * self.obs2).sum(axis=1)
                        / np.maximum(self.obs2.sum(axis=1), 1), 0.0)
        self.eta2 = 0.5 * row2
        self.zeta2 = np.zeros((n, q))
        self.S = np.ones((n, t), dtype=np.int8)
        self.S[self.clamp2] = 2

        # overdispersed starting points across chains
        self.alpha_base += 0.2 * rng.standard_normal(q)
        self.b2 += 0.3 * rng.standard_normal(q)
        self.g1 += 0.3 * rng.standard_normal()
        self.g3 += 0.3 * rng.standard_normal(q)
        self.eta2 += 0.1 * rng.standard_normal(n)

        self.scales = {name: config.proposal_scale for name in
                       ("gamma1", "gamma2")}
        self.scales.update({f"gamma3[{j}]": config.proposal_scale for j in range(q)})
        self.scales.update({f"gamma4[{j}]": config.proposal_scale
                            for j in range(q) if self.interaction[j]})
        self.accept = {k: [0, 0] for k in list(self.scales) + ["eta1", "eta2"]}

    # -- derived quantities ------------------------------------------------

    @property
    def sidx(self):
        return self.S - 1  # (N, T) in {0, 1}

    def alpha_state(self):
        return np.stack([self.alpha_base, self.alpha_base + self.delta_alpha])

    def b1_state(self):
        return np.stack([self.b1_base, self.b1_base + self.delta_b1])

    def om_state(self):
        return np.stack([self.om_base, self.om_base + self.delta_om])

    def lag_arrays(self):
        """eta_lag zeroed at t=0 and a 0/1 mask for t >= 1."""
        lag = np.zeros_like(self.eta1)
        lag[:, 1:, :] = self.eta1[:, :-1, :]
        has_lag = np.zeros((self.N, self.T, 1))
        has_lag[:, 1:, :] = 1.0
        return lag, has_lag

    def structural_design(self):
        """A1, B1_eff, lag: mean = A1 + B1_eff * lag elementwise (N, T, q)."""
        lag, has_lag = self.lag_arrays()
        s = self.sidx
        A1 = (self.alpha_state()[s] + self.b2 * self.eta2[:, None, None]
              + self.zeta2[:, None, :])
        B1 = (self.b1_state()[s] + self.om_state()[s] * self.eta2[:, None, None])
        return A1, B1 * has_lag, lag

    def nu_matrix(self, eta2=None):
        """Stay logits for transitions into occasions 1..T-1: (N, T-1)."""
        eta2 = self.eta2 if eta2 is None else eta2
        lags = self.eta1[:, :-1, :]
        return (self.g1 + self.g2 * eta2[:, None]
                + lags @ self.g3 + (lags @ self.g4) * eta2[:, None])

    def transition_loglik(self, nu, per_person=False):
        """Switching log likelihood over transitions out of regime 1."""
        from1 = self.S[:, :-1] == 1
        to1 = self.S[:, 1:] == 1
        terms = np.where(to1, log_expit(nu), log_expit(-nu))
        terms = np.where(from1, terms, 0.0)
        return terms.sum(axis=1) if per_person else terms.sum()

    def current_parameters(self) -> Parameters:
        return Parameters(
            lambda_within=self.lam1.copy(), lambda_between=self.lam2.copy(),
            alpha_state=self.alpha_state(), b2=self.b2.copy(),
            b1_state=self.b1_state(), omega2_state=self.om_state(),
            gamma1=self.g1, gamma2=self.g2, gamma3=self.g3.copy(),
            gamma4=self.g4.copy(), var_zeta1=self.var_z1.copy(),
            var_zeta2=self.var_z2.copy(), var_zeta3=self.var_z3,
            var_eps1=self.var_e1.copy(), var_eps2=self.var_e2.copy(),
            p12=self.p12,
        )

    # -- measurement statistics ---------------------------------------------

    def item_precisions(self):
        """Per-(person, occasion, factor) measurement precision and score."""
        if self.config.likelihood_disabled:
            z = np.zeros((self.N, self.T, self.q))
            return z, z.copy()
        w = self.lam1 ** 2 / self.var_e1
        prec = np.einsum("ntj,j,jq->ntq", self.obs1, w, self.factor_onehot)
        num = np.einsum("ntj,j,jq->ntq", self.obs1 * self.y1,
                        self.lam1 / self.var_e1, self.factor_onehot)
        return prec, num

    # -- latent blocks -------------------------------------------------------

    def sample_eta2_block(self):
        if "eta2" in self.config.frozen_blocks:
            return
        disabled = self.config.likelihood_disabled
        prec = np.full(self.N, 1.0 / self.var_z3)
        num = np.zeros(self.N)
        if not disabled:
            w2 = self.lam2 ** 2 / self.var_e2
            prec += self.obs2 @ w2
            num += (self.obs2 * self.y2) @ (self.lam2 / self.var_e2)
            lag, has_lag = self.lag_arrays()
            s = self.sidx
            coef = self.b2[None, None, :] + self.om_state()[s] * lag * has_lag
            resid = (self.eta1 - self.alpha_state()[s] - self.zeta2[:, None, :]
                     - self.b1_state()[s] * lag * has_lag)
            prec += np.einsum("ntq,ntq,q->n", coef, coef, 1.0 / self.var_z1)
            num += np.einsum("ntq,ntq,q->n", coef, resid, 1.0 / self.var_z1)
        mean = num / prec
        sd = np.sqrt(1.0 / prec)
        prop = mean + sd * self.rng.standard_normal(self.N)
        if disabled:
            self.eta2 = prop
            return
        cur_ll = self.transition_loglik(self.nu_matrix(), per_person=True)
        prop_ll = self.transition_loglik(self.nu_matrix(eta2=prop), per_person=True)
        accept = np.log(self.rng.random(self.N)) < (prop_ll - cur_ll)
        self.eta2 = np.where(accept, prop, self.eta2)
        self.accept["eta2"][0] += int(accept.sum())
        self.accept["eta2"][1] += self.N

    def sample_zeta2_block(self):
        if "zeta2" in self.config.frozen_blocks:
            return
        prec = np.ones((self.N, self.q)) / self.var_z2
        num = np.zeros((self.N, self.q))
        if not self.config.likelihood_disabled:
            lag, has_lag = self.lag_arrays()
            s = self.sidx
            resid = (self.eta1 - self.alpha_state()[s]
                     - self.b2 * self.eta2[:, None, None]
                     - (self.b1_state()[s] + self.om_state()[s]
                        * self.eta2[:, None, None]) * lag * has_lag)
            prec += self.T / self.var_z1
            num += resid.sum(axis=1) / self.var_z1
        mean = num / prec
        self.zeta2 = mean + np.sqrt(1.0 / prec) * self.rng.standard_normal((self.N, self.q))

    def sample_eta1_block(self):
        if "eta1" in self.config.frozen_blocks:
            return
        if self.config.eta1_sampler == "ffbs":
            self._eta1_ffbs()
        else:
            self._eta1_single_site()

    def _eta1_ffbs(self):
        """Per-factor FFBS proposal with a Metropolis correction for the
        regime-transition feedback; exact when no transition leaves regime 1."""
        prec_obs, num_obs = self.item_precisions()
        s = self.sidx
        alpha_is = (self.alpha_state()[s] + self.b2 * self.eta2[:, None, None]
                    + self.zeta2[:, None, :])                       # (N,T,q)
        b_is = (self.b1_state()[s] + self.om_state()[s]
                * self.eta2[:, None, None])                          # (N,T,q)
        from1 = self.S[:, :-1] == 1
        to1 = self.S[:, 1:] == 1
        nu = self.nu_matrix()
        for j in range(self.q):
            var_z = self.var_z1[j]
            m = np.empty((self.N, self.T))
            C = np.empty((self.N, self.T))
            a = np.empty((self.N, self.T))
            R = np.empty((self.N, self.T))
            for t in range(self.T):
                if t == 0:
                    a[:, 0] = alpha_is[:, 0, j]
                    R[:, 0] = var_z
                else:
                    a[:, t] = alpha_is[:, t, j] + b_is[:, t, j] * m[:, t - 1]
                    R[:, t] = b_is[:, t, j] ** 2 * C[:, t - 1] + var_z
                prec = 1.0 / R[:, t] + prec_obs[:, t, j]
                C[:, t] = 1.0 / prec
                m[:, t] = (a[:, t] / R[:, t] + num_obs[:, t, j]) * C[:, t]
            prop = np.empty((self.N, self.T))
            prop[:, -1] = m[:, -1] + np.sqrt(C[:, -1]) * self.rng.standard_normal(self.N)
            for t in range(self.T - 2, -1, -1):
                gain = C[:, t] * b_is[:, t + 1, j] / R[:, t + 1]
                mean = m[:, t] + gain * (prop[:, t + 1] - a[:, t + 1])
                var = np.maximum(C[:, t] - gain ** 2 * R[:, t + 1], 0.0)
                prop[:, t] = mean + np.sqrt(var) * self.rng.standard_normal(self.N)
            # Metropolis correction: transitions out of regime 1 depend on the
            # lagged factor score through the stay logit.
            coef = self.g3[j] + self.g4[j] * self.eta2          # (N,)
            dnu = coef[:, None] * (prop[:, :-1] - self.eta1[:, :-1, j])
            nu_new = nu + dnu
            delta = np.where(to1, log_expit(nu_new) - log_expit(nu),
                             log_expit(-nu_new) - log_expit(-nu))
            delta = np.where(from1, delta, 0.0).sum(axis=1)
            accept = np.log(self.rng.random(self.N)) < delta
            self.eta1[accept, :, j] = prop[accept]
            nu = np.where(accept[:, None], nu_new, nu)
            self.accept["eta1"][0] += int(accept.sum())
            self.accept["eta1"][1] += self.N

    def _eta1_single_site(self):
        """Sequential single-site conditional draws with the same Metropolis
        correction; slower mixing, identical target."""
        prec_obs, num_obs = self.item_precisions()
        s = self.sidx
        alpha_is = (self.alpha_state()[s] + self.b2 * self.eta2[:, None, None]
                    + self.zeta2[:, None, :])
        b_is = (self.b1_state()[s] + self.om_state()[s]
                * self.eta2[:, None, None])
        from1 = self.S[:, :-1] == 1
        to1 = self.S[:, 1:] == 1
        var_z = self.var_z1
        for t in range(self.T):
            for j in range(self.q):
                prec = prec_obs[:, t, j].copy()
                num = num_obs[:, t, j].copy()
                if t == 0:
                    prec += 1.0 / var_z[j]
                    num += alpha_is[:, 0, j] / var_z[j]
                else:
                    mean_t = alpha_is[:, t, j] + b_is[:, t, j] * self.eta1[:, t - 1, j]
                    prec += 1.0 / var_z[j]
                    num += mean_t / var_z[j]
                if t + 1 < self.T:
                    b_next = b_is[:, t + 1, j]
                    resid_next = (self.eta1[:, t + 1, j] - alpha_is[:, t + 1, j])
                    prec += b_next ** 2 / var_z[j]
                    num += b_next * resid_next / var_z[j]
                cvar = 1.0 / prec
                prop = num * cvar + np.sqrt(cvar) * self.rng.standard_normal(self.N)
                if t + 1 < self.T:
                    coef = self.g3[j] + self.g4[j] * self.eta2
                    lags = self.eta1[:, t, :]
                    nu_cur = (self.g1 + self.g2 * self.eta2 + lags @ self.g3
                              + (lags @ self.g4) * self.eta2)
                    nu_new = nu_cur + coef * (prop - self.eta1[:, t, j])
                    delta = np.where(to1[:, t],
                                     log_expit(nu_new) - log_expit(nu_cur),
                                     log_expit(-nu_new) - log_expit(-nu_cur))
                    delta = np.where(from1[:, t], delta, 0.0)
                    accept = np.log(self.rng.random(self.N)) < delta
                else:
                    accept = np.ones(self.N, dtype=bool)
                self.eta1[accept, t, j] = prop[accept]

    def sample_states_block(self, want_marginals: bool = False):
        if "states" in self.config.frozen_blocks:
            return None
        N, T = self.N, self.T
        lag, has_lag = self.lag_arrays()
        alpha = self.alpha_state()       # (2, q)
        b1 = self.b1_state()
        om = self.om_state()
        log_emit = np.empty((N, T, 2))
        for s in range(2):
            mean = (alpha[s] + self.b2 * self.eta2[:, None, None]
                    + self.zeta2[:, None, :]
                    + (b1[s] + om[s] * self.eta2[:, None, None]) * lag * has_lag)
            resid = self.eta1 - mean
            log_emit[:, :, s] = -0.5 * np.sum(
                np.log(2 * np.pi * self.var_z1) + resid ** 2 / self.var_z1, axis=2)
        nu = self.nu_matrix()
        log_trans = np.empty((N, T - 1, 2, 2))
        log_trans[:, :, 0, 0] = log_expit(nu)
        log_trans[:, :, 0, 1] = log_expit(-nu)
        with np.errstate(divide="ignore"):
            log_trans[:, :, 1, 0] = np.log(self.p12)
            log_trans[:, :, 1, 1] = np.log1p(-self.p12)

        neg_inf = -np.inf
        # observed regimes enter as emission-side impossibility of regime 1
        log_emit[:, :, 0] = np.where(self.clamp2, neg_inf, log_emit[:, :, 0])
        log_f = np.empty((N, T, 2))
        p_init = self.spec.p_initial_state1
        with np.errstate(divide="ignore"):
            log_f[:, 0, 0] = np.log(p_init) + log_emit[:, 0, 0]
            log_f[:, 0, 1] = np.log1p(-p_init) + log_emit[:, 0, 1]
        if np.any(self.clamp2[:, 0]):
            # an observed dropout at the first occasion overrides the start prior
            log_f[:, 0, 1] = np.where(
                self.clamp2[:, 0], log_emit[:, 0, 1], log_f[:, 0, 1])
        for t in range(1, T):
            prev = log_f[:, t - 1, :, None] + log_trans[:, t - 1]   # (N, 2, 2)
            mx = prev.max(axis=1)
            mx = np.where(np.isfinite(mx), mx, 0.0)
            summed = mx + np.log(np.exp(prev - mx[:, None, :]).sum(axis=1))
            log_f[:, t] = summed + log_emit[:, t]

        draws = np.empty((N, T), dtype=np.int8)
        last = _sample_from_log_weights(self.rng, log_f[:, -1, :])
        draws[:, -1] = last + 1
        for t in range(T - 2, -1, -1):
            nxt = draws[:, t + 1] - 1
            lw = log_f[:, t, :] + log_trans[np.arange(N), t, :, nxt]
            draws[:, t] = _sample_from_log_weights(self.rng, lw) + 1
        draws[self.clamp2] = 2
        self.S = draws

        if not want_marginals:
            return None
        # Exact smoothed regime marginals for Rao-Blackwellized summaries.
        log_b = np.zeros((N, T, 2))
        for t in range(T - 2, -1, -1):
            nxt = log_trans[:, t] + log_b[:, t + 1, None, :] + log_emit[:, t + 1, None, :]
            mx = nxt.max(axis=2)
            mx = np.where(np.isfinite(mx), mx, 0.0)
            log_b[:, t] = mx + np.log(np.exp(nxt - mx[:, :, None]).sum(axis=2))
        lp = log_f + log_b
        mx = lp.max(axis=2, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        post = np.exp(lp - mx)
        post /= post.sum(axis=2, keepdims=True)
        return post[:, :, 1]

    # -- coefficient blocks ---------------------------------------------------

    def _normal_coef_draw(self, prec_stat, num_stat, mean0, sd0,
                          truncated=False):
        mean, var = _posterior_from_stats(mean0, sd0 ** 2, prec_stat, num_stat)
        if truncated:
            return _sample_trunc_normal_scalar(self.rng, mean, np.sqrt(var), 0.0)
        return mean + np.sqrt(var) * self.rng.standard_normal()

    def _gamma_var_draw(self, residuals):
        pr = self.priors
        if self.config.likelihood_disabled:
            shape, rate = pr.gamma_shape, pr.gamma_rate
        else:
            shape, rate = gamma_posterior_params(pr.gamma_shape, pr.gamma_rate,
                                                 residuals)
        prec = self.rng.gamma(shape, 1.0 / rate)
        if prec <= 0 or not np.isfinite(prec):
            raise SamplerError("precision draw failed (gamma block)")
        return 1.0 / prec

    def sample_measurement_block(self):
        if "measurement" in self.config.frozen_blocks:
            return
        disabled = self.config.likelihood_disabled
        x_items = self.eta1[:, :, self.item_factor]                  # (N,T,J)
        for k in range(self.J):
            if not self.scaling[k]:
                if disabled:
                    self.lam1[k] = _sample_trunc_normal_scalar(
                        self.rng, self.priors.loading_mean,
                        self.priors.loading_sd, 0.0)
                else:
                    x = x_items[:, :, k]
                    mask = self.obs1[:, :, k]
                    sxx = np.sum(mask * x * x) / self.var_e1[k]
                    sxy = np.sum(mask * x * self.y1[:, :, k]) / self.var_e1[k]
                    self.lam1[k] = self._normal_coef_draw(
                        sxx, sxy, self.priors.loading_mean,
                        self.priors.loading_sd, truncated=True)
            resid = (self.y1[:, :, k] - self.lam1[k] * x_items[:, :, k])[self.obs1[:, :, k]]
            self.var_e1[k] = self._gamma_var_draw(resid)
        for k in range(self.J2):
            if k > 0:
                if disabled:
                    self.lam2[k] = _sample_trunc_normal_scalar(
                        self.rng, self.priors.loading_mean,
                        self.priors.loading_sd, 0.0)
                else:
                    mask = self.obs2[:, k]
                    sxx = np.sum(mask * self.eta2 ** 2) / self.var_e2[k]
                    sxy = np.sum(mask * self.eta2 * self.y2[:, k]) / self.var_e2[k]
                    self.lam2[k] = self._normal_coef_draw(
                        sxx, sxy, self.priors.loading_mean,
                        self.priors.loading_sd, truncated=True)
            resid = (self.y2[:, k] - self.lam2[k] * self.eta2)[self.obs2[:, k]]
            self.var_e2[k] = self._gamma_var_draw(resid)

    def sample_coefficients_block(self):
        """Structural intercepts, lifts, main effects, AR and interaction
        coefficients, then the structural variances."""
        if "coefficients" in self.config.frozen_blocks:
            return
        disabled = self.config.likelihood_disabled
        lag, has_lag = self.lag_arrays()
        lag = lag * has_lag                     # zero at t=0
        s = self.sidx
        is2 = (s == 1).astype(float)            # (N, T)
        eta2_b = self.eta2[:, None]             # (N, 1) broadcast over T

        for j in range(self.q):
            lj = lag[:, :, j]
            y = self.eta1[:, :, j]
            zj = self.zeta2[:, [j]]
            vz = self.var_z1[j]

            def draw(regressor, others, truncated=False):
                if disabled:
                    if truncated:
                        return _sample_trunc_normal_scalar(
                            self.rng, self.priors.coef_mean,
                            self.priors.coef_sd, 0.0)
                    return (self.priors.coef_mean
                            + self.priors.coef_sd * self.rng.standard_normal())
                resid = y - others
                prec = np.sum(regressor * regressor) / vz
                num = np.sum(regressor * resid) / vz
                return self._normal_coef_draw(
                    prec, num, self.priors.coef_mean, self.priors.coef_sd,
                    truncated=truncated)

            b1_term = lambda: (self.b1_base[j] + self.delta_b1[j] * is2
                               + (self.om_base[j] + self.delta_om[j] * is2)
                               * eta2_b) * lj
            base_mean = lambda: (self.alpha_base[j] + self.delta_alpha[j] * is2
                                 + self.b2[j] * eta2_b + zj)

            ones = np.ones_like(y)
            self.alpha_base[j] = draw(
                ones, self.delta_alpha[j] * is2 + self.b2[j] * eta2_b + zj + b1_term())
            self.delta_alpha[j] = draw(
                is2, self.alpha_base[j] + self.b2[j] * eta2_b + zj + b1_term(),
                truncated=True)
            self.b2[j] = draw(
                eta2_b * ones,
                self.alpha_base[j] + self.delta_alpha[j] * is2 + zj + b1_term())
            self.b1_base[j] = draw(
                lj, base_mean() + (self.delta_b1[j] * is2
                                   + (self.om_base[j] + self.delta_om[j] * is2)
                                   * eta2_b) * lj)
            self.delta_b1[j] = draw(
                is2 * lj, base_mean() + (self.b1_base[j]
                                         + (self.om_base[j] + self.delta_om[j] * is2)
                                         * eta2_b) * lj)
            self.om_base[j] = draw(
                eta2_b * lj, base_mean() + (self.b1_base[j] + self.delta_b1[j] * is2
                                            + self.delta_om[j] * is2 * eta2_b) * lj)
            self.delta_om[j] = draw(
                is2 * eta2_b * lj,
                base_mean() + (self.b1_base[j] + self.delta_b1[j] * is2
                               + self.om_base[j] * eta2_b) * lj)
            resid = y - base_mean() - b1_term()
            self.var_z1[j] = self._gamma_var_draw(resid)

        for j in range(self.q):
            self.var_z2[j] = self._gamma_var_draw(
                np.zeros(0) if disabled else self.zeta2[:, j])
        self.var_z3 = self._gamma_var_draw(
            np.zeros(0) if disabled else self.eta2)

    def sample_switch_block(self, adapt: bool):
        if "switch" in self.config.frozen_blocks:
            return
        disabled = self.config.likelihood_disabled
        nu = self.nu_matrix()
        ll = 0.0 if disabled else self.transition_loglik(nu)
        sd0 = self.priors.coef_sd
        mean0 = self.priors.coef_mean

        def mh_step(name, value, regressor):
            nonlocal nu, ll
            scale = self.scales[name]
            prop = value + scale * self.rng.standard_normal()
            if disabled:
                dll = 0.0
                nu_new = nu
            else:
                nu_new = nu + (prop - value) * regressor
                dll = self.transition_loglik(nu_new) - ll
            dlp = (-0.5 * ((prop - mean0) ** 2 - (value - mean0) ** 2) / sd0 ** 2)
            self.accept[name][1] += 1
            if np.log(self.rng.random()) < dll + dlp:
                self.accept[name][0] += 1
                if not disabled:
                    nu, ll = nu_new, ll + dll
                return prop
            return value

        ones = np.ones((self.N, self.T - 1))
        self.g1 = mh_step("gamma1", self.g1, ones)
        self.g2 = mh_step("gamma2", self.g2, self.eta2[:, None] * ones)
        lags = self.eta1[:, :-1, :]
        for j in range(self.q):
            self.g3[j] = mh_step(f"gamma3[{j}]", self.g3[j], lags[:, :, j])
        for j in range(self.q):
            if self.interaction[j]:
                self.g4[j] = mh_step(f"gamma4[{j}]", self.g4[j],
                                     lags[:, :, j] * self.eta2[:, None])

        if adapt:
            for name in self.scales:
                acc, tot = self.accept[name]
                if tot >= self.config.adapt_window:
                    rate = acc / tot
                    self.scales[name] = float(np.clip(
                        self.scales[name]
                        * np.exp(0.66 * (rate - self.config.adapt_target)),
                        1e-3, 10.0))
                    self.accept[name] = [0, 0]

        if disabled:
            self.p12 = self.priors.p12_upper * self.rng.random()
        else:
            from2 = self.S[:, :-1] == 2
            n21 = int(np.sum(from2 & (self.S[:, 1:] == 1)))
            n22 = int(np.sum(from2 & (self.S[:, 1:] == 2)))
            self.p12 = _sample_trunc_beta(self.rng, 1.0 + n21, 1.0 + n22,
                                          self.priors.p12_upper)

    def sweep(self, adapt: bool, want_state_marginals: bool = False):
        self.sample_eta2_block()
        self.sample_zeta2_block()
        self.sample_eta1_block()
        marginals = self.sample_states_block(want_marginals=want_state_marginals)
        self.sample_measurement_block()
        self.sample_coefficients_block()
        self.sample_switch_block(adapt)
        return marginals

    def param_snapshot(self):
        return {
            "alpha_s1": self.alpha_base.copy(), "b2": self.b2.copy(),
            "b1_s1": self.b1_base.copy(), "omega2_s1": self.om_base.copy(),
            "delta_alpha": self.delta_alpha.copy(),
            "delta_b1": self.delta_b1.copy(),
            "delta_omega2": self.delta_om.copy(),
            "var_zeta1": self.var_z1.copy(), "var_zeta2": self.var_z2.copy(),
            "var_zeta3": self.var_z3, "p12": self.p12,
            "gamma1": self.g1, "gamma2": self.g2,
            "gamma3": self.g3.copy(), "gamma4": self.g4.copy(),
            "lambda_within": self.lam1.copy(),
            "lambda_between": self.lam2.copy(),
            "var_eps1": self.var_e1.copy(), "var_eps2": self.var_e2.copy(),
        }


def _sample_from_log_weights(rng, log_w):
    """Categorical draw per row of (N, K) log weights."""
    mx = log_w.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    w = np.exp(log_w - mx)
    total = w.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(total[:, 0]) | (total[:, 0] <= 0)
    if np.any(bad):
        w[bad] = 1.0
        total = w.sum(axis=1, keepdims=True)
    cdf = np.cumsum(w / total, axis=1)
    u = rng.random((log_w.shape[0], 1))
    return (u > cdf[:, :-1]).sum(axis=1)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _run_chain(dataset, spec, priors, config, chain_seed):
    rng = np.random.default_rng(chain_seed)
    state = _ChainState(dataset, spec, priors, config, rng)
    snaps = []
    lat_eta1, lat_eta2, lat_zeta2, lat_states, lat_index = [], [], [], [], []
    marg_sum = np.zeros((state.N, state.T))
    marg_count = 0
    k = 0
    for it in range(config.n_iterations):
        post = it >= config.n_burnin
        marginals = state.sweep(adapt=not post, want_state_marginals=post)
        if post and marginals is not None:
            marg_sum += marginals
            marg_count += 1
        if post and (it - config.n_burnin) % config.thinning == 0:
            snaps.append(state.param_snapshot())
            if k % config.latent_thin == 0:
                lat_eta1.append(state.eta1.copy())
                lat_eta2.append(state.eta2.copy())
                lat_zeta2.append(state.zeta2.copy())
                lat_states.append(state.S.copy())
                lat_index.append(k)
            k += 1
    acc = {name: (c[0] / c[1] if c[1] else np.nan)
           for name, c in state.accept.items()}
    marg = marg_sum / marg_count if marg_count else None
    return snaps, lat_eta1, lat_eta2, lat_zeta2, lat_states, lat_index, acc, marg


def run_mcmc(dataset: Dataset, spec: ModelSpec, priors: PriorConfig,
             config: McmcConfig, workers: int = 1) -> PosteriorDraws:
    """Run the full sampler; draws are deterministic given config.seed.

    Chains are independent (seeded from spawned SeedSequences) and can run
    in separate processes when workers > 1; assembly order is fixed by chain
    index either way.
    """
    if dataset.within_items.shape[2] != spec.n_within_items:
        raise SpecError("dataset item dimension disagrees with spec")
    if dataset.n_persons != spec.n_persons:
        raise SpecError("dataset person dimension disagrees with spec")
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    args = [(dataset, spec, priors, config, seeds[c])
            for c in range(config.n_chains)]
    if workers > 1 and config.n_chains > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(min(workers, config.n_chains)) as pool:
            results = pool.starmap(_run_chain, args)
    else:
        results = [_run_chain(*a) for a in args]

    params = {}
    first = results[0][0]
    for name in first[0]:
        stacked = [np.stack([np.asarray(snap[name]) for snap in chain[0]])
                   for chain in results]
        params[name] = np.stack(stacked)
    if results[0][7] is None:
        smoothed = None
    else:
        smoothed = np.stack([r[7] for r in results])
    draws = PosteriorDraws(
        spec=spec,
        params=params,
        eta1=np.stack([np.stack(r[1]) for r in results]),
        eta2=np.stack([np.stack(r[2]) for r in results]),
        zeta2=np.stack([np.stack(r[3]) for r in results]),
        states=np.stack([np.stack(r[4]) for r in results]),
        latent_param_index=np.asarray(results[0][5], dtype=int),
        acceptance={name: float(np.mean([r[6][name] for r in results]))
                    for name in results[0][6]},
        config=config,
        priors=priors,
        state2_smoothed=smoothed,
    )
    draws.validate_invariants()
    for name, rate in draws.acceptance.items():
        if name.startswith("gamma") and np.isfinite(rate) and rate < 0.05:
            warnings.warn(f"acceptance below 5% for block {name}")
    return draws


# ---------------------------------------------------------------------------
# Diagnostics and summaries
# ---------------------------------------------------------------------------

def rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction for one parameter.

    chains: (n_chains, n_draws). Returns NaN when the within-chain variance
    is zero (not-applicable marker).
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 1:
        raise SpecError("rhat expects (n_chains, n_draws)")
    n = chains.shape[1] // 2
    if n < 5:
        raise SpecError("rhat needs at least 10 post-burnin draws")
    halves = np.concatenate([chains[:, :n], chains[:, n:2 * n]], axis=0)
    m = halves.shape[0]
    if m < 2:
        raise SpecError("rhat needs at least 2 split sequences")
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    scale = max(float(np.abs(halves).max()), 1.0)
    if w <= 1e-24 * scale ** 2:
        # Zero within-chain variance: not applicable if the chains agree,
        # divergent if they sit at distinct constants.
        return float("nan") if b <= 1e-24 * scale ** 2 else float("inf")
    var_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(var_hat / w))


def summarize(draws: PosteriorDraws) -> list:
    """Mean / SD / 2.5% / 97.5% / Rhat rows per flattened parameter."""
    rows = []
    for name in draws.parameter_names():
        comp = draws.component(name)
        flat = comp.reshape(-1)
        try:
            r = rhat(comp)
        except SpecError:
            r = float("nan")
        rows.append({
            "parameter": name,
            "mean": float(flat.mean()),
            "sd": float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
            "q2.5": float(np.quantile(flat, 0.025)),
            "q97.5": float(np.quantile(flat, 0.975)),
            "rhat": r,
        })
    return rows
