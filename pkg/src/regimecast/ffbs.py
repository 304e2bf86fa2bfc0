"""Multi-process mixture-Kalman filtering, forecasting, and backward sampling.

A dynamic linear model per (person, factor) scalar series: the latent factor
score at each occasion is regressed on known person-level regressors (unit
intercept, a spare zero column, the person's random intercept, the person
factor score, and the person-factor x lagged-score interaction) with a
5-dimensional coefficient state, identity system matrix, and zero system
covariance by default. Two regime-indexed models share the observation
design and hold with time-varying model probabilities; each filter step runs
the four (current regime x previous regime) combinations, reweights them by
the observation density, and collapses back to per-regime moments by moment
matching.

Filtering is exposed both as single-series operations (one FilterState) and
as a batched kernel used by the posterior-draw forecaster, which runs all
persons and factors of a draw simultaneously with a shared per-person regime
probability stream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .model import Dataset, ModelSpec, Parameters, transition_matrix

if TYPE_CHECKING:  # pragma: no cover
    from .sampler import PosteriorDraws

__all__ = [
    "Quadruple",
    "FilterState",
    "FilterHistory",
    "MixtureSummary",
    "ForecastConfig",
    "ForecastResult",
    "FilterNumericError",
    "init_prior",
    "propagate",
    "one_step_forecast",
    "combination_weights",
    "marginal_predictive",
    "update",
    "advance_without_update",
    "forecast_horizon",
    "backward_sample",
    "forecast_from_posterior",
]

THETA_DIM = 5  # (intercept, spare, random-intercept, person-factor, interaction)


class FilterNumericError(RuntimeError):
    """Raised on non-PSD covariances or nonpositive predictive variances."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quadruple:
    """One step's DLM specification {F, G, V, W}.

    F: (k,) known regressor vector for the occasion.
    G: (k, k) system matrix (identity in this model family).
    V: scalar observation variance (> 0).
    W: (k, k) system covariance (zero in this model family).
    """

    F: np.ndarray
    G: np.ndarray
    V: float
    W: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float))
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        object.__setattr__(self, "V", float(self.V))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        k = self.F.shape[0]
        if self.G.shape != (k, k) or self.W.shape != (k, k):
            raise ValueError("G and W must be (k, k) for F of length k")
        if self.V <= 0:
            raise FilterNumericError("observation variance must be positive")

    @staticmethod
    def standard(F: np.ndarray, V: float, w_scale: float = 0.0) -> "Quadruple":
        """The model family's specialization: G = I, W = w_scale * I."""
        F = np.asarray(F, dtype=float)
        k = F.shape[0]
        return Quadruple(F=F, G=np.eye(k), V=V, W=w_scale * np.eye(k))


def _as_regime_quads(quadruple, n_regimes: int) -> list[Quadruple]:
    if isinstance(quadruple, Quadruple):
        return [quadruple] * n_regimes
    quads = list(quadruple)
    if len(quads) != n_regimes:
        raise ValueError(f"expected {n_regimes} quadruples, got {len(quads)}")
    return quads


@dataclass(frozen=True)
class FilterState:
    """Per-regime filter moments and probabilities after occasion t.

    means: (K, k); covs: (K, k, k); probs: (K,) summing to 1;
    joint: (K, K) posterior model-combination probabilities from the last
    update (joint[s_t, s_prev]), or None before the first update.
    """

    t: int
    means: np.ndarray
    covs: np.ndarray
    probs: np.ndarray
    joint: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if self.joint is not None:
            object.__setattr__(self, "joint", np.asarray(self.joint, dtype=float))

    @property
    def n_regimes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def marginal_moments(self):
        """Moment-matched single-Gaussian (mean, cov) across regimes."""
        mean = np.einsum("s,si->i", self.probs, self.means)
        spread = self.means - mean[None, :]
        cov = np.einsum("s,sij->ij", self.probs, self.covs)
        cov = cov + np.einsum("s,si,sj->ij", self.probs, spread, spread)
        return mean, cov

    def with_probs(self, probs: np.ndarray) -> "FilterState":
        probs = np.asarray(probs, dtype=float)
        if probs.shape != self.probs.shape or not np.isclose(probs.sum(), 1.0):
            raise ValueError("probs must be a simplex over regimes")
        return replace(self, probs=probs)

    def to_json(self) -> str:
        payload = {
            "t": self.t,
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "probs": self.probs.tolist(),
            "joint": None if self.joint is None else self.joint.tolist(),
        }
        return json.dumps(payload)

    @staticmethod
    def from_json(text: str) -> "FilterState":
        d = json.loads(text)
        return FilterState(
            t=d["t"],
            means=np.array(d["means"]),
            covs=np.array(d["covs"]),
            probs=np.array(d["probs"]),
            joint=None if d["joint"] is None else np.array(d["joint"]),
        )


@dataclass
class FilterHistory:
    """Stored forward pass for smoothing: marginal moments and design per t."""

    means: list = field(default_factory=list)       # (k,) per t
    covs: list = field(default_factory=list)        # (k, k) per t
    Fs: list = field(default_factory=list)          # (k,) per t
    G: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None

    def append(self, state: FilterState, quad: Quadruple):
        mean, cov = state.marginal_moments()
        self.means.append(mean)
        self.covs.append(cov)
        self.Fs.append(quad.F.copy())
        if self.G is None:
            self.G, self.W = quad.G.copy(), quad.W.copy()
        elif not (np.array_equal(self.G, quad.G) and np.array_equal(self.W, quad.W)):
            raise ValueError("backward smoothing requires time-invariant G and W")

    def __len__(self):
        return len(self.means)


@dataclass(frozen=True)
class MixtureSummary:
    """A finite normal mixture: predictive summaries and quantiles."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float).ravel())
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float).ravel())
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).ravel())

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def variance(self) -> float:
        second = self.weights @ (self.variances + self.means ** 2)
        return float(second - self.mean ** 2)

    def cdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        sd = np.sqrt(self.variances)
        z = (x[:, None] - self.means[None, :]) / sd[None, :]
        return ndtr(z) @ self.weights

    def quantile(self, p) -> np.ndarray:
        """Inverse CDF by bisection (handles arrays of probabilities)."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        return _mixture_quantiles(self.means[None, :], self.variances[None, :],
                                  self.weights[None, :], p)[0]

    def interval(self, level: float = 0.95):
        tail = (1.0 - level) / 2.0
        q = self.quantile(np.array([tail, 1.0 - tail]))
        return float(q[0]), float(q[1])


def _mixture_quantiles(means, variances, weights, ps):
    """Vectorized mixture quantiles.

    means/variances/weights: (B, C); ps: (P,). Returns (B, P).
    """
    means = np.asarray(means, dtype=float)
    sds = np.sqrt(np.asarray(variances, dtype=float))
    weights = np.asarray(weights, dtype=float)
    ps = np.asarray(ps, dtype=float)
    zmax = float(-ndtri(1e-14))
    lo = (means - zmax * sds).min(axis=1)  # (B,)
    hi = (means + zmax * sds).max(axis=1)
    b = means.shape[0]
    lo = np.repeat(lo[:, None], len(ps), axis=1)
    hi = np.repeat(hi[:, None], len(ps), axis=1)
    for _ in range(90):  # halves the bracket to ~1e-13 relative width
        mid = 0.5 * (lo + hi)
        z = (mid[:, :, None] - means[:, None, :]) / sds[:, None, :]
        cdf = np.einsum("bpc,bc->bp", ndtr(z), weights)
        below = cdf < ps[None, :]
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Single-series operations (Section-style building blocks)
# ---------------------------------------------------------------------------

def init_prior(m0: np.ndarray, C0: np.ndarray, p0: np.ndarray) -> FilterState:
    """Filter state at t=0 from a shared coefficient prior and regime simplex."""
    m0 = np.asarray(m0, dtype=float)
    C0 = np.asarray(C0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if not np.isclose(p0.sum(), 1.0) or np.any(p0 < 0):
        raise ValueError("p0 must be a probability simplex")
    if not np.allclose(C0, C0.T):
        raise FilterNumericError("C0 must be symmetric")
    eig = np.linalg.eigvalsh(C0)
    if eig.min() < -1e-10:
        raise FilterNumericError("C0 must be positive semidefinite")
    k = p0.shape[0]
    return FilterState(
        t=0,
        means=np.repeat(m0[None, :], k, axis=0),
        covs=np.repeat(C0[None, :, :], k, axis=0),
        probs=p0,
    )


def propagate(state: FilterState, quadruple):
    """Evolve regime moments one step: a[s, s'] = G_s m_{s'}, R = G C G' + W.

    Returns (a, R) with shapes (K, K, k) and (K, K, k, k); the first axis is
    the current regime, the second the previous regime.
    """
    quads = _as_regime_quads(quadruple, state.n_regimes)
    G = np.stack([q.G for q in quads])
    W = np.stack([q.W for q in quads])
    a = np.einsum("sil,pl->spi", G, state.means)
    R = np.einsum("sil,plm,sjm->spij", G, state.covs, G) + W[:, None, :, :]
    return a, R


def one_step_forecast(state: FilterState, quadruple):
    """Scalar forecast mean/variance per regime combination.

    Returns (f, Q, a, R): f and Q have shape (K, K); propagate results are
    passed through for reuse by the update step.
    """
    quads = _as_regime_quads(quadruple, state.n_regimes)
    a, R = propagate(state, quadruple)
    F = quads[0].F
    V = np.array([q.V for q in quads])
    f = np.einsum("i,spi->sp", F, a)
    Q = np.einsum("i,spij,j->sp", F, R, F) + V[:, None]
    if np.any(Q <= 0):
        raise FilterNumericError("nonpositive one-step forecast variance")
    return f, Q, a, R


def combination_weights(state: FilterState, pi: np.ndarray) -> np.ndarray:
    """Prior model-combination weights w[s, s'] = pi[s] * p_{t-1}[s']."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != state.probs.shape:
        raise ValueError("pi must have one probability per regime")
    return pi[:, None] * state.probs[None, :]


def marginal_predictive(f: np.ndarray, Q: np.ndarray,
                        weights: np.ndarray) -> MixtureSummary:
    """Mixture of the per-combination normals under the given weights."""
    w = np.asarray(weights, dtype=float).ravel()
    total = w.sum()
    if not np.isclose(total, 1.0):
        w = w / total
    return MixtureSummary(means=f, variances=Q, weights=w)


def _log_normal_pdf(e, Q):
    return -0.5 * (np.log(2.0 * np.pi * Q) + e * e / Q)


def update(state: FilterState, y: float, quadruple, pi: np.ndarray) -> FilterState:
    """One filter step: Kalman update per combination, reweight, collapse.

    Posterior combination weights are computed in the log domain
    (log prior weight + observation log-density, normalized by c_t), which
    keeps the step well-defined when densities underflow.
    """
    if not np.isfinite(y):
        raise FilterNumericError("observation must be finite")
    quads = _as_regime_quads(quadruple, state.n_regimes)
    f, Q, a, R = one_step_forecast(state, quads)
    F = quads[0].F

    e = y - f                                        # (K, K)
    A = np.einsum("spij,j->spi", R, F) / Q[:, :, None]
    m_combo = a + A * e[:, :, None]
    C_combo = R - Q[:, :, None, None] * np.einsum("spi,spj->spij", A, A)

    with np.errstate(divide="ignore"):
        log_w = np.log(combination_weights(state, pi))
    log_post = log_w + _log_normal_pdf(e, Q)
    flat = log_post.ravel()
    finite = flat[np.isfinite(flat)]
    if finite.size == 0:
        # No combination has prior mass; fall back to the prior weights.
        post = combination_weights(state, pi)
        post = post / post.sum()
    else:
        shift = finite.max()
        post = np.exp(np.where(np.isfinite(log_post), log_post - shift, -np.inf))
        post = post / post.sum()

    probs = post.sum(axis=1)                          # (K,)
    means = np.empty_like(state.means)
    covs = np.empty_like(state.covs)
    for s in range(state.n_regimes):
        if probs[s] > 0:
            w_s = post[s] / probs[s]
        else:
            # Dead regime: carry prior-probability-weighted moments.
            w_s = state.probs / max(state.probs.sum(), 1.0)
        mean_s = np.einsum("p,pi->i", w_s, m_combo[s])
        spread = mean_s[None, :] - m_combo[s]
        cov_s = np.einsum("p,pij->ij", w_s, C_combo[s])
        cov_s = cov_s + np.einsum("p,pi,pj->ij", w_s, spread, spread)
        means[s] = mean_s
        covs[s] = 0.5 * (cov_s + cov_s.T)
    return FilterState(t=state.t + 1, means=means, covs=covs, probs=probs,
                       joint=post)


def advance_without_update(state: FilterState, quadruple,
                           pi: np.ndarray) -> FilterState:
    """Evolve the regime mixture one step with no observation.

    Combination weights reduce to pi[s] * p[s']; per-regime moments collapse
    over the previous regime with weights p[s'].
    """
    a, R = propagate(state, quadruple)
    w_prev = state.probs
    means = np.einsum("p,spi->si", w_prev, a)
    spread = means[:, None, :] - a
    covs = np.einsum("p,spij->sij", w_prev, R)
    covs = covs + np.einsum("p,spi,spj->sij", w_prev, spread, spread)
    pi = np.asarray(pi, dtype=float)
    joint = pi[:, None] * w_prev[None, :]
    return FilterState(t=state.t + 1, means=means, covs=covs, probs=pi,
                       joint=joint)


def backward_sample(history: FilterHistory, seed,
                    final_state: Optional[FilterState] = None) -> np.ndarray:
    """Sample a smoothed coefficient trajectory from a stored forward pass.

    Draws theta_T from the final collapsed posterior, then recurses backward
    through theta_t | theta_{t+1}. With W = 0 and G = I the backward kernel
    is degenerate and every theta_t equals the final draw. Returns an array
    of shape (T, k).
    """
    rng = np.random.default_rng(seed)
    T = len(history)
    if T == 0:
        raise ValueError("empty filter history")
    k = history.means[0].shape[0]
    G, W = history.G, history.W
    out = np.empty((T, k))
    out[-1] = _draw_mvn(rng, history.means[-1], history.covs[-1])
    degenerate = np.allclose(W, 0.0) and np.allclose(G, np.eye(k))
    for t in range(T - 2, -1, -1):
        if degenerate:
            out[t] = out[t + 1]
            continue
        m, C = history.means[t], history.covs[t]
        a_next = G @ m
        R_next = G @ C @ G.T + W
        try:
            gain = np.linalg.solve(R_next.T, (C @ G.T).T).T
        except np.linalg.LinAlgError:
            warnings.warn("singular backward covariance; using pseudo-inverse")
            gain = C @ G.T @ np.linalg.pinv(R_next)
        mean = m + gain @ (out[t + 1] - a_next)
        cov = C - gain @ R_next @ gain.T
        out[t] = _draw_mvn(rng, mean, 0.5 * (cov + cov.T))
    return out


def _draw_mvn(rng, mean, cov):
    k = mean.shape[0]
    eigval, eigvec = np.linalg.eigh(cov)
    eigval = np.clip(eigval, 0.0, None)
    return mean + eigvec @ (np.sqrt(eigval) * rng.standard_normal(k))


# ---------------------------------------------------------------------------
# Batched kernel (persons x factors in one pass)
# ---------------------------------------------------------------------------

def _batch_update(m, C, p, F, V, y, pi, w_scale=0.0):
    """One filter step for B independent series with shared G=I, W=w_scale*I.

    m: (B, K, k); C: (B, K, k, k); p, pi: (B, K); F: (B, k); V: (B,) or
    (B, K); y: (B,). Returns (m', C', p', joint, f, Q, w_prior).
    """
    B, K, k = m.shape
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    a = np.broadcast_to(m[:, None, :, :], (B, K, K, k))        # a[b, s, s']
    R = np.broadcast_to(C[:, None, :, :, :], (B, K, K, k, k))
    if w_scale:
        R = R + w_scale * np.eye(k)
    f = np.einsum("bi,bspi->bsp", F, a)
    Q = np.einsum("bi,bspij,bj->bsp", F, R, F) + V[:, :, None]
    if np.any(Q <= 0):
        raise FilterNumericError("nonpositive predictive variance in batch update")
    e = y[:, None, None] - f
    A = np.einsum("bspij,bj->bspi", R, F) / Q[..., None]
    m_combo = a + A * e[..., None]
    C_combo = R - Q[..., None, None] * np.einsum("bspi,bspj->bspij", A, A)

    w_prior = pi[:, :, None] * p[:, None, :]
    with np.errstate(divide="ignore"):
        log_post = np.log(w_prior) - 0.5 * (np.log(2 * np.pi * Q) + e * e / Q)
    flat = log_post.reshape(B, -1)
    shift = np.max(np.where(np.isfinite(flat), flat, -np.inf), axis=1)
    dead = ~np.isfinite(shift)
    shift = np.where(dead, 0.0, shift)
    post = np.exp(np.clip(log_post - shift[:, None, None], -745.0, 0.0))
    post = np.where(np.isfinite(log_post), post, 0.0)
    norm = post.reshape(B, -1).sum(axis=1)
    fallback = w_prior / np.maximum(w_prior.reshape(B, -1).sum(axis=1), 1e-300)[:, None, None]
    post = np.where(dead[:, None, None], fallback, post / np.maximum(norm, 1e-300)[:, None, None])

    p_new = post.sum(axis=2)                                     # (B, K)
    w_neutral = np.broadcast_to(p[:, None, :], post.shape)
    safe = p_new[:, :, None] > 0
    w_s = np.where(safe, post / np.maximum(p_new[:, :, None], 1e-300), w_neutral)
    m_new = np.einsum("bsp,bspi->bsi", w_s, m_combo)
    spread = m_new[:, :, None, :] - m_combo
    C_new = np.einsum("bsp,bspij->bsij", w_s, C_combo)
    C_new = C_new + np.einsum("bsp,bspi,bspj->bsij", w_s, spread, spread)
    C_new = 0.5 * (C_new + np.swapaxes(C_new, -1, -2))
    return m_new, C_new, p_new, post, f, Q, w_prior


def _batch_advance(m, C, p, F, V, pi, w_scale=0.0):
    """Observation-free step for B series; returns (m', C', f, Q, w)."""
    B, K, k = m.shape
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    a = np.broadcast_to(m[:, None, :, :], (B, K, K, k))
    R = np.broadcast_to(C[:, None, :, :, :], (B, K, K, k, k))
    if w_scale:
        R = R + w_scale * np.eye(k)
    f = np.einsum("bi,bspi->bsp", F, a)
    Q = np.einsum("bi,bspij,bj->bsp", F, R, F) + V[:, :, None]
    w = pi[:, :, None] * p[:, None, :]
    m_new = np.einsum("bp,bspi->bsi", p, a)
    spread = m_new[:, :, None, :] - a
    C_new = np.einsum("bp,bspij->bsij", p, R)
    C_new = C_new + np.einsum("bp,bspi,bspj->bsij", p, spread, spread)
    return m_new, C_new, f, Q, w


# ---------------------------------------------------------------------------
# Production forecaster
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastConfig:
    """Settings for posterior-draw forecasting.

    theta_init "model" seeds the coefficient prior mean with the draw's
    model-implied values; "zero" uses the zero vector. c0_scale is the
    diagonal prior covariance scale. level is the central-interval level.
    max_draws caps how many stored latent draws are used (0 = all).
    classify_threshold is the regime-2 probability above which a cell is
    classified as regime 2.
    """

    theta_init: str = "model"
    c0_scale: float = 1.0
    level: float = 0.95
    w_scale: float = 0.0
    max_draws: int = 0
    classify_threshold: float = 0.5
    smooth_seed: int = 2027

    def __post_init__(self):
        if self.theta_init not in ("model", "zero"):
            raise ValueError("theta_init must be 'model' or 'zero'")
        if not 0 < self.level < 1:
            raise ValueError("level must be in (0, 1)")
        if self.c0_scale <= 0:
            raise ValueError("c0_scale must be positive")


@dataclass(frozen=True)
class ForecastResult:
    """Pooled forecasts per (person, factor, horizon step) plus smoothing.

    Columnar arrays of length n_persons * n_factors * h_max: person and
    factor are 0-based indices, horizon is 1-based. smoothed is the pooled
    in-sample smoothed trajectory (N, T, q); state_prob_in_sample is the
    pooled regime-2 probability per (person, occasion) for t <= N_t.
    """

    person: np.ndarray
    factor: np.ndarray
    horizon: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    p_state2: np.ndarray
    level: float
    smoothed: np.ndarray
    state_prob_in_sample: np.ndarray

    def forecast_grid(self, field: str, n_persons: int, n_factors: int,
                      h_max: int) -> np.ndarray:
        """Reshape a columnar field to (N, q, h_max)."""
        values = getattr(self, field)
        out = np.full((n_persons, n_factors, h_max), np.nan)
        out[self.person, self.factor, self.horizon - 1] = values
        return out

    def state2_prob_by_horizon(self, n_persons: int, h_max: int) -> np.ndarray:
        """(N, h_max) pooled regime-2 probability (identical across factors)."""
        out = np.full((n_persons, h_max), np.nan)
        first_factor = self.factor == 0
        out[self.person[first_factor], self.horizon[first_factor] - 1] = \
            self.p_state2[first_factor]
        return out


def _model_theta(params: Parameters, j: int) -> np.ndarray:
    """Draw-implied coefficient vector for factor j (regime-1 intercept)."""
    return np.array([
        params.alpha_state[0, j], 0.0, 1.0, params.b2[j],
        params.omega2_state[0, j],
    ])


def _build_F(zeta2_j, eta2, eta1_lag_j):
    """Stack the per-person regressor rows (B,) -> (B, 5)."""
    one = np.ones_like(eta2)
    zero = np.zeros_like(eta2)
    return np.stack([one, zero, zeta2_j, eta2, eta2 * eta1_lag_j], axis=1)


class _DrawForecaster:
    """Filter + forecast for one posterior draw, batched over persons/factors."""

    def __init__(self, spec: ModelSpec, params: Parameters, eta1, eta2, zeta2,
                 states, config: ForecastConfig):
        self.spec = spec
        self.params = params
        self.eta1 = eta1            # (N, T, q) sampled factor scores
        self.eta2 = eta2            # (N,)
        self.zeta2 = zeta2          # (N, q)
        self.states = states        # (N, T) in {1, 2}
        self.config = config
        self.N, self.T, self.q = eta1.shape
        self.B = self.N * self.q
        k = THETA_DIM
        if config.theta_init == "model":
            theta0 = np.stack([_model_theta(params, j) for j in range(self.q)])
            m0 = np.repeat(theta0[None, :, :], self.N, axis=0).reshape(self.B, k)
        else:
            m0 = np.zeros((self.B, k))
        self.m = np.repeat(m0[:, None, :], 2, axis=1)            # (B, 2, k)
        C0 = config.c0_scale * np.eye(k)
        self.C = np.broadcast_to(C0, (self.B, 2, k, k)).copy()
        p0 = np.array([spec.p_initial_state1, 1.0 - spec.p_initial_state1])
        self.p = np.broadcast_to(p0, (self.B, 2)).copy()
        self.V = np.repeat(params.var_zeta1[None, :], self.N, axis=0).reshape(self.B)
        # flat index b = i * q + j
        self.person_of = np.repeat(np.arange(self.N), self.q)
        self.factor_of = np.tile(np.arange(self.q), self.N)
        self.history_means = []
        self.history_covs = []
        self.history_Fs = []

    def _pi_from_states(self, t: int) -> np.ndarray:
        """(N, 2) transition row of the drawn previous regime."""
        if t == 0:
            p1 = np.full(self.N, self.spec.p_initial_state1)
            return np.stack([p1, 1.0 - p1], axis=1)
        trans = transition_matrix(self.spec, self.params, self.eta2,
                                  self.eta1[:, t - 1, :])       # (N, 2, 2)
        prev = self.states[:, t - 1] - 1
        return trans[np.arange(self.N), prev, :]

    def run_filter(self):
        for t in range(self.T):
            lag = self.eta1[:, t - 1, :] if t > 0 else np.zeros((self.N, self.q))
            F = np.empty((self.B, THETA_DIM))
            for j in range(self.q):
                F[j::self.q] = _build_F(self.zeta2[:, j], self.eta2, lag[:, j])
            pi_person = self._pi_from_states(t)                  # (N, 2)
            pi = np.repeat(pi_person, self.q, axis=0)
            y = self.eta1[:, t, :].reshape(self.B)
            self.m, self.C, self.p, _, _, _, _ = _batch_update(
                self.m, self.C, self.p, F, self.V, y, pi,
                w_scale=self.config.w_scale)
            self.history_means.append(
                np.einsum("bs,bsi->bi", self.p, self.m))
            mix_cov = np.einsum("bs,bsij->bij", self.p, self.C)
            spread = self.history_means[-1][:, None, :] - self.m
            mix_cov = mix_cov + np.einsum("bs,bsi,bsj->bij", self.p, spread, spread)
            self.history_covs.append(mix_cov)
            self.history_Fs.append(F)

    def forecast(self, h_max: int):
        """Returns per-step (f, Q, w) component stacks and regime probabilities.

        Components per (person, factor, step): the four-combination normals
        flattened to length 4. Regime probabilities evolve through the
        transition model from the drawn regime at the last observed occasion.

        Feeding the mixture mean of the previous step into the next design
        row plugs a point value in for a random input; the carried predictive
        variance is therefore propagated through the structural AR
        coefficient (law of total variance), which is what makes multi-step
        intervals fan out instead of staying one-step wide.
        """
        N, q, B = self.N, self.q, self.B
        last = self.states[:, self.T - 1] - 1                    # (N,)
        p_person = np.zeros((N, 2))
        p_person[np.arange(N), last] = 1.0
        eta_prev = self.eta1[:, self.T - 1, :].copy()            # (N, q)
        m, C, p = self.m, self.C, np.repeat(p_person, q, axis=0)
        # structural AR coefficient per (person, factor, regime)
        b_eff = (self.params.b1_state[None, :, :]
                 + self.params.omega2_state[None, :, :]
                 * self.eta2[:, None, None])                     # (N, 2, q)
        var_carry = np.zeros(B)

        comp_f = np.empty((h_max, B, 4))
        comp_Q = np.empty((h_max, B, 4))
        comp_w = np.empty((h_max, B, 4))
        p2 = np.empty((h_max, N))
        for h in range(h_max):
            trans = transition_matrix(self.spec, self.params, self.eta2, eta_prev)
            pi_person = np.einsum("ns,nsr->nr", p_person, trans)  # (N, 2)
            pi = np.repeat(pi_person, q, axis=0)
            F = np.empty((B, THETA_DIM))
            for j in range(q):
                F[j::q] = _build_F(self.zeta2[:, j], self.eta2, eta_prev[:, j])
            m, C, f, Q, w = _batch_advance(m, C, p, F, self.V, pi,
                                           w_scale=self.config.w_scale)
            b_mix = np.einsum("ns,nsj->nj", pi_person, b_eff).reshape(B)
            carried = (b_mix ** 2) * var_carry                    # (B,)
            comp_f[h] = f.reshape(B, 4)
            comp_Q[h] = Q.reshape(B, 4) + carried[:, None]
            comp_w[h] = w.reshape(B, 4)
            mix_mean = np.einsum("bc,bc->b", comp_w[h], comp_f[h])
            second = np.einsum("bc,bc->b", comp_w[h],
                               comp_Q[h] + comp_f[h] ** 2)
            var_carry = second - mix_mean ** 2
            eta_prev = mix_mean.reshape(N, q)
            p_person = pi_person
            p = np.repeat(p_person, q, axis=0)
            p2[h] = p_person[:, 1]
        return comp_f, comp_Q, comp_w, p2

    def smoothed_trajectory(self, seed) -> np.ndarray:
        """Backward-sampled smoothed in-sample factor path, (N, T, q)."""
        rng = np.random.default_rng(seed)
        T, B, k = self.T, self.B, THETA_DIM
        theta = np.empty((T, B, k))
        mean_T = self.history_means[-1]
        cov_T = self.history_covs[-1]
        theta[-1] = _draw_mvn_batch(rng, mean_T, cov_T)
        degenerate = self.config.w_scale == 0.0
        for t in range(T - 2, -1, -1):
            if degenerate:
                theta[t] = theta[t + 1]
                continue
            m, C = self.history_means[t], self.history_covs[t]
            R = C + self.config.w_scale * np.eye(k)
            gain = np.linalg.solve(np.swapaxes(R, 1, 2), np.swapaxes(C, 1, 2))
            gain = np.swapaxes(gain, 1, 2)
            mean = m + np.einsum("bij,bj->bi", gain, theta[t + 1] - m)
            cov = C - gain @ R @ np.swapaxes(gain, 1, 2)
            theta[t] = _draw_mvn_batch(rng, mean, 0.5 * (cov + np.swapaxes(cov, 1, 2)))
        smooth = np.empty((self.N, T, self.q))
        for t in range(T):
            vals = np.einsum("bi,bi->b", self.history_Fs[t], theta[t])
            smooth[:, t, :] = vals.reshape(self.N, self.q)
        return smooth


def _draw_mvn_batch(rng, means, covs):
    eigval, eigvec = np.linalg.eigh(covs)
    eigval = np.clip(eigval, 0.0, None)
    z = rng.standard_normal(means.shape)
    return means + np.einsum("bij,bj->bi", eigvec, np.sqrt(eigval) * z)


def forecast_horizon(spec: ModelSpec, params: Parameters, eta1, eta2, zeta2,
                     states, h_max: int,
                     config: ForecastConfig = ForecastConfig()):
    """Filter one draw's trajectories and forecast h_max steps ahead.

    Returns (per-step component stacks, regime-2 probabilities, forecaster).
    This is the single-draw building block of forecast_from_posterior.
    """
    fc = _DrawForecaster(spec, params, np.asarray(eta1, dtype=float),
                         np.asarray(eta2, dtype=float),
                         np.asarray(zeta2, dtype=float),
                         np.asarray(states), config)
    fc.run_filter()
    comp_f, comp_Q, comp_w, p2 = fc.forecast(h_max)
    return comp_f, comp_Q, comp_w, p2, fc


def forecast_from_posterior(draws: "PosteriorDraws", dataset: Dataset,
                            spec: ModelSpec, h_max: int,
                            config: ForecastConfig = ForecastConfig()
                            ) -> ForecastResult:
    """Run the filter/forecast per stored posterior draw and pool.

    Per draw the filter consumes that draw's sampled factor scores, random
    effects, and regime path; pooled forecasts are the equally-weighted
    mixture of the per-draw predictive mixtures, with central intervals from
    the pooled mixture quantile function.
    """
    draw_list = list(draws.iter_latent_draws())
    if config.max_draws and len(draw_list) > config.max_draws:
        idx = np.linspace(0, len(draw_list) - 1, config.max_draws).astype(int)
        draw_list = [draw_list[i] for i in idx]
    if not draw_list:
        raise ValueError("no stored latent draws to forecast from")

    N, q = spec.n_persons, spec.n_within_factors
    B = N * q
    D = len(draw_list)
    T = draw_list[0]["eta1"].shape[1]

    all_f = np.empty((h_max, B, 4 * D))
    all_Q = np.empty((h_max, B, 4 * D))
    all_w = np.empty((h_max, B, 4 * D))
    p2_draws = np.empty((D, h_max, N))
    smooth_sum = np.zeros((N, T, q))
    state2_in = np.zeros((N, T))

    for d, draw in enumerate(draw_list):
        comp_f, comp_Q, comp_w, p2, fc = forecast_horizon(
            spec, draw["params"], draw["eta1"], draw["eta2"], draw["zeta2"],
            draw["states"], h_max, config)
        sl = slice(4 * d, 4 * (d + 1))
        all_f[:, :, sl] = comp_f
        all_Q[:, :, sl] = comp_Q
        all_w[:, :, sl] = comp_w / D
        p2_draws[d] = p2
        smooth_sum += fc.smoothed_trajectory(seed=config.smooth_seed + d)
        state2_in += (draw["states"] == 2)

    person_idx = np.repeat(np.arange(N), q)
    factor_idx = np.tile(np.arange(q), N)
    rows_person, rows_factor, rows_h = [], [], []
    rows_mean, rows_var, rows_lo, rows_hi, rows_p2 = [], [], [], [], []
    tail = (1.0 - config.level) / 2.0
    p2_pooled = p2_draws.mean(axis=0)                           # (h_max, N)

    for h in range(h_max):
        w = all_w[h]
        mean = np.einsum("bc,bc->b", w, all_f[h])
        second = np.einsum("bc,bc->b", w, all_Q[h] + all_f[h] ** 2)
        var = second - mean ** 2
        qs = _mixture_quantiles(all_f[h], all_Q[h], w,
                                np.array([tail, 1.0 - tail]))
        rows_person.append(person_idx)
        rows_factor.append(factor_idx)
        rows_h.append(np.full(B, h + 1))
        rows_mean.append(mean)
        rows_var.append(var)
        rows_lo.append(qs[:, 0])
        rows_hi.append(qs[:, 1])
        rows_p2.append(p2_pooled[h][person_idx])

    return ForecastResult(
        person=np.concatenate(rows_person),
        factor=np.concatenate(rows_factor),
        horizon=np.concatenate(rows_h).astype(int),
        mean=np.concatenate(rows_mean),
        variance=np.concatenate(rows_var),
        lower=np.concatenate(rows_lo),
        upper=np.concatenate(rows_hi),
        p_state2=np.concatenate(rows_p2),
        level=config.level,
        smoothed=smooth_sum / D,
        state_prob_in_sample=state2_in / D,
    )
