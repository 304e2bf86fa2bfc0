import numpy as np
import pytest
from scipy import stats

from regimecast.datagen import PopulationDistribution, generate_dataset, sample_population_params
from regimecast.model import Dataset, simulation_spec
from regimecast.sampler import (
    McmcConfig,
    PriorConfig,
    rhat,
    run_mcmc,
    summarize,
)


def small_run(seed=5, **kwargs):
    spec = simulation_spec(n_persons=8, n_occasions=10, forecast_horizon=0)
    params = sample_population_params(spec, PopulationDistribution(), seed=1)
    ds, _ = generate_dataset(spec, params, seed=2)
    defaults = dict(n_chains=2, n_iterations=200, n_burnin=100, seed=seed,
                    latent_thin=5)
    defaults.update(kwargs)
    cfg = McmcConfig(**defaults)
    return spec, ds, run_mcmc(ds, spec, PriorConfig(), cfg)


class TestRunMcmc:
    def test_seed_determinism_bit_identical(self):
        _, _, a = small_run(seed=9)
        _, _, b = small_run(seed=9)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name
        assert np.array_equal(a.eta1, b.eta1)
        assert np.array_equal(a.states, b.states)

    def test_different_seed_differs(self):
        _, _, a = small_run(seed=9)
        _, _, b = small_run(seed=10)
        assert not np.array_equal(a.params["p12"], b.params["p12"])

    def test_workers_do_not_change_results(self):
        _, _, serial = small_run(seed=12)
        spec = simulation_spec(n_persons=8, n_occasions=10, forecast_horizon=0)
        params = sample_population_params(spec, PopulationDistribution(), seed=1)
        ds, _ = generate_dataset(spec, params, seed=2)
        cfg = McmcConfig(n_chains=2, n_iterations=200, n_burnin=100, seed=12,
                         latent_thin=5)
        parallel = run_mcmc(ds, spec, PriorConfig(), cfg, workers=2)
        for name in serial.params:
            assert np.array_equal(serial.params[name], parallel.params[name])
        assert np.array_equal(serial.states, parallel.states)

    def test_draw_invariants(self):
        _, _, draws = small_run(seed=3)
        assert np.all(draws.params["delta_alpha"] >= 0)
        assert np.all((draws.params["p12"] >= 0) & (draws.params["p12"] <= 0.1))
        for name in ("var_zeta1", "var_zeta2", "var_zeta3", "var_eps1", "var_eps2"):
            assert np.all(draws.params[name] > 0)

    def test_clamped_states_in_all_draws(self):
        spec = simulation_spec(n_persons=12, n_occasions=14, forecast_horizon=0)
        params = sample_population_params(spec, PopulationDistribution(), seed=4)
        ds, _ = generate_dataset(spec, params, seed=8, dropout_run_length=3)
        assert (ds.observed_dropout >= 0).any()
        cfg = McmcConfig(n_chains=1, n_iterations=60, n_burnin=30, seed=0,
                         latent_thin=2)
        draws = run_mcmc(ds, spec, PriorConfig(), cfg)
        clamp = ds.clamp_mask()
        assert np.all(draws.states[:, :, clamp] == 2)

    def test_missing_cells_never_contribute(self):
        spec = simulation_spec(n_persons=6, n_occasions=8, forecast_horizon=0)
        params = sample_population_params(spec, PopulationDistribution(), seed=5)
        ds, _ = generate_dataset(spec, params, seed=6)
        items = ds.within_items.copy()
        items[:, 3, :] = np.nan
        items[2, :, 4] = np.nan
        ds_a = Dataset(items, ds.between_items, ds.occasion_times,
                       ds.observed_dropout)
        poked = np.where(np.isnan(items), 1234.5, items)
        ds_b = Dataset(np.where(np.isnan(items), np.nan, poked),
                       ds.between_items, ds.occasion_times, ds.observed_dropout)
        cfg = McmcConfig(n_chains=1, n_iterations=80, n_burnin=40, seed=2,
                         latent_thin=4)
        a = run_mcmc(ds_a, spec, PriorConfig(), cfg)
        b = run_mcmc(ds_b, spec, PriorConfig(), cfg)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name

    def test_latent_draw_alignment(self):
        _, _, draws = small_run(seed=3)
        n_lat = draws.eta1.shape[1]
        assert draws.latent_param_index.shape == (n_lat,)
        d = next(draws.iter_latent_draws())
        d["params"].validate(draws.spec)

    def test_self_consistency_loading_recovery(self):
        # Near-noiseless items pin the factor scores, so posterior loading
        # means must land within two posterior SDs of the generating values.
        from dataclasses import replace
        spec = simulation_spec(n_persons=20, n_occasions=15, forecast_horizon=0)
        base = sample_population_params(spec, PopulationDistribution(), seed=7)
        params = replace(base, var_eps1=np.full(spec.n_within_items, 1e-6))
        ds, _ = generate_dataset(spec, params, seed=9)
        cfg = McmcConfig(n_chains=2, n_iterations=600, n_burnin=300, seed=4,
                         latent_thin=10)
        draws = run_mcmc(ds, spec, PriorConfig(), cfg)
        free = ~spec.scaling_item_mask
        lam = draws.params["lambda_within"].reshape(-1, spec.n_within_items)
        post_mean = lam.mean(axis=0)[free]
        post_sd = lam.std(axis=0)[free]
        truth_free = params.lambda_within[free]
        assert np.all(np.abs(post_mean - truth_free) < 2 * post_sd + 1e-3)

    def test_switch_acceptance_in_target_band(self):
        _, _, draws = small_run(seed=6, n_iterations=600, n_burnin=300)
        for name, rate in draws.acceptance.items():
            if name.startswith("gamma"):
                assert 0.05 < rate < 0.8, (name, rate)


class TestPriorRecoverySmoke:
    """Spot checks; the full KS battery runs in the acceptance suite."""

    def _prior_draws(self, n_iter=4000, seed=0):
        spec = simulation_spec(n_persons=3, n_occasions=4, forecast_horizon=0)
        params = sample_population_params(spec, PopulationDistribution(), seed=0)
        ds, _ = generate_dataset(spec, params, seed=0)
        cfg = McmcConfig(n_chains=1, n_iterations=n_iter, n_burnin=100,
                         seed=seed, latent_thin=50, likelihood_disabled=True)
        return run_mcmc(ds, spec, PriorConfig(), cfg)

    def test_p12_uniform_mean(self):
        draws = self._prior_draws()
        p12 = draws.params["p12"].ravel()
        assert abs(p12.mean() - 0.05) < 0.004
        assert stats.kstest(p12, stats.uniform(0, 0.1).cdf).pvalue > 0.01

    def test_precision_block_inverse_gamma_mean(self):
        draws = self._prior_draws(seed=1)
        var = draws.params["var_zeta3"].ravel()
        assert abs(var.mean() - 0.5) < 0.03

    def test_coefficient_block_standard_normal(self):
        draws = self._prior_draws(seed=2)
        b2 = draws.params["b2"][:, :, 0].ravel()
        assert stats.kstest(b2, stats.norm.cdf).pvalue > 0.01

    def test_truncated_blocks_nonnegative(self):
        draws = self._prior_draws(seed=3)
        assert np.all(draws.params["delta_alpha"] >= 0)
        free_lam = draws.params["lambda_within"][:, :, 1]
        assert np.all(free_lam >= 0)


class TestRhat:
    def test_iid_normal_chains_near_one(self):
        rng = np.random.default_rng(0)
        chains = rng.standard_normal((4, 10_000))
        assert 0.99 <= rhat(chains) <= 1.02

    def test_disjoint_constants_diverge(self):
        chains = np.vstack([np.zeros(100), np.ones(100)])
        assert rhat(chains) > 1.5

    def test_constant_single_value_not_applicable(self):
        chains = np.full((2, 100), 3.14)
        assert np.isnan(rhat(chains))

    def test_shifted_chains_detected(self):
        rng = np.random.default_rng(1)
        chains = rng.standard_normal((2, 2000))
        chains[1] += 3.0
        assert rhat(chains) > 1.5


class TestSummarize:
    def test_constant_draws(self):
        _, _, draws = small_run(seed=3)
        draws.params["p12"][:] = 0.05
        rows = {r["parameter"]: r for r in summarize(draws)}
        row = rows["p12"]
        assert row["sd"] == 0.0
        assert row["q2.5"] == row["mean"] == row["q97.5"] == 0.05
        assert np.isnan(row["rhat"])

    def test_layout_column_order(self):
        _, _, draws = small_run(seed=3)
        rows = summarize(draws)
        assert list(rows[0].keys()) == ["parameter", "mean", "sd", "q2.5",
                                        "q97.5", "rhat"]
        names = [r["parameter"] for r in rows]
        assert names.index("alpha_s1[1]") < names.index("delta_alpha[1]")
        assert names.index("delta_alpha[1]") < names.index("p12")
        assert names.index("p12") < names.index("gamma1")
        assert names.index("gamma1") < names.index("lambda_within[1]")

    def test_normal_quantiles(self):
        rng = np.random.default_rng(2)
        draws = rng.standard_normal((2, 50_000))
        lo, hi = np.quantile(draws, [0.025, 0.975])
        assert abs(lo + 1.96) < 0.03 and abs(hi - 1.96) < 0.03
