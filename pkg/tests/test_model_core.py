import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regimecast.model import (
    DROPOUT_NONE,
    Dataset,
    LatentState,
    ModelSpec,
    Parameters,
    SpecError,
    between_measurement_mean,
    insert_phantom_occasions,
    person_effects,
    preprocess_items,
    simulation_spec,
    stay_probability,
    switch_logit,
    transition_matrix,
    within_measurement_mean,
    within_structural_mean,
)


def empirical_spec(n_persons=122, n_occasions=50, horizon=5):
    return ModelSpec(
        n_within_factors=7,
        items_per_within_factor=(3, 2, 2, 2, 2, 3, 3),
        n_between_items=3,
        n_states=2,
        interaction_factor_indices=(1, 2, 4),
        n_persons=n_persons,
        n_occasions=n_occasions,
        forecast_horizon=horizon,
    )


def make_params(spec, **overrides):
    q, J, J2 = spec.n_within_factors, spec.n_within_items, spec.n_between_items
    lam1 = np.ones(J)
    lam2 = np.ones(J2)
    base = dict(
        lambda_within=lam1,
        lambda_between=lam2,
        alpha_state=np.vstack([np.zeros(q), 0.3 * np.ones(q)]),
        b2=np.zeros(q),
        b1_state=np.vstack([0.3 * np.ones(q), 0.5 * np.ones(q)]),
        omega2_state=np.zeros((2, q)),
        gamma1=0.0,
        gamma2=0.0,
        gamma3=np.zeros(q),
        gamma4=np.zeros(q),
        var_zeta1=0.1 * np.ones(q),
        var_zeta2=0.1 * np.ones(q),
        var_zeta3=0.2,
        var_eps1=0.3 * np.ones(J),
        var_eps2=0.8 * np.ones(J2),
        p12=0.05,
    )
    base.update(overrides)
    return Parameters(**base)


class TestModelSpec:
    def test_derived_structure(self):
        spec = empirical_spec()
        assert spec.n_within_items == 17
        assert spec.item_factor.tolist() == [0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 5, 6, 6, 6]
        assert spec.scaling_item_mask.sum() == 7
        assert spec.scaling_item_mask[0] and spec.scaling_item_mask[3]

    def test_invalid_counts_rejected(self):
        with pytest.raises(SpecError):
            simulation_spec(n_persons=0)
        with pytest.raises(SpecError):
            ModelSpec(2, (3,), 3, 2, (), 5, 5, 2)
        with pytest.raises(SpecError):
            ModelSpec(2, (3, 2), 3, 2, (5,), 5, 5, 2)

    def test_parameter_validation(self):
        spec = simulation_spec()
        params = make_params(spec)
        params.validate(spec)
        bad = make_params(spec, p12=0.2)
        with pytest.raises(SpecError):
            bad.validate(spec)
        bad = make_params(spec, alpha_state=np.vstack([np.ones(3), np.zeros(3)]))
        with pytest.raises(SpecError):
            bad.validate(spec)
        lam = np.ones(spec.n_within_items)
        lam[0] = 2.0
        with pytest.raises(SpecError):
            make_params(spec, lambda_within=lam).validate(spec)


class TestWithinMeasurement:
    def test_zero_factor_vector(self):
        spec = simulation_spec()
        params = make_params(spec)
        out = within_measurement_mean(spec, params, np.zeros(3))
        assert out.shape == (9,)
        assert np.all(out == 0.0)

    def test_simple_structure_unit_vector(self):
        spec = simulation_spec()
        params = make_params(spec)
        e1 = np.array([1.0, 0.0, 0.0])
        out = within_measurement_mean(spec, params, e1)
        assert np.allclose(out[:3], params.lambda_within[:3])
        assert np.all(out[3:] == 0.0)

    def test_reported_first_free_loading(self):
        # Factor-1 block with scaling item 1.0 and the first free loading at
        # its reported posterior mean of 1.31.
        spec = empirical_spec()
        lam = np.ones(17)
        lam[1] = 1.31
        params = make_params(spec, lambda_within=lam)
        eta = np.zeros(7)
        eta[0] = 1.0
        out = within_measurement_mean(spec, params, eta)
        assert np.allclose(out[:3], [1.0, 1.31, 1.0])
        assert np.all(out[3:] == 0.0)

    def test_dimension_mismatch(self):
        spec = simulation_spec()
        params = make_params(spec)
        with pytest.raises(SpecError):
            within_measurement_mean(spec, params, np.zeros(4))


class TestBetweenMeasurement:
    def test_zero(self):
        spec = simulation_spec()
        params = make_params(spec)
        assert np.all(between_measurement_mean(params, 0.0) == 0.0)

    def test_reported_loadings(self):
        spec = simulation_spec()
        params = make_params(spec, lambda_between=np.array([1.0, 1.20, 0.41]))
        out = between_measurement_mean(params, 1.0)
        assert np.allclose(out, [1.0, 1.20, 0.41])

    def test_linearity(self):
        spec = simulation_spec()
        params = make_params(spec, lambda_between=np.array([1.0, 1.20, 0.41]))
        one = between_measurement_mean(params, 1.0)
        two = between_measurement_mean(params, 2.0)
        assert np.allclose(two, 2.0 * one)


class TestWithinStructural:
    def test_zero_ar(self):
        alpha = np.array([0.2, -0.1, 0.4])
        out = within_structural_mean(alpha, np.zeros(3), np.ones(3))
        assert np.allclose(out, alpha)

    def test_identity_ar(self):
        lag = np.array([0.5, -0.3, 1.2])
        out = within_structural_mean(np.zeros(3), np.ones(3), lag)
        assert np.allclose(out, lag)

    def test_reported_ar_coefficient(self):
        # alpha 0.1, AR coefficient 0.49 (reported regime-1 posterior mean for
        # the first scale), lag 1.0 -> 0.59.
        out = within_structural_mean(np.array([0.1]), np.array([0.49]), np.array([1.0]))
        assert np.allclose(out, [0.59])


class TestPersonEffects:
    def test_zero_inputs_return_state_parameters(self):
        spec = simulation_spec()
        params = make_params(spec)
        alpha, b1 = person_effects(params, 2, 0.0, np.zeros(3))
        assert np.allclose(alpha, params.alpha_state[1])
        assert np.allclose(b1, params.b1_state[1])

    def test_reported_regime1_values(self):
        # alpha_21(s=1)1 = 0.09 and b2_1 = -0.18 give -0.09 at eta2 = 1.
        spec = empirical_spec()
        alpha1 = np.full(7, 0.09)
        params = make_params(
            spec,
            alpha_state=np.vstack([alpha1, alpha1 + 0.3]),
            b2=np.full(7, -0.18),
        )
        alpha, _ = person_effects(params, 1, 1.0, np.zeros(7))
        assert np.allclose(alpha, -0.09)

    def test_zeta_shift_is_exact(self):
        spec = simulation_spec()
        params = make_params(spec)
        a0, _ = person_effects(params, 1, 0.7, np.zeros(3))
        a1, _ = person_effects(params, 1, 0.7, np.full(3, 1.25))
        assert np.allclose(a1 - a0, 1.25)

    def test_bad_state(self):
        spec = simulation_spec()
        params = make_params(spec)
        with pytest.raises(SpecError):
            person_effects(params, 3, 0.0, np.zeros(3))


class TestSwitchLogit:
    def test_all_zero(self):
        spec = simulation_spec()
        params = make_params(spec)
        assert switch_logit(params, 0.0, np.zeros(3)) == 0.0

    def test_intercept_only(self):
        spec = simulation_spec()
        params = make_params(spec, gamma1=1.48)
        assert np.isclose(switch_logit(params, 0.5, np.ones(3)), 1.48)

    def test_reported_lag_effect(self):
        # gamma3 for the last factor at its reported mean -0.71: a unit lag on
        # that factor alone yields -0.71.
        spec = empirical_spec()
        g3 = np.zeros(7)
        g3[6] = -0.71
        params = make_params(spec, gamma3=g3)
        lag = np.zeros(7)
        lag[6] = 1.0
        assert np.isclose(switch_logit(params, 0.0, lag), -0.71)


class TestStayProbability:
    def test_uniform(self):
        assert np.allclose(stay_probability(np.zeros(2)), [0.5, 0.5])

    def test_log3(self):
        out = stay_probability(np.array([np.log(3.0), 0.0]))
        assert np.allclose(out, [0.75, 0.25])

    def test_overflow_guard(self):
        out = stay_probability(np.array([1000.0, 0.0]))
        assert np.allclose(out, [1.0, 0.0])
        assert np.all(np.isfinite(out))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=5),
           st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, nu, shift):
        nu = np.asarray(nu)
        a = stay_probability(nu)
        b = stay_probability(nu + shift)
        assert np.all(np.abs(a - b) < 1e-12)
        assert abs(a.sum() - 1.0) < 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(SpecError):
            stay_probability(np.array([np.inf, 0.0]))


class TestTransitionMatrix:
    def test_reported_switchback_row(self):
        spec = simulation_spec()
        params = make_params(spec, p12=0.097)
        mat = transition_matrix(spec, params, 0.0, np.zeros(3))
        assert np.allclose(mat[1], [0.097, 0.903])

    def test_neutral_logit(self):
        spec = simulation_spec()
        params = make_params(spec)
        mat = transition_matrix(spec, params, 0.0, np.zeros(3))
        assert np.allclose(mat[0], [0.5, 0.5])

    @given(st.floats(-3, 3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    @settings(max_examples=200, deadline=None)
    def test_rows_sum_to_one(self, eta2, lag):
        spec = simulation_spec()
        params = make_params(
            spec, gamma1=0.7, gamma2=-0.2,
            gamma3=np.array([-0.6, -0.5, -0.7]),
            gamma4=np.array([-0.7, -0.7, -0.7]),
        )
        mat = transition_matrix(spec, params, eta2, np.asarray(lag))
        assert np.all(np.abs(mat.sum(axis=-1) - 1.0) < 1e-12)
        assert np.all((mat >= 0) & (mat <= 1))

    def test_batched_inputs(self):
        spec = simulation_spec()
        params = make_params(spec, gamma3=np.array([-0.6, -0.5, -0.7]))
        mat = transition_matrix(spec, params, np.zeros(4), np.zeros((4, 3)))
        assert mat.shape == (4, 2, 2)


class TestLinearity:
    def test_structural_mean_affine(self):
        rng = np.random.default_rng(7)
        alpha = rng.normal(size=3)
        b1 = rng.normal(size=3)
        a, b = rng.normal(size=3), rng.normal(size=3)
        f = lambda x: within_structural_mean(alpha, b1, x)
        assert np.allclose(f(a + b), f(a) + f(b) - f(np.zeros(3)), atol=1e-12)

    def test_person_effects_affine_in_eta2(self):
        spec = simulation_spec()
        params = make_params(spec, b2=np.array([-0.7, -0.6, -0.5]),
                             omega2_state=0.1 * np.ones((2, 3)))
        f = lambda x: person_effects(params, 1, x, np.zeros(3))[0]
        a, b = 0.4, -1.1
        assert np.allclose(f(a + b), f(a) + f(b) - f(0.0))


class TestOrderingConstraint:
    def test_delta_alpha_orders_states(self):
        spec = simulation_spec()
        params = make_params(spec)
        assert np.all(params.delta_alpha >= 0)
        assert np.all(params.alpha_state[1] >= params.alpha_state[0])


class TestDataset:
    def test_clamp_mask(self):
        ds = Dataset(
            within_items=np.zeros((2, 4, 9)),
            between_items=np.zeros((2, 3)),
            occasion_times=np.arange(4),
            observed_dropout=np.array([2, DROPOUT_NONE]),
        )
        mask = ds.clamp_mask()
        assert mask[0].tolist() == [False, False, True, True]
        assert not mask[1].any()

    def test_occasion_times_must_increase(self):
        with pytest.raises(SpecError):
            Dataset(np.zeros((1, 3, 9)), np.zeros((1, 3)),
                    np.array([0, 2, 1]), np.array([DROPOUT_NONE]))

    def test_dropout_bounds(self):
        with pytest.raises(SpecError):
            Dataset(np.zeros((1, 3, 9)), np.zeros((1, 3)),
                    np.arange(3), np.array([5]))

    def test_slice_occasions_drops_future_dropout(self):
        ds = Dataset(np.zeros((2, 6, 9)), np.zeros((2, 3)),
                     np.arange(6), np.array([1, 4]))
        cut = ds.slice_occasions(3)
        assert cut.observed_dropout.tolist() == [1, DROPOUT_NONE]


class TestLatentStateValidation:
    def test_states_clamped_after_dropout(self):
        spec = simulation_spec(n_persons=2, n_occasions=4)
        states = np.array([[1, 1, 2, 2], [1, 1, 1, 1]], dtype=np.int8)
        latent = LatentState(
            eta1=np.zeros((2, 4, 3)), eta2=np.zeros(2),
            zeta2=np.zeros((2, 3)), states=states,
        )
        latent.validate(spec, observed_dropout=np.array([2, DROPOUT_NONE]))
        bad = LatentState(
            eta1=np.zeros((2, 4, 3)), eta2=np.zeros(2),
            zeta2=np.zeros((2, 3)),
            states=np.array([[1, 1, 2, 1], [1, 1, 1, 1]], dtype=np.int8),
        )
        with pytest.raises(SpecError):
            bad.validate(spec, observed_dropout=np.array([2, DROPOUT_NONE]))


class TestPhantomOccasions:
    def test_gaps_fill_with_missing_rows(self):
        items = np.arange(2 * 3 * 1, dtype=float).reshape(2, 3, 1)
        out, grid, phantom = insert_phantom_occasions(items, [0, 2, 3])
        assert grid.tolist() == [0, 1, 2, 3]
        assert phantom.tolist() == [False, True, False, False]
        assert np.all(np.isnan(out[:, 1, :]))
        assert np.allclose(out[:, 0, 0], items[:, 0, 0])
        assert np.allclose(out[:, 3, 0], items[:, 2, 0])

    def test_equidistant_unchanged(self):
        items = np.ones((1, 4, 2))
        out, grid, phantom = insert_phantom_occasions(items, [0, 1, 2, 3])
        assert out.shape == items.shape
        assert not phantom.any()


class TestPreprocessItems:
    def test_center_and_invert(self):
        items = np.zeros((2, 2, 2))
        items[:, 0, 0] = [1.0, 3.0]   # first-occasion mean 2.0
        items[:, 0, 1] = [1.0, 1.0]
        items[:, 1, :] = 5.0
        out = preprocess_items(items, invert_mask=np.array([False, True]))
        assert np.allclose(out[:, 0, 0], [-1.0, 1.0])
        assert np.allclose(out[:, 0, 1], [0.0, 0.0])     # inverted then centered at -1
        assert np.allclose(out[:, 1, 1], -5.0 + 1.0)
