import math

import numpy as np
import pytest

from modules.core_model import Control, ControlError, GridError, ParamPoint, Payoff, Penalty
from modules.generators import DerivativeBundle, generator_apply, nonlocal_apply
from modules.oracles import gaussian_semigroup, g_heat_reference
from modules.pde_engine import (
    BackwardStepper,
    CFLViolationError,
    MonotonicityError,
    SchemeConfig,
    ValueField,
    check_time_consistency,
    convergence_study,
    dp_step,
    evaluate_control_dp,
    interior_mask,
    max_admissible_dt,
    penalty_field,
    solve,
    solve_risk_measure,
)
from modules.stochastic_lab import McConfig, mc_penalty, paste_bifurcation, random_control
from tests.conftest import random_small_model

LINEAR = SchemeConfig()
CLAMPED = SchemeConfig(boundary="clamp-to-payoff")


def next_field(model, values):
    return ValueField(t=model.time.time_at(1), level=1, values=np.asarray(values, dtype=float),
                      policy=np.zeros(model.space.shape, dtype=np.int64))


def mixed_model(make_model):
    candidates = [
        ParamPoint.diffusion([[0.25]], b=[0.4]),
        ParamPoint.diffusion([[1.0]], b=[-0.3], jumps=[(0.35, 1.0)]),
        ParamPoint.diffusion([[0.6]], b=[0.0], jumps=[(-0.8, 0.5)]),
    ]
    return make_model(candidates, payoff=Payoff(family="smoothed_call", width=0.3))


def test_dp_step_keeps_constants(make_model):
    model = mixed_model(make_model)
    out = dp_step(next_field(model, np.full(model.space.shape, 2.5)), 0.0, model)
    np.testing.assert_allclose(out.values, 2.5, rtol=0, atol=1e-13)


def test_dp_step_penalty_only(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])], penalty=Penalty(family="constant", c=5.0))
    out = dp_step(next_field(model, np.zeros(model.space.shape)), 0.0, model)
    np.testing.assert_allclose(out.values, -5.0 * model.time.dt, rtol=0, atol=1e-15)


def test_dp_step_exact_on_quadratics(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])])
    x = model.space.points()[..., 0]
    out = dp_step(next_field(model, x ** 2), 0.0, model)
    np.testing.assert_allclose(out.values[1:-1], x[1:-1] ** 2 + model.time.dt, rtol=0, atol=1e-9)


def test_dp_step_requires_cfl(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])], N=5)
    with pytest.raises(CFLViolationError) as exc:
        dp_step(next_field(model, np.zeros(model.space.shape)), 0.0, model)
    assert exc.value.max_dt == pytest.approx(max_admissible_dt(model))
    assert "maximal admissible dt" in str(exc.value)


def test_dp_step_rejects_off_grid_time(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])])
    with pytest.raises(GridError):
        dp_step(next_field(model, np.zeros(model.space.shape)), 0.5 * model.time.dt, model)


def test_cross_diffusion_needs_diagonal_dominance(heat2d_model):
    theta = ParamPoint.diffusion([[1.0, 0.45], [0.45, 0.25]])
    model = heat2d_model.pinned(theta)
    with pytest.raises(MonotonicityError):
        solve(model)


def test_scheme_properties_on_random_fields(make_model, rng):
    model = mixed_model(make_model)
    shape = model.space.shape
    for _ in range(100):
        v = rng.normal(size=shape)
        w = v + np.abs(rng.normal(size=shape))

        low = dp_step(next_field(model, v), 0.0, model, CLAMPED).values
        high = dp_step(next_field(model, w), 0.0, model, CLAMPED).values
        assert np.all(low <= high + 1e-12)

        base = dp_step(next_field(model, v), 0.0, model, LINEAR).values
        for c in (3.7, -3.7):
            shifted = dp_step(next_field(model, v + c), 0.0, model, LINEAR).values
            np.testing.assert_allclose(shifted, base + c, rtol=0, atol=1e-12)

        other = dp_step(next_field(model, w), 0.0, model, LINEAR).values
        mixed = dp_step(next_field(model, 0.3 * v + 0.7 * w), 0.0, model, LINEAR).values
        assert np.all(mixed <= 0.3 * base + 0.7 * other + 1e-12)

        for factor in (0.0, 0.5, 2.0):
            scaled = dp_step(next_field(model, factor * v), 0.0, model, LINEAR).values
            np.testing.assert_allclose(scaled, factor * base, rtol=0, atol=1e-12)


def test_singleton_step_is_linear(make_model, rng):
    model = make_model([ParamPoint.diffusion([[0.5]], b=[0.2], jumps=[(0.45, 1.0)])])
    v, w = rng.normal(size=model.space.shape), rng.normal(size=model.space.shape)
    total = dp_step(next_field(model, v + w), 0.0, model).values
    parts = dp_step(next_field(model, v), 0.0, model).values + dp_step(next_field(model, w), 0.0, model).values
    np.testing.assert_allclose(total, parts, rtol=0, atol=1e-12)


def test_discrete_operator_matches_generator(make_model):
    theta = ParamPoint.diffusion([[0.5]], b=[0.2], jumps=[(0.5, 1.5)])
    model = make_model([theta], M=241)
    stepper = BackwardStepper(model)
    x = model.space.points()[..., 0]
    f = np.sin(x)
    update = stepper.apply_candidate(stepper.compiled[0][0], f, stepper.extend(f))
    rate = (update - f) / model.time.dt

    dx = model.space.dx[0]
    for i in range(60, 181, 20):
        bundle = DerivativeBundle.of(lambda z: float(np.sin(z[0])), lambda z: np.array([np.cos(z[0])]),
                                     lambda z: np.array([[-np.sin(z[0])]]), [x[i]])
        exact = generator_apply(theta, bundle) + nonlocal_apply(theta.jumps, bundle, [x[i]])
        # upwind drift is first order in dx
        assert rate[i] == pytest.approx(exact, abs=2.0 * dx)


def test_solve_heat_matches_gaussian_oracle(heat_model):
    model = heat_model.with_payoff(Payoff(family="quadratic"))
    result = solve(model)
    assert len(result.history) == model.time.N + 1
    np.testing.assert_array_equal(result.history[-1].values, model.payoff.evaluate(model.space.points()))

    mask = interior_mask(model)
    x = model.space.points()[mask]
    exact = gaussian_semigroup(model.payoff, [[1.0]], [0.0], 0.5, x)
    assert np.max(np.abs(result.level0.values[mask] - exact)) <= 5e-3


def test_gheat_convex_and_concave_policies(gheat_model):
    result = solve(gheat_model)
    center = gheat_model.space.nearest_cell(np.array([0.0]))
    assert abs(result.level0.values[center] - 0.5) <= 5e-3
    mask = interior_mask(gheat_model)
    assert np.all(result.level0.policy[mask] == 1)

    concave = gheat_model.with_payoff(Payoff(family="quadratic", coef=-1.0))
    result = solve(concave)
    assert np.all(result.level0.policy[mask] == 0)
    x = concave.space.points()[mask]
    reference = g_heat_reference(concave.payoff, 0.25, 1.0, 0.5, x)
    assert np.max(np.abs(result.level0.values[mask] - reference)) <= 5e-3


def test_constant_penalty_shifts_value(make_model):
    candidates = [ParamPoint.diffusion([[0.25]]), ParamPoint.diffusion([[1.0]], b=[0.5])]
    free = solve(make_model(candidates, payoff=Payoff(family="absolute")))
    charged = solve(make_model(candidates, payoff=Payoff(family="absolute"), penalty=Penalty(family="constant", c=1.5)))
    np.testing.assert_allclose(charged.level0.values, free.level0.values - 1.5 * 0.2, rtol=0, atol=1e-12)


def test_optimal_control_replay_and_dominance(penalized_model):
    optimal = solve(penalized_model, CLAMPED)
    replay = evaluate_control_dp(optimal.control, penalized_model, CLAMPED)
    for k in range(penalized_model.time.N + 1):
        np.testing.assert_allclose(replay.values(k), optimal.values(k), rtol=0, atol=1e-12)
    for seed in range(5):
        value = evaluate_control_dp(random_control(penalized_model, seed), penalized_model, CLAMPED)
        for k in range(penalized_model.time.N + 1):
            assert np.all(value.values(k) <= optimal.values(k) + 1e-12)


def test_singleton_control_equals_solve(heat_model):
    control = Control.constant(heat_model, 0)
    np.testing.assert_array_equal(evaluate_control_dp(control, heat_model).level0.values,
                                  solve(heat_model).level0.values)


def test_control_out_of_range_is_rejected(heat_model):
    with pytest.raises(ControlError):
        evaluate_control_dp(Control.constant(heat_model, 1), heat_model)


def test_time_consistency_is_exact(gheat_model, penalized_model):
    assert check_time_consistency(gheat_model, LINEAR, 0.25) == 0.0
    nodes = [penalized_model.time.time_at(k) for k in (10, 30, 45)]
    assert check_time_consistency(penalized_model, LINEAR, nodes) == 0.0
    with pytest.raises(GridError):
        check_time_consistency(gheat_model, LINEAR, 0.2501)


def test_time_consistency_on_random_models(rng):
    for _ in range(20):
        model = random_small_model(rng)
        first, second = sorted(int(k) for k in rng.choice(np.arange(1, model.time.N), size=2, replace=False))
        assert check_time_consistency(model, LINEAR, model.time.time_at(first)) == 0.0
        assert check_time_consistency(model, LINEAR, [model.time.time_at(first), model.time.time_at(second)]) == 0.0


@pytest.mark.slow
def test_dominance_over_random_controls(rng):
    for _ in range(5):
        model = random_small_model(rng)
        optimal = solve(model, CLAMPED)
        replay = evaluate_control_dp(optimal.control, model, CLAMPED)
        np.testing.assert_allclose(replay.level0.values, optimal.level0.values, rtol=0, atol=1e-12)
        for seed in range(100):
            value = evaluate_control_dp(random_control(model, seed), model, CLAMPED)
            for k in range(model.time.N + 1):
                assert np.all(value.values(k) <= optimal.values(k) + 1e-12)


def test_time_consistency_with_other_outer_scheme(gheat_model):
    gap = check_time_consistency(gheat_model, LINEAR, 0.25, outer_scheme=CLAMPED)
    assert 0.0 <= gap < 1.0


def test_penalty_field_integrates_running_cost(make_model):
    theta = ParamPoint.diffusion([[1.0]], b=[1.0])
    model = make_model([theta], penalty=Penalty(family="quadratic_drift", eta=2.0))
    result = penalty_field(Control.constant(model, 0), model)
    for k in (0, model.time.N // 2, model.time.N):
        expected = 1.0 * (model.time.T - model.time.time_at(k))
        np.testing.assert_allclose(result.values(k), expected, rtol=0, atol=1e-12)


def test_penalty_field_agrees_with_simulated_penalty(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])], penalty=Penalty(family="state_quadratic", kappa=1.0))
    control = Control.constant(model)
    field = penalty_field(control, model)
    for y in (0.0, 0.5):
        cell = model.space.nearest_cell(np.array([y]))
        # both are left-point sums on the same time grid
        estimate = mc_penalty(control, 0.0, [y], model, McConfig(n_paths=20000, seed=31))
        assert estimate.within(float(field.level0.values[cell]), extra=1e-3)


def test_risk_measure_is_negated_procedure(gheat_model):
    risk = solve_risk_measure(gheat_model)
    direct = solve(gheat_model.with_payoff(gheat_model.payoff.negated()))
    np.testing.assert_array_equal(risk.level0.values, -direct.level0.values)


def test_interior_mask_shrinks_with_time(heat_model):
    early = interior_mask(heat_model, elapsed=0.01)
    late = interior_mask(heat_model)
    assert late.sum() < early.sum()
    assert not late[0] and not late[-1]
    assert late[heat_model.space.nearest_cell(np.array([0.0]))]


def test_bifurcated_control_combines_branches(gheat_model):
    s_level = gheat_model.time.N // 2
    low, high = Control.constant(gheat_model, 0), Control.constant(gheat_model, 1)
    region = gheat_model.space.points()[..., 0] >= 0.0
    result = evaluate_control_dp(paste_bifurcation(low, high, s_level, region), gheat_model)
    expected = np.where(region, evaluate_control_dp(low, gheat_model).values(s_level),
                        evaluate_control_dp(high, gheat_model).values(s_level))
    np.testing.assert_array_equal(result.values(s_level), expected)


def test_threads_do_not_change_values(penalized_model):
    single = solve(penalized_model, SchemeConfig(threads=1)).level0.values
    pooled = solve(penalized_model, SchemeConfig(threads=4)).level0.values
    np.testing.assert_array_equal(single, pooled)


def test_two_dimensional_solve_is_symmetric(heat2d_model):
    result = solve(heat2d_model)
    values = result.level0.values
    np.testing.assert_allclose(values, values.T, rtol=0, atol=1e-12)


def test_convergence_of_constant_payoff(heat_model):
    model = heat_model.with_payoff(Payoff(family="quadratic", coef=0.0, offset=1.25))
    rows = convergence_study(model.with_space(M=[61]).with_time(N=20), 3)
    assert all(row.sup_error <= 1e-12 for row in rows)


def test_observed_order_is_log2_of_error_ratio(make_model):
    model = make_model([ParamPoint.diffusion([[1.0]])], payoff=Payoff(family="smoothed_call", width=0.5), M=21)
    rows = convergence_study(model, 3)
    assert rows[0].observed_order is None
    for previous, row in zip(rows, rows[1:]):
        assert row.dt == pytest.approx(previous.dt / 4)
        assert row.observed_order == pytest.approx(math.log2(previous.sup_error / row.sup_error))


@pytest.mark.slow
def test_heat_convergence_order(heat_model):
    rows = convergence_study(heat_model, 4, oracle="closed-form")
    assert len(rows) == 4
    assert rows[-1].observed_order >= 0.8


@pytest.mark.slow
def test_gheat_errors_decrease_against_finest(gheat_model):
    model = gheat_model.with_payoff(Payoff(family="smoothed_call", width=0.5))
    rows = convergence_study(model, 3, oracle="finest")
    assert len(rows) == 2
    assert rows[1].sup_error < rows[0].sup_error

