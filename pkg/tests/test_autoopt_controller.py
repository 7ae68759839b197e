import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import constants
from autoopt_controller import (AutoOptController, ControllerConfig, GammaState, autoopt_step, build_G,
                                clamp_and_convert, compute_A_hat, compute_b_hat, compute_V_hat, estimate_gamma,
                                ewma_update, relative_det, solve_gamma)
import checks
from checks import check_ewma, check_scale, check_unbiasedness
from core_math import Rng, mat2, rng_normal, rng_uniform, vec2
from errors import ConfigError, ShapeMismatchError, VarianceUndefinedError
from experiment_config import ExperimentConfig
from nn_engine import BatchGradStats
from optimizers import OptimizerState


def _stats(grads: np.ndarray, hdiag=None, name="g") -> BatchGradStats:
    hdiag = np.ones(grads.shape[1]) if hdiag is None else hdiag
    g = grads.mean(axis=0)
    return BatchGradStats(name, g, grads.shape[0], float(np.sum(grads * grads / hdiag)), hdiag)


def test_build_G_examples():
    c1, c2 = build_G(np.array([1.0, 2.0]), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(c1, [1.0, 2.0])
    np.testing.assert_array_equal(c2, [1.0, 1.0])
    g = np.array([3.0, -1.0])
    assert not np.any(build_G(g, g)[1])
    np.testing.assert_array_equal(build_G(g, np.zeros(2))[1], g)


def test_build_G_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        build_G(np.ones(2), np.ones(3))


def test_A_hat_examples():
    A = compute_A_hat((np.array([1.0, 2.0]), np.array([1.0, 1.0])), np.ones(2))
    np.testing.assert_array_equal(A, [[5.0, 3.0], [3.0, 2.0]])
    A = compute_A_hat((np.array([1.0, 2.0]), np.zeros(2)), np.ones(2))
    assert A[0, 1] == A[1, 1] == 0.0


def test_A_hat_matches_explicit_matrix_product(rng):
    p = 50
    g, g_prev = rng_normal(rng, (p,)), rng_normal(rng, (p,))
    hdiag = rng_uniform(rng, (p,), 0.5, 2.0)
    G = np.column_stack(build_G(g, g_prev))
    expected = G.T @ np.diag(1.0 / hdiag) @ G
    np.testing.assert_allclose(compute_A_hat(build_G(g, g_prev), hdiag), expected, rtol=1e-12, atol=1e-12)


def test_V_hat_hand_example():
    grads = np.array([[2.0], [0.0]])
    assert compute_V_hat(float(np.sum(grads ** 2)), grads.mean(axis=0), np.ones(1), 2) == 1.0


def test_V_hat_zero_spread():
    grads = np.tile(np.array([[1.5, -2.0, 0.5]]), (4, 1))
    assert compute_V_hat(float(np.sum(grads ** 2)), grads.mean(axis=0), np.ones(3), 4) == 0.0


def test_V_hat_needs_two_samples():
    with pytest.raises(VarianceUndefinedError):
        compute_V_hat(1.0, np.ones(2), np.ones(2), 1)


def test_V_hat_is_unbiased():
    p, n, batches = 10, 8, 20_000
    rng = Rng(5)
    g_bar = rng_normal(rng.child(0), (p,))
    draws = rng_normal(rng.child(1), (batches, n, p)) + g_bar
    means = draws.mean(axis=1)
    sumsq = np.einsum("bnp,bnp->b", draws, draws)
    vhats = [compute_V_hat(s, g, np.ones(p), n) for s, g in zip(sumsq, means)]
    # trace(Sigma) / N with Sigma = I
    assert np.mean(vhats) == pytest.approx(p / n, rel=0.02)


def _V_hat_over_n_squared(per_sample_sumsq, g, hdiag, n):
    quad = float(np.sum(g * g / hdiag))
    return max((per_sample_sumsq - n * quad) / (n * n), 0.0)


def test_unbiasedness_suite_reports_ratio():
    result = check_unbiasedness(ExperimentConfig(), 0, batches=20_000)
    assert result.passed, result.detail
    assert result.measured == pytest.approx(1.0, abs=0.01)
    assert "mean(V_hat)/expected" in result.detail


def test_unbiasedness_suite_catches_wrong_divisor(monkeypatch):
    monkeypatch.setattr(checks, "compute_V_hat", _V_hat_over_n_squared)
    result = check_unbiasedness(ExperimentConfig(), 0, batches=20_000)
    assert not result.passed
    # N = 8: dividing by N^2 instead of N(N - 1) scales the mean by 7/8
    assert result.measured == pytest.approx(7 / 8, abs=0.01)


def test_b_hat_components_match():
    np.testing.assert_array_equal(compute_b_hat(0.0), [0.0, 0.0])
    np.testing.assert_array_equal(compute_b_hat(1.0), [1.0, 1.0])


def test_solve_gamma_examples():
    cfg = ControllerConfig(ridge=0.0)
    np.testing.assert_array_equal(solve_gamma(mat2(5, 3, 3, 2), vec2(0, 0), cfg), [0.0, 0.0])
    np.testing.assert_array_equal(solve_gamma(mat2(2, 0, 0, 1), vec2(1, 1), cfg), [0.5, 1.0])


def test_solve_gamma_alpha_only():
    cfg = ControllerConfig(ridge=0.0, solver=constants.ADAGRAD_ALPHA_ONLY)
    np.testing.assert_array_equal(solve_gamma(mat2(4, 1, 1, 1), vec2(1, 1), cfg), [0.25, 0.0])


def test_ewma_examples():
    state = GammaState()
    np.testing.assert_allclose(ewma_update(state, vec2(1, 1), 0.9), [0.1, 0.1])
    state = GammaState(gamma_ewma=vec2(0.7, 0.2))
    np.testing.assert_array_equal(ewma_update(state, vec2(0.3, 0.4), 0.0), [0.3, 0.4])


def test_ewma_geometric_convergence():
    assert check_ewma(ExperimentConfig(), 0).passed


def test_clamp_examples():
    cfg = ControllerConfig()
    state = GammaState(gamma_ewma=vec2(0.0, 0.0))
    assert clamp_and_convert(state, cfg) == (1.0, 0.0, False)

    state = GammaState(gamma_ewma=vec2(0.5, 1.0))
    alpha, beta, clamped = clamp_and_convert(state, ControllerConfig(beta_max=0.999))
    assert (alpha, beta, clamped) == (0.5, 0.999, True)
    np.testing.assert_allclose(state.gamma_ewma, [0.5, 0.5 * 0.999])

    state = GammaState(gamma_ewma=vec2(1.2, 0.0))
    alpha, _, clamped = clamp_and_convert(state, ControllerConfig(alpha_min=1e-6, init_alpha=1e-3))
    assert alpha == 1e-6 and clamped
    assert state.gamma_ewma[0] == 1.0 - 1e-6


_gamma = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(_gamma, _gamma)
def test_clamped_output_is_always_feasible(gamma1, gamma2):
    cfg = ControllerConfig()
    state = GammaState(gamma_ewma=vec2(gamma1, gamma2))
    alpha, beta, _ = clamp_and_convert(state, cfg)
    assert cfg.alpha_min <= alpha <= cfg.alpha_max
    assert 0.0 <= beta <= cfg.beta_max
    assert state.alpha == alpha and state.beta == beta


def test_gamma_is_invariant_to_gradient_scale():
    assert check_scale(ExperimentConfig(), 3).passed


def test_config_validation():
    with pytest.raises(ConfigError):
        ControllerConfig(upsilon=1.0)
    with pytest.raises(ConfigError):
        ControllerConfig(alpha_min=2.0, alpha_max=1.0)
    with pytest.raises(ConfigError):
        ControllerConfig(solver="newton")
    with pytest.raises(ConfigError):
        ControllerConfig(min_rel_det=1.0)


def test_for_optimizer_defaults():
    adam = ControllerConfig.for_optimizer(constants.OPT_ADAM)
    assert adam.alpha_max == 1.0 and adam.init_alpha == 0.001
    adagrad = ControllerConfig.for_optimizer(constants.OPT_ADAGRAD)
    assert adagrad.solver == constants.ADAGRAD_ALPHA_ONLY
    full = ControllerConfig.for_optimizer(constants.OPT_ADAGRAD, adagrad_mode=constants.ADAGRAD_FULL)
    assert full.solver == constants.ADAGRAD_FULL
    assert ControllerConfig.for_optimizer(constants.OPT_SGD, upsilon=None).upsilon == constants.DEFAULT_UPSILON


def test_warmup_step_is_plain_sgd_at_init_alpha(rng):
    cfg = ControllerConfig(init_alpha=0.0625)
    grads = rng_normal(rng, (8, 6))
    w = rng_normal(rng, (6,))
    opt_state = OptimizerState.zeros(6)
    opt_state.advance()
    w_next, record = autoopt_step("g", w, _stats(grads), opt_state, GammaState(), cfg)
    np.testing.assert_array_equal(w_next, w - 0.0625 * grads.mean(axis=0))
    assert record.flags == (constants.FLAG_WARMUP,)
    assert record.alpha == 0.0625 and record.beta == 0.0


def test_noise_free_batch_gives_newton_step(rng):
    cfg = ControllerConfig(upsilon=0.0, ridge=0.0, warmup_steps=0)
    grads = np.tile(rng_normal(rng, (1, 4)), (5, 1))
    w = rng_normal(rng, (4,))
    opt_state = OptimizerState.zeros(4)
    opt_state.momentum_buffer = rng_normal(rng, (4,))
    w_next, record = autoopt_step("g", w, _stats(grads), opt_state, GammaState(), cfg)
    assert record.vhat == pytest.approx(0.0, abs=1e-12)
    assert record.alpha == pytest.approx(1.0) and record.beta == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(w_next, w - grads[0], atol=1e-12)


def test_zero_gradient_keeps_previous_gamma(caplog):
    cfg = ControllerConfig(upsilon=0.0, ridge=0.0, warmup_steps=0)
    state = GammaState(gamma_ewma=vec2(0.9, 0.0))
    opt_state = OptimizerState.zeros(2)
    grads = np.array([[1.0, 1.0], [-1.0, -1.0]])
    # batch mean 0 and g_prev = 0: both columns vanish
    _, record = autoopt_step("g", np.zeros(2), _stats(grads), opt_state, state, cfg)
    assert constants.FLAG_SINGULAR in record.flags
    assert record.gamma1 == pytest.approx(0.9)
    assert "keeping previous gamma" in caplog.text


def test_equal_columns_fall_back_to_alpha_only(rng):
    cfg = ControllerConfig(upsilon=0.0, ridge=0.0, warmup_steps=0)
    grads = 2.0 + rng_normal(rng, (8, 3))
    # g_prev = 0 makes both columns equal
    _, record = autoopt_step("g", np.zeros(3), _stats(grads), OptimizerState.zeros(3), GammaState(), cfg)
    assert constants.FLAG_ILL_CONDITIONED in record.flags
    assert constants.FLAG_SINGULAR not in record.flags
    assert record.gamma2 == 0.0 and record.beta == 0.0
    assert record.gamma1 == pytest.approx(record.vhat / record.a11)


def test_step_after_warmup_stays_bounded(rng):
    cfg = ControllerConfig()
    signal = np.full(20, 3.0)
    controller = AutoOptController(cfg, ["g"])
    opt_state = OptimizerState.zeros(20)
    w = np.zeros(20)
    for _ in range(2):
        opt_state.advance()
        w = controller.step("g", w, _stats(signal + 0.05 * rng_normal(rng, (16, 20))), opt_state)
    warmup, second = controller.trace
    assert warmup.flags == (constants.FLAG_WARMUP,)
    # g_prev = 0.01 g_1 is almost parallel to g_2
    assert relative_det(mat2(second.a11, second.a12, second.a12, second.a22)) < 1e-6
    assert constants.FLAG_ILL_CONDITIONED in second.flags
    assert 0.1 < second.alpha < 0.11
    assert second.beta == 0.0


def test_relative_det_examples():
    assert relative_det(mat2(2, 0, 0, 1)) == 1.0
    assert relative_det(mat2(1, 1, 1, 1)) == 0.0
    assert relative_det(mat2(5, 3, 3, 2)) == pytest.approx(0.1)
    assert relative_det(mat2(0, 0, 0, 1)) == 0.0


def test_estimate_gamma_modes():
    cfg = ControllerConfig(ridge=0.0)
    gamma, reduced = estimate_gamma(mat2(2, 0, 0, 1), vec2(1, 1), cfg)
    np.testing.assert_allclose(gamma, [0.5, 1.0])
    assert not reduced
    gamma, reduced = estimate_gamma(mat2(4, 3.99, 3.99, 4), vec2(1, 1), cfg)
    np.testing.assert_allclose(gamma, [0.25, 0.0])
    assert reduced
    alpha_only = ControllerConfig(ridge=0.0, solver=constants.ADAGRAD_ALPHA_ONLY)
    assert estimate_gamma(mat2(4, 3.99, 3.99, 4), vec2(1, 1), alpha_only)[1] is False
    no_guard = ControllerConfig(ridge=0.0, min_rel_det=0.0)
    assert estimate_gamma(mat2(4, 3.99, 3.99, 4), vec2(1, 1), no_guard)[1] is False


def test_missing_sample_statistics_after_warmup():
    cfg = ControllerConfig(warmup_steps=0)
    stats = BatchGradStats("g", np.ones(2), 4, None, np.ones(2))
    with pytest.raises(VarianceUndefinedError):
        autoopt_step("g", np.zeros(2), stats, OptimizerState.zeros(2), GammaState(), cfg)


def test_missing_hessian_is_rejected():
    stats = BatchGradStats("g", np.ones(2), 4, 1.0, None)
    with pytest.raises(ValueError):
        autoopt_step("g", np.zeros(2), stats, OptimizerState.zeros(2), GammaState(), ControllerConfig())


def test_controller_emits_one_record_per_group_and_step(rng):
    names = ["a", "b", "c"]
    seen = []
    controller = AutoOptController(ControllerConfig(), names, trace_sink=seen.append)
    states = {name: OptimizerState.zeros(3) for name in names}
    for _ in range(4):
        for name in names:
            states[name].advance()
            controller.step(name, np.zeros(3), _stats(rng_normal(rng, (6, 3)), name=name), states[name])
    assert len(controller.trace) == len(seen) == 12
    assert [r.step for r in controller.trace if r.group == "b"] == [1, 2, 3, 4]
    cfg = ControllerConfig()
    assert all(cfg.alpha_min <= r.alpha <= cfg.alpha_max and r.beta >= 0.0 for r in controller.trace)


def test_fixed_controller_is_frozen(rng):
    controller = AutoOptController.fixed(0.5, 0.5, ["w"])
    state = OptimizerState.zeros(2)
    state.advance()
    controller.step("w", np.zeros(2), _stats(rng_normal(rng, (4, 2))), state)
    record = controller.trace[0]
    assert record.flags == (constants.FLAG_FROZEN,)
    assert (record.alpha, record.beta) == (0.5, 0.5)
    np.testing.assert_array_equal([record.gamma1, record.gamma2], [0.5, 0.25])
    assert controller.beta_for("w") == 0.5


@pytest.mark.parametrize("alpha", [2.0 ** -3, 0.5])
def test_frozen_at_gamma_matches_fixed_bitwise(rng, alpha):
    auto = AutoOptController(ControllerConfig(), ["w"])
    auto.freeze("w", vec2(1.0 - alpha, 0.0))
    fixed = AutoOptController.fixed(alpha, 0.0, ["w"])
    w_auto = w_fixed = rng_normal(rng, (3,))
    s_auto, s_fixed = OptimizerState.zeros(3), OptimizerState.zeros(3)
    for _ in range(5):
        stats = _stats(rng_normal(rng, (4, 3)))
        s_auto.advance()
        s_fixed.advance()
        w_auto = auto.step("w", w_auto, stats, s_auto)
        w_fixed = fixed.step("w", w_fixed, stats, s_fixed)
    assert np.array_equal(w_auto, w_fixed)


def test_trace_row_layout():
    controller = AutoOptController.fixed(0.25, 0.0, ["w"])
    state = OptimizerState.zeros(1)
    state.advance()
    controller.step("w", np.zeros(1), BatchGradStats("w", np.ones(1), 1, None, np.ones(1)), state)
    row = controller.trace[0].as_row(seed=3)
    assert len(row) == len(constants.SCHEMA_TRACE[2])
    assert row[:5] == [3, 1, "w", 0.25, 0.0]
    assert row[-1] == constants.FLAG_FROZEN
