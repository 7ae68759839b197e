"""Per-group learning-rate and momentum estimation.

Each step, for one parameter group with batch gradient g, previous momentum
gradient g_prev and diagonal Hessian estimate h:

    columns   c1 = g, c2 = g - g_prev
    A_hat     = [[c1'H^-1 c1, c1'H^-1 c2], [c2'H^-1 c1, c2'H^-1 c2]]
    V_hat     = (sum_i g_i'H^-1 g_i - N g'H^-1 g) / (N (N - 1))
    b_hat     = [V_hat, V_hat]
    gamma_raw = (A_hat + ridge tr(A_hat)/2 I)^-1 b_hat
                [b1 / a11, 0] instead when det(A_hat) < min_rel_det a11 a22
    gamma     = (1 - upsilon) gamma_raw + upsilon gamma_prev, then clamped

and (alpha, beta) = (1 - gamma1, gamma2 / (1 - gamma1)).
"""
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

import constants
from core_math import Mat2, Tensor, Vec2, check_finite, mat2, solve2, vec2, weighted_inner
from errors import ConfigError, ShapeMismatchError, SingularSystemError, VarianceUndefinedError
from nn_engine import BatchGradStats
from optimizers import OptimizerState, apply_update, heavy_ball_gradient, momentum_gradient


@dataclass(frozen=True)
class ControllerConfig:
    upsilon: float = constants.DEFAULT_UPSILON
    ridge: float = constants.DEFAULT_RIDGE
    alpha_min: float = constants.DEFAULT_ALPHA_MIN
    alpha_max: float = constants.ALPHA_MAX[constants.OPT_SGD]
    beta_max: float = constants.DEFAULT_BETA_MAX
    adagrad_mode: str = constants.ADAGRAD_ALPHA_ONLY
    init_alpha: float = constants.INIT_ALPHA[constants.OPT_SGD]
    warmup_steps: int = constants.DEFAULT_WARMUP_STEPS
    min_rel_det: float = constants.DEFAULT_MIN_REL_DET
    solver: str = constants.ADAGRAD_FULL

    def __post_init__(self):
        if not 0.0 <= self.upsilon < 1.0:
            raise ConfigError(f"upsilon must be in [0, 1), got {self.upsilon}")
        if self.ridge < 0.0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge}")
        if not 0.0 < self.alpha_min <= self.alpha_max:
            raise ConfigError(f"Need 0 < alpha_min <= alpha_max, got {self.alpha_min}, {self.alpha_max}")
        if not 0.0 <= self.beta_max < 1.0:
            raise ConfigError(f"beta_max must be in [0, 1), got {self.beta_max}")
        if not self.alpha_min <= self.init_alpha <= self.alpha_max:
            raise ConfigError(f"init_alpha {self.init_alpha} outside [{self.alpha_min}, {self.alpha_max}]")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0.0 <= self.min_rel_det < 1.0:
            raise ConfigError(f"min_rel_det must be in [0, 1), got {self.min_rel_det}")
        for name, value in (("adagrad_mode", self.adagrad_mode), ("solver", self.solver)):
            if value not in (constants.ADAGRAD_ALPHA_ONLY, constants.ADAGRAD_FULL):
                raise ConfigError(f"{name} must be 'alpha_only' or 'full', got '{value}'")

    @classmethod
    def for_optimizer(cls, kind: str, **overrides) -> "ControllerConfig":
        """Per-optimizer defaults for alpha_max and init_alpha; AdaGrad follows ``adagrad_mode``."""
        if kind not in constants.OPTIMIZER_KINDS:
            raise ConfigError(f"Unknown optimizer '{kind}'")
        overrides = {k: v for k, v in overrides.items() if v is not None}
        values = dict(alpha_max=constants.ALPHA_MAX[kind], init_alpha=constants.INIT_ALPHA[kind])
        values.update(overrides)
        adagrad_mode = values.get("adagrad_mode", constants.ADAGRAD_ALPHA_ONLY)
        if "solver" not in overrides:
            values["solver"] = adagrad_mode if kind == constants.OPT_ADAGRAD else constants.ADAGRAD_FULL
        return cls(**values)


@dataclass
class GammaState:
    """Smoothed (gamma1, gamma2) of one parameter group plus its last (alpha, beta)."""

    gamma_raw: Vec2 = field(default_factory=lambda: vec2(0.0, 0.0))
    gamma_ewma: Vec2 = field(default_factory=lambda: vec2(0.0, 0.0))
    alpha: float = 1.0
    beta: float = 0.0
    step: int = 0
    frozen: bool = False

    @classmethod
    def fixed(cls, alpha: float, beta: float) -> "GammaState":
        gamma = vec2(1.0 - alpha, alpha * beta)
        return cls(gamma.copy(), gamma, alpha, beta, frozen=True)

    @classmethod
    def at(cls, gamma: Vec2, frozen: bool = True) -> "GammaState":
        gamma = np.asarray(gamma, dtype=np.float64)
        alpha = 1.0 - float(gamma[0])
        beta = float(gamma[1]) / alpha if alpha != 0.0 else 0.0
        return cls(gamma.copy(), gamma.copy(), alpha, beta, frozen=frozen)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    group: str
    alpha: float
    beta: float
    gamma1: float
    gamma2: float
    vhat: float
    a11: float
    a12: float
    a22: float
    flags: Tuple[str, ...] = ()

    def as_row(self, seed: int) -> list:
        return [seed, self.step, self.group, self.alpha, self.beta, self.gamma1, self.gamma2,
                self.vhat, self.a11, self.a12, self.a22, "|".join(self.flags)]


def build_G(g: Tensor, g_prev: Tensor) -> Tuple[Tensor, Tensor]:
    if g.shape != g_prev.shape:
        raise ShapeMismatchError(f"Gradient shape {g.shape} differs from previous momentum gradient {g_prev.shape}")
    return g, g - g_prev


def compute_A_hat(columns: Tuple[Tensor, Tensor], hdiag: Tensor) -> Mat2:
    c1, c2 = columns
    hinv = 1.0 / np.asarray(hdiag, dtype=np.float64)
    a11 = weighted_inner(c1, c1, hinv)
    a12 = weighted_inner(c1, c2, hinv)
    a22 = weighted_inner(c2, c2, hinv)
    return check_finite(mat2(a11, a12, a12, a22), "A_hat")


def compute_V_hat(per_sample_sumsq: float, g: Tensor, hdiag: Tensor, n: int) -> float:
    """Unbiased estimate of the H^-1 weighted variance of the batch gradient, floored at 0."""
    if n < 2:
        raise VarianceUndefinedError(f"Variance needs at least 2 samples, got {n}")
    quad = weighted_inner(g, g, 1.0 / np.asarray(hdiag, dtype=np.float64))
    vhat = (float(per_sample_sumsq) - n * quad) / (n * (n - 1))
    check_finite(np.array(vhat), "V_hat")
    return max(vhat, 0.0)


def compute_b_hat(vhat: float) -> Vec2:
    return vec2(vhat, vhat)


def solve_gamma(A: Mat2, b: Vec2, config: ControllerConfig) -> Vec2:
    if config.solver == constants.ADAGRAD_ALPHA_ONLY:
        denom = float(A[0, 0]) * (1.0 + config.ridge)
        if denom <= 0.0:
            raise SingularSystemError("A_hat[0, 0] vanished in alpha-only solve")
        return vec2(float(b[0]) / denom, 0.0)
    return solve2(A, b, config.ridge * float(np.trace(A)) / 2.0)


def relative_det(A: Mat2) -> float:
    """det(A) / (a11 a22): squared sine of the angle between the two columns; 0 if either vanishes."""
    scale = float(A[0, 0]) * float(A[1, 1])
    if scale <= 0.0:
        return 0.0
    return (scale - float(A[0, 1]) ** 2) / scale


def estimate_gamma(A: Mat2, b: Vec2, config: ControllerConfig) -> Tuple[Vec2, bool]:
    """Raw gamma for one step and whether the reduced solve was used.

    Nearly parallel columns (e.g. right after warmup, when g_prev is a small
    multiple of the last gradient) leave the momentum direction unidentified;
    there gamma2 is pinned to 0 and only gamma1 is solved for.
    """
    if config.solver == constants.ADAGRAD_FULL and relative_det(A) < config.min_rel_det:
        return solve_gamma(A, b, replace(config, solver=constants.ADAGRAD_ALPHA_ONLY)), True
    return solve_gamma(A, b, config), False


def ewma_update(state: GammaState, gamma_raw: Vec2, upsilon: float) -> Vec2:
    state.gamma_raw = np.asarray(gamma_raw, dtype=np.float64).copy()
    state.gamma_ewma = (1.0 - upsilon) * state.gamma_raw + upsilon * state.gamma_ewma
    return state.gamma_ewma


def clamp_and_convert(state: GammaState, config: ControllerConfig) -> Tuple[float, float, bool]:
    """Projects the smoothed gamma into the feasible box and returns (alpha, beta, clamped).

    Clamped values are written back so the next EWMA step starts from a feasible point.
    """
    gamma1, gamma2 = float(state.gamma_ewma[0]), float(state.gamma_ewma[1])
    raw_alpha = 1.0 - gamma1
    alpha = min(max(raw_alpha, config.alpha_min), config.alpha_max)
    raw_beta = gamma2 / alpha
    beta = min(max(raw_beta, 0.0), config.beta_max)
    clamped = alpha != raw_alpha or beta != raw_beta
    if clamped:
        state.gamma_ewma = vec2(1.0 - alpha, alpha * beta)
    state.alpha, state.beta = alpha, beta
    return alpha, beta, clamped


def autoopt_step(group: str, w: Tensor, stats: BatchGradStats, opt_state: OptimizerState,
                 state: GammaState, config: ControllerConfig) -> Tuple[Tensor, TraceRecord]:
    """One controller step for one group: estimate, smooth, clamp, then update the weights.

    ``stats.hdiag`` must be the Hessian estimate of this step; it serves both
    the estimates and the weight update.
    """
    if stats.hdiag is None:
        raise ValueError(f"{group}: autoopt_step needs the step's Hessian diagonal in stats.hdiag")
    g, hdiag = stats.batch_grad, stats.hdiag
    state.step += 1
    t = state.step
    flags: List[str] = []

    A = compute_A_hat(build_G(g, opt_state.momentum_buffer), hdiag)
    vhat = float("nan")
    if stats.per_sample_sumsq is not None and stats.sample_count >= 2:
        vhat = compute_V_hat(stats.per_sample_sumsq, g, hdiag, stats.sample_count)

    if state.frozen:
        flags.append(constants.FLAG_FROZEN)
    elif t <= config.warmup_steps:
        flags.append(constants.FLAG_WARMUP)
        state.gamma_ewma = vec2(1.0 - config.init_alpha, 0.0)
    else:
        if np.isnan(vhat):
            raise VarianceUndefinedError(f"{group}: per-sample statistics missing at step {t}")
        try:
            gamma_raw, reduced = estimate_gamma(A, compute_b_hat(vhat), config)
            if reduced:
                flags.append(constants.FLAG_ILL_CONDITIONED)
            ewma_update(state, gamma_raw, config.upsilon)
        except SingularSystemError as e:
            flags.append(constants.FLAG_SINGULAR)
            logging.warning(f"{group} step {t}: {e}; keeping previous gamma")

    if state.frozen:
        alpha, beta = state.alpha, state.beta
        g_hat = heavy_ball_gradient(g, opt_state, alpha, beta)
    else:
        alpha, beta, clamped = clamp_and_convert(state, config)
        if clamped:
            flags.append(constants.FLAG_CLAMPED)
        g_hat = momentum_gradient(g, opt_state, state.gamma_ewma)
    w_next = apply_update(w, g_hat, hdiag)
    record = TraceRecord(t, group, alpha, beta, float(state.gamma_ewma[0]), float(state.gamma_ewma[1]),
                         vhat, float(A[0, 0]), float(A[0, 1]), float(A[1, 1]), tuple(flags))
    return w_next, record


class AutoOptController:
    """GammaState per group and one ordered trace sink shared by all groups."""

    def __init__(self, config: ControllerConfig, group_names: Iterable[str],
                 trace_sink: Optional[Callable[[TraceRecord], None]] = None, keep_trace: bool = True):
        self.config = config
        self.states: Dict[str, GammaState] = {name: GammaState() for name in group_names}
        self.trace: List[TraceRecord] = []
        self._keep_trace = keep_trace
        self._sink = trace_sink
        self._lock = threading.Lock()

    @classmethod
    def fixed(cls, alpha: float, beta: float, group_names: Iterable[str], config: Optional[ControllerConfig] = None,
              trace_sink: Optional[Callable[[TraceRecord], None]] = None, keep_trace: bool = True):
        """Controller frozen at gamma = [1 - alpha, alpha * beta] for every group."""
        controller = cls(config or ControllerConfig(), group_names, trace_sink, keep_trace)
        for name in controller.states:
            controller.states[name] = GammaState.fixed(alpha, beta)
        return controller

    def freeze(self, group: str, gamma: Vec2):
        self.states[group] = GammaState.at(gamma, frozen=True)

    def beta_for(self, group: str) -> float:
        """Momentum in force before this step's estimate, used by Adam's bias factor."""
        return self.states[group].beta

    def step(self, group: str, w: Tensor, stats: BatchGradStats, opt_state: OptimizerState) -> Tensor:
        w_next, record = autoopt_step(group, w, stats, opt_state, self.states[group], self.config)
        with self._lock:
            if self._keep_trace:
                self.trace.append(record)
            if self._sink is not None:
                self._sink(record)
        return w_next
