"""SGD, SGD with momentum, Adam and AdaGrad in the shared form

    g_hat_t = (1 - gamma1 - gamma2) g_t + gamma2 g_hat_{t-1}
    w_{t+1} = w_t - g_hat_t / h_t

where h_t is the optimizer's diagonal Hessian estimate.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

import constants
from core_math import Tensor, Vec2, check_finite
from errors import BiasCorrectionError, ShapeMismatchError


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = constants.OPT_SGD
    beta2: float = constants.DEFAULT_ADAM_BETA2
    eps: float = constants.DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in constants.OPTIMIZER_KINDS:
            raise ValueError(f"Unknown optimizer '{self.kind}', expected one of {constants.OPTIMIZER_KINDS}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    @classmethod
    def sgd(cls) -> "OptimizerSpec":
        return cls(constants.OPT_SGD)

    @classmethod
    def sgd_momentum(cls) -> "OptimizerSpec":
        return cls(constants.OPT_SGD_MOMENTUM)

    @classmethod
    def adam(cls, beta2: float = constants.DEFAULT_ADAM_BETA2, eps: float = constants.DEFAULT_EPS) -> "OptimizerSpec":
        return cls(constants.OPT_ADAM, beta2=beta2, eps=eps)

    @classmethod
    def adagrad(cls, eps: float = constants.DEFAULT_EPS) -> "OptimizerSpec":
        return cls(constants.OPT_ADAGRAD, eps=eps)

    @property
    def has_momentum(self) -> bool:
        """AdaGrad pins momentum to zero; plain SGD and SGD-momentum share one code path."""
        return self.kind != constants.OPT_ADAGRAD


@dataclass
class OptimizerState:
    """Per-group buffers. ``step`` is advanced by the caller before ``hessian_diag``."""

    step: int
    momentum_buffer: Tensor
    second_moment: Tensor
    beta_used: float = 0.0

    @classmethod
    def zeros(cls, size: int, dtype=np.float64) -> "OptimizerState":
        return cls(0, np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype))

    def advance(self) -> int:
        self.step += 1
        return self.step


def _check_shape(state: OptimizerState, g: Tensor):
    if g.shape != state.momentum_buffer.shape:
        raise ShapeMismatchError(f"Gradient shape {g.shape} does not match state shape {state.momentum_buffer.shape}")


def hessian_diag(spec: OptimizerSpec, state: OptimizerState, g: Tensor, beta: float = 0.0) -> Tensor:
    """Diagonal Hessian estimate for this step; updates second-moment buffers once.

    ``beta`` is the momentum currently in force and only matters for Adam's
    (1 - beta^t) factor.
    """
    _check_shape(state, g)
    if spec.kind in (constants.OPT_SGD, constants.OPT_SGD_MOMENTUM):
        return np.ones_like(g)

    if spec.kind == constants.OPT_ADAM:
        t = state.step
        if t <= 0:
            raise BiasCorrectionError("Adam Hessian requested at step 0; advance the state first")
        correction2 = 1.0 - spec.beta2 ** t
        correction1 = 1.0 - beta ** t
        if correction2 <= 0.0 or correction1 <= 0.0:
            raise BiasCorrectionError(f"Bias correction vanished at step {t} (beta={beta}, beta2={spec.beta2})")
        state.second_moment = (1.0 - spec.beta2) * (g * g) + spec.beta2 * state.second_moment
        state.beta_used = beta
        return correction1 * (np.sqrt(state.second_moment / correction2) + spec.eps)

    # AdaGrad
    state.second_moment = state.second_moment + g * g
    return np.sqrt(state.second_moment) + spec.eps


def momentum_gradient(g: Tensor, state: OptimizerState, gamma: Vec2) -> Tensor:
    """g_hat = (1 - gamma1 - gamma2) g + gamma2 g_hat_prev; becomes the next step's g_hat_prev."""
    _check_shape(state, g)
    gamma1, gamma2 = float(gamma[0]), float(gamma[1])
    check_finite(np.array([gamma1, gamma2]), "gamma")
    g_hat = (1.0 - gamma1 - gamma2) * g + gamma2 * state.momentum_buffer
    state.momentum_buffer = g_hat
    return g_hat


def heavy_ball_gradient(g: Tensor, state: OptimizerState, alpha: float, beta: float) -> Tensor:
    """g_hat = alpha ((1 - beta) g + beta g_hat_prev), the (alpha, beta) form used by fixed runs.

    With beta = 0 this is alpha * g exactly, so a fixed run matches plain SGD bit for bit.
    """
    _check_shape(state, g)
    check_finite(np.array([alpha, beta]), "alpha/beta")
    g_hat = alpha * ((1.0 - beta) * g + beta * state.momentum_buffer)
    state.momentum_buffer = g_hat
    return g_hat


def apply_update(w: Tensor, g_hat: Tensor, hdiag: Tensor) -> Tensor:
    if not (w.shape == g_hat.shape == hdiag.shape):
        raise ShapeMismatchError(f"Update shapes differ: w {w.shape}, g_hat {g_hat.shape}, h {hdiag.shape}")
    if np.any(hdiag <= 0):
        raise ValueError("Diagonal Hessian estimate must be strictly positive")
    return check_finite(w - g_hat / hdiag, "updated weights")


class Optimizer:
    """Owns one OptimizerState per parameter group."""

    def __init__(self, spec: OptimizerSpec, group_sizes: dict, dtype=np.float64):
        self.spec = spec
        self.states = {name: OptimizerState.zeros(size, dtype) for name, size in group_sizes.items()}
        logging.info(f"Optimizer '{spec.kind}' tracking {len(self.states)} groups")

    def begin_step(self):
        for state in self.states.values():
            state.advance()

    def hessian(self, group_name: str, g: Tensor, beta: float = 0.0) -> Tensor:
        return hessian_diag(self.spec, self.states[group_name], g, beta)

    def state(self, group_name: str) -> Optional[OptimizerState]:
        return self.states.get(group_name)
