"""Stochastic quadratic problems where the true gradient, the true Hessian and
the best one-step (gamma1, gamma2) are all known.

    J(w)   = 1/2 (w - w*)' H (w - w*)
    g_i    = H (w - w*) + eta_i,   eta_i ~ Normal(0, Sigma)

The controller runs in whitened coordinates u = L'w (H = LL'), where the
Hessian is the identity, so the diagonal estimate it uses is exact.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import constants
from autoopt_controller import (AutoOptController, ControllerConfig, TraceRecord, build_G,
                                compute_A_hat, compute_b_hat, compute_V_hat, estimate_gamma)
from core_math import Mat2, Rng, Tensor, Vec2, mat2, rng_normal, solve2, vec2
from errors import DivergenceError, NonFiniteError, SingularSystemError
from nn_engine import BatchGradStats
from optimizers import OptimizerState

MC_CHUNK = 1000
GROUP = "w"


@dataclass
class QuadraticProblem:
    hessian: Tensor
    w_star: Tensor
    noise_cov: Tensor
    seed: int = 0
    _chol: Tensor = field(init=False, repr=False)
    _chol_inv: Tensor = field(init=False, repr=False)
    _noise_factor: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        self.w_star = np.asarray(self.w_star, dtype=np.float64)
        self.noise_cov = np.asarray(self.noise_cov, dtype=np.float64)
        p = self.w_star.shape[0]
        if self.hessian.shape != (p, p) or self.noise_cov.shape != (p, p):
            raise ValueError(f"Hessian {self.hessian.shape} / noise {self.noise_cov.shape} do not match dim {p}")
        try:
            self._chol = np.linalg.cholesky(self.hessian)
        except np.linalg.LinAlgError:
            raise ValueError("Hessian must be symmetric positive definite")
        self._chol_inv = np.linalg.inv(self._chol)
        evals, evecs = np.linalg.eigh(self.noise_cov)
        if evals.min(initial=0.0) < -1e-10 * max(1.0, abs(evals).max(initial=0.0)):
            raise ValueError("Noise covariance must be positive semi-definite")
        self._noise_factor = evecs * np.sqrt(np.clip(evals, 0.0, None))

    @classmethod
    def random(cls, rng: Rng, dim: int, noise: float = 1.0, cond: float = 10.0) -> "QuadraticProblem":
        """Random SPD Hessian with eigenvalues in [1, cond] and a random PSD noise covariance."""
        q, _ = np.linalg.qr(rng_normal(rng, (dim, dim)))
        eig = np.exp(rng.generator.uniform(0.0, np.log(cond), size=dim))
        hessian = (q * eig) @ q.T
        b = rng_normal(rng, (dim, dim))
        noise_cov = noise * (b @ b.T) / dim
        w_star = rng_normal(rng, (dim,))
        return cls((hessian + hessian.T) / 2.0, w_star, (noise_cov + noise_cov.T) / 2.0, rng.seed)

    @property
    def dim(self) -> int:
        return self.w_star.shape[0]

    def loss(self, w: Tensor) -> float:
        d = np.asarray(w) - self.w_star
        return 0.5 * float(d @ self.hessian @ d)

    def true_grad(self, w: Tensor) -> Tensor:
        return self.hessian @ (np.asarray(w) - self.w_star)

    def hinv(self, x: Tensor) -> Tensor:
        return np.linalg.solve(self.hessian, x)

    def whiten(self, v: Tensor) -> Tensor:
        """L^-1 v; maps gradients (rows of a 2-D array or a vector) into whitened space."""
        return v @ self._chol_inv.T

    def to_whitened_weights(self, w: Tensor) -> Tensor:
        return self._chol.T @ w

    def from_whitened_weights(self, u: Tensor) -> Tensor:
        return self._chol_inv.T @ u

    def noise_trace(self, n: int) -> float:
        """tr(H^-1 Sigma) / N."""
        return float(np.trace(self.hinv(self.noise_cov))) / n


def sample_batch_grads(prob: QuadraticProblem, w: Tensor, n: int, rng: Rng) -> Tensor:
    """(n, p) array of per-sample gradients."""
    if n < 1:
        raise ValueError(f"Batch size must be >= 1, got {n}")
    z = rng_normal(rng, (n, prob.dim))
    return prob.true_grad(w) + z @ prob._noise_factor.T


@dataclass
class OracleResult:
    gamma_oracle: Vec2
    A: Mat2
    b: Vec2
    surface: Optional[np.ndarray] = None  # rows of (gamma1, gamma2, expected loss)


def grid_axis(low: float = constants.TESTBED_GRID_LOW, high: float = constants.TESTBED_GRID_HIGH,
              step: float = constants.TESTBED_GRID_STEP) -> np.ndarray:
    count = int(round((high - low) / step)) + 1
    return low + step * np.arange(count)


def grid_index(value: float, low: float = constants.TESTBED_GRID_LOW, step: float = constants.TESTBED_GRID_STEP) -> int:
    return int(round((value - low) / step))


def _surface_rows(axis: np.ndarray, const: float, linear: Vec2, quad: Mat2) -> np.ndarray:
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    values = (const + linear[0] * g1 + linear[1] * g2
              + 0.5 * (quad[0, 0] * g1 * g1 + 2.0 * quad[0, 1] * g1 * g2 + quad[1, 1] * g2 * g2))
    return np.column_stack([g1.ravel(), g2.ravel(), values.ravel()])


def _analytic_terms(prob: QuadraticProblem, w: Tensor, g_prev: Tensor, n: int) -> Tuple[float, Vec2, Mat2]:
    g_bar = prob.true_grad(w)
    d = g_bar - g_prev
    tau = prob.noise_trace(n)
    hg, hd = prob.hinv(g_bar), prob.hinv(d)
    gg = float(g_bar @ hg)
    A = mat2(gg + tau, float(g_bar @ hd) + tau, float(g_bar @ hd) + tau, float(d @ hd) + tau)
    b = vec2(tau, tau)
    const = prob.loss(w) - gg + 0.5 * (gg + tau)
    return const, -b, A


def expected_one_step_loss(prob: QuadraticProblem, w: Tensor, g_prev: Tensor, n: int, gamma: Vec2) -> float:
    """E[J(w - H^-1 g_hat(gamma))] over the mini-batch noise."""
    const, linear, A = _analytic_terms(prob, w, g_prev, n)
    gamma = np.asarray(gamma, dtype=np.float64)
    return float(const + linear @ gamma + 0.5 * gamma @ A @ gamma)


def analytic_oracle(prob: QuadraticProblem, w: Tensor, g_prev: Tensor, n: int,
                    axis: Optional[np.ndarray] = None) -> OracleResult:
    const, linear, A = _analytic_terms(prob, w, g_prev, n)
    b = -linear
    gamma = solve2(A, b)
    surface = _surface_rows(axis, const, linear, A) if axis is not None else None
    return OracleResult(gamma, A, b, surface)


def monte_carlo_surface(prob: QuadraticProblem, w: Tensor, g_prev: Tensor, n: int, rng: Rng,
                        draws: int = constants.TESTBED_DRAWS) -> Tuple[float, Vec2, Mat2]:
    """Coefficients of the Monte-Carlo mean of J(w_next; gamma), a quadratic in gamma.

    Every grid cell sees the same draws, so the surface is exact for that sample.
    """
    g_bar = prob.true_grad(w)
    hg_bar = prob.hinv(g_bar)
    sums = np.zeros(5)  # g_bar'H^-1 g, g'H^-1 g, g'H^-1 c2, g_bar'H^-1 c2, c2'H^-1 c2
    chunks = (draws + MC_CHUNK - 1) // MC_CHUNK
    for chunk in range(chunks):
        size = min(MC_CHUNK, draws - chunk * MC_CHUNK)
        child = rng.child(chunk)
        noise = rng_normal(child, (size, n, prob.dim)) @ prob._noise_factor.T
        g = g_bar + noise.mean(axis=1)
        c2 = g - g_prev
        hg = prob.hinv(g.T).T
        hc2 = prob.hinv(c2.T).T
        sums += [
            float(np.sum(g @ hg_bar)),
            float(np.einsum("kp,kp->", g, hg)),
            float(np.einsum("kp,kp->", g, hc2)),
            float(np.sum(c2 @ hg_bar)),
            float(np.einsum("kp,kp->", c2, hc2)),
        ]
    m_gbar_g, m_gg, m_gc2, m_gbar_c2, m_c2c2 = sums / draws
    # J(w - H^-1 (g - G gamma)) = J(w) - g_bar'H^-1 g + g_bar'H^-1 G gamma + 1/2 g'H^-1 g - g'H^-1 G gamma + 1/2 gamma'G'H^-1 G gamma
    const = prob.loss(w) - m_gbar_g + 0.5 * m_gg
    linear = vec2(m_gbar_g - m_gg, m_gbar_c2 - m_gc2)
    quad = mat2(m_gg, m_gc2, m_gc2, m_c2c2)
    return const, linear, quad


def brute_force_gamma(prob: QuadraticProblem, w: Tensor, g_prev: Tensor, n: int, rng: Rng,
                      axis: Optional[np.ndarray] = None,
                      draws: int = constants.TESTBED_DRAWS) -> Tuple[Vec2, np.ndarray]:
    """Grid cell minimising the Monte-Carlo expected one-step loss, plus the full surface."""
    axis = grid_axis() if axis is None else axis
    surface = _surface_rows(axis, *monte_carlo_surface(prob, w, g_prev, n, rng, draws))
    best = surface[int(np.argmin(surface[:, 2]))]
    return vec2(best[0], best[1]), surface


def controller_gamma(prob: QuadraticProblem, grads: Tensor, g_prev: Tensor, config: ControllerConfig) -> Vec2:
    """The controller's raw gamma estimate for one batch of per-sample gradients (Hessian known)."""
    whitened = prob.whiten(grads)
    g = whitened.mean(axis=0)
    ones = np.ones_like(g)
    vhat = compute_V_hat(float(np.einsum("np,np->", whitened, whitened)), g, ones, whitened.shape[0])
    A = compute_A_hat(build_G(g, prob.whiten(g_prev)), ones)
    return estimate_gamma(A, compute_b_hat(vhat), config)[0]


def estimate_gamma_mean(prob: QuadraticProblem, w: Tensor, g_prev: Tensor, n: int, rng: Rng,
                        batches: int = 1000, config: Optional[ControllerConfig] = None) -> Vec2:
    config = config or ControllerConfig(ridge=0.0)
    estimates = []
    for _ in range(batches):
        try:
            estimates.append(controller_gamma(prob, sample_batch_grads(prob, w, n, rng), g_prev, config))
        except SingularSystemError:
            continue
    if not estimates:
        raise SingularSystemError("Every mini-batch produced a singular system")
    return np.mean(estimates, axis=0)


@dataclass
class TestbedTrace:
    losses: List[float]
    records: List[TraceRecord]
    w_final: Tensor

    def mean_alpha(self, start: int = 0) -> float:
        alphas = [r.alpha for r in self.records[start:]]
        return float(np.mean(alphas)) if alphas else float("nan")


def run_testbed_training(prob: QuadraticProblem, config: ControllerConfig, steps: int, n: int, rng: Rng,
                         w0: Optional[Tensor] = None, gamma: Optional[Vec2] = None,
                         divergence_factor: float = constants.DIVERGENCE_FACTOR) -> TestbedTrace:
    """Runs the controller on the quadratic for ``steps`` mini-batches.

    ``gamma`` freezes the controller at a fixed (gamma1, gamma2), e.g. [1 - alpha, 0]
    for a fixed learning rate or [0, 0] for Newton steps.
    """
    w = np.zeros(prob.dim) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    u = prob.to_whitened_weights(w)
    controller = AutoOptController(config, [GROUP])
    if gamma is not None:
        controller.freeze(GROUP, gamma)
    opt_state = OptimizerState.zeros(prob.dim)
    initial = prob.loss(w)
    losses = [initial]
    for step in range(1, steps + 1):
        opt_state.advance()
        whitened = prob.whiten(sample_batch_grads(prob, w, n, rng))
        g = whitened.mean(axis=0)
        stats = BatchGradStats(GROUP, g, n, float(np.einsum("np,np->", whitened, whitened)), np.ones_like(g))
        try:
            u = controller.step(GROUP, u, stats, opt_state)
        except NonFiniteError:
            raise DivergenceError(step, float("inf"), initial, divergence_factor)
        w = prob.from_whitened_weights(u)
        loss = prob.loss(w)
        losses.append(loss)
        if not np.isfinite(loss) or (initial > 0 and loss > divergence_factor * initial):
            logging.error(f"Testbed run diverged at step {step}: loss {loss:.4g}")
            raise DivergenceError(step, loss, initial, divergence_factor)
    return TestbedTrace(losses, controller.trace, w)


def baseline_sweep(prob: QuadraticProblem, alphas: Sequence[float], steps: int, n: int, seed: int,
                   w0: Optional[Tensor] = None) -> Dict[float, float]:
    """Final loss of fixed-learning-rate runs (no momentum); inf for diverged runs."""
    results = {}
    for alpha in alphas:
        try:
            trace = run_testbed_training(prob, ControllerConfig(), steps, n, Rng(seed), w0, vec2(1.0 - alpha, 0.0))
            results[alpha] = trace.losses[-1]
        except DivergenceError:
            results[alpha] = float("inf")
    return results


def oracle_instance(rng: Rng, dim: int, n: int, noise_ratio: float = 0.5, max_tries: int = 100,
                    gamma_box: Tuple[float, float] = (-0.4, 0.9)) -> Tuple[QuadraticProblem, Tensor, Tensor]:
    """Random (problem, w, g_prev) with tr(H^-1 Sigma)/N = noise_ratio * g_bar'H^-1 g_bar.

    g_prev - g_bar has an H^-1-orthogonal part of the same H^-1 norm as g_bar plus a
    random multiple of g_bar, which keeps the 2x2 system well conditioned. Instances
    whose analytic gamma leaves ``gamma_box`` are redrawn.
    """
    for attempt in range(max_tries):
        child = rng.child(attempt)
        prob = QuadraticProblem.random(child, dim)
        tau = prob.noise_trace(n)
        d = rng_normal(child, (dim,))
        d *= np.sqrt(tau / noise_ratio / float(d @ prob.hessian @ d))
        w = prob.w_star + d
        g_bar = prob.true_grad(w)
        u = float(g_bar @ prob.hinv(g_bar))
        r = rng_normal(child, (dim,))
        r -= float(g_bar @ prob.hinv(r)) / u * g_bar
        r *= np.sqrt(u / float(r @ prob.hinv(r)))
        g_prev = g_bar + child.generator.uniform(-0.5, 0.5) * g_bar + r
        try:
            gamma = analytic_oracle(prob, w, g_prev, n).gamma_oracle
        except SingularSystemError:
            continue
        if np.all((gamma >= gamma_box[0]) & (gamma <= gamma_box[1])):
            return prob, w, g_prev
    raise RuntimeError(f"No admissible oracle instance after {max_tries} draws (dim={dim}, n={n})")


def gammas_agree(reference: Vec2, other: Vec2, step: float = constants.TESTBED_GRID_STEP,
                 rel: float = 0.05) -> bool:
    """Componentwise: within one grid cell of the reference, or within ``rel`` relative."""
    for a, b in zip(np.asarray(reference, dtype=np.float64), np.asarray(other, dtype=np.float64)):
        cells_off = abs(grid_index(a, step=step) - grid_index(b, step=step))
        if cells_off > 1 and abs(b - a) > rel * abs(a):
            return False
    return True


def oracle_instances(rng: Rng, count: int, n: int, noise_ratio: float = constants.ORACLE_NOISE_RATIO,
                     dims: Sequence[int] = constants.ORACLE_DIMS) -> List[Tuple[QuadraticProblem, Tensor, Tensor]]:
    """``count`` oracle instances, cycling through ``dims``."""
    return [oracle_instance(rng.child(i), dims[i % len(dims)], n, noise_ratio) for i in range(count)]
