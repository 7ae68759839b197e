"""Self-check suites run by ``main.py check``.

Each suite returns a CheckResult; failures are report content, not exceptions.
"""
import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, Tuple

import numpy as np

import constants
from autoopt_controller import (ControllerConfig, GammaState, build_G, compute_A_hat, compute_b_hat,
                                compute_V_hat, ewma_update, solve_gamma)
from core_math import Rng, rng_normal, rng_uniform, vec2
from data_io import load_split_pair
from experiment_config import ExperimentConfig
from model_manager import ModelManager
from nn_engine import LayerSpec, Network, backward, forward, materialize_per_sample_grads, nll_loss
from quadratic_testbed import (QuadraticProblem, analytic_oracle, brute_force_gamma, estimate_gamma_mean,
                               gammas_agree, grid_axis, oracle_instances, run_testbed_training)
from trainer import Trainer
from utils import relative_error, strictly_increasing, time_averaged_alpha, trend_by_seed


@dataclass(frozen=True)
class CheckResult:
    suite: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def as_row(self) -> list:
        return [self.suite, self.passed, self.measured, self.threshold, self.detail]


def gradcheck_network(rng: Rng) -> Network:
    """Small float64 net touching every layer kind."""
    specs = [
        LayerSpec.conv2d(2, 3), LayerSpec.maxpool2d(2), LayerSpec.relu(), LayerSpec.flatten(),
        LayerSpec.dense(5), LayerSpec.relu(), LayerSpec.dropout(0.3),
        LayerSpec.dense(3), LayerSpec.logsoftmax(),
    ]
    return Network((1, 6, 6), specs, rng)


def finite_difference_grads(net: Network, images, labels, mask_seed: int, h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences of the batch loss; the dropout mask is replayed from ``mask_seed``."""
    def loss() -> float:
        out, _ = forward(net, images, constants.TRAIN, Rng(mask_seed))
        return nll_loss(out, labels)

    grads = {}
    for group in net.groups:
        w = net.get_flat(group)
        g = np.zeros_like(w)
        for i in range(w.size):
            orig = w[i]
            w[i] = orig + h
            net.set_flat(group, w)
            up = loss()
            w[i] = orig - h
            net.set_flat(group, w)
            down = loss()
            w[i] = orig
            g[i] = (up - down) / (2 * h)
        net.set_flat(group, w)
        grads[group.name] = g
    return grads


def check_gradcheck(config: ExperimentConfig, seed: int) -> CheckResult:
    rng = Rng(seed)
    net = gradcheck_network(rng.child(0))
    images = rng_normal(rng.child(1), (4, 1, 6, 6))
    labels = np.array([0, 1, 2, 1])
    _, cache = forward(net, images, constants.TRAIN, Rng(seed + 1))
    analytic = backward(net, cache, labels)
    numeric = finite_difference_grads(net, images, labels, seed + 1)
    worst = max(relative_error(analytic[name].batch_grad, numeric[name]) for name in numeric)
    return CheckResult("gradcheck", worst <= 1e-5, worst, 1e-5, f"{len(numeric)} groups")


def check_per_sample(config: ExperimentConfig, seed: int) -> CheckResult:
    rng = Rng(seed)
    net = gradcheck_network(rng.child(0))
    n = 6
    images = rng_normal(rng.child(1), (n, 1, 6, 6))
    labels = np.arange(n) % 3
    hdiag = {g.name: rng_uniform(rng.child(2), (g.size,), 0.5, 2.0) for g in net.groups}
    _, cache = forward(net, images, constants.TRAIN, Rng(seed + 1))
    stats = backward(net, cache, labels, hdiag)
    samples = materialize_per_sample_grads(net, cache, labels)
    mean_err, sum_err = 0.0, 0.0
    for group in net.groups:
        per = np.stack([s[group.name] for s in samples])
        mean_err = max(mean_err, float(np.max(np.abs(per.mean(axis=0) - stats[group.name].batch_grad))))
        expected = float(np.sum(per * per / hdiag[group.name]))
        sum_err = max(sum_err, abs(expected - stats[group.name].per_sample_sumsq) / max(abs(expected), 1e-300))
    passed = mean_err <= 1e-10 and sum_err <= 1e-9
    return CheckResult("per_sample", passed, max(mean_err, sum_err), 1e-9,
                       f"mean error {mean_err:.2e}, streaming sum relative error {sum_err:.2e}")


def check_unbiasedness(config: ExperimentConfig, seed: int, batches: int = 100_000) -> CheckResult:
    p, n = 10, 8
    rng = Rng(seed)
    hdiag = rng_uniform(rng.child(0), (p,), 0.5, 2.0)
    expected = float(np.sum(1.0 / hdiag)) / n  # Sigma = I
    g_bar = rng_normal(rng.child(1), (p,))
    draws = rng.child(2)
    total = 0.0
    for _ in range(batches):
        grads = g_bar + rng_normal(draws, (n, p))
        g = grads.mean(axis=0)
        total += compute_V_hat(float(np.sum(grads * grads / hdiag)), g, hdiag, n)
    ratio = total / batches / expected
    return CheckResult("unbiasedness", abs(ratio - 1.0) <= 0.01, ratio, 0.01,
                       f"mean(V_hat)/expected over {batches} batches, expected {expected:.4f}")


def check_oracle(config: ExperimentConfig, seed: int, instances: int = 20, draws: int = 100_000,
                 batches: int = 1000) -> CheckResult:
    """Analytic, brute-force and mean controller gamma, all on the same instances."""
    rng = Rng(seed)
    n = config.testbed.batch_size
    brute_ok, controller_ok = 0, 0
    brute_gap, controller_gap = 0.0, 0.0
    failures = []
    for i, (prob, w, g_prev) in enumerate(oracle_instances(rng.child(0), instances, n)):
        analytic = analytic_oracle(prob, w, g_prev, n).gamma_oracle
        brute, _ = brute_force_gamma(prob, w, g_prev, n, rng.child(1000 + i), grid_axis(), draws)
        estimate = estimate_gamma_mean(prob, w, g_prev, n, rng.child(2000 + i), batches)
        brute_gap = max(brute_gap, float(np.max(np.abs(brute - analytic))))
        controller_gap = max(controller_gap, float(np.max(np.abs(estimate - analytic))))
        if gammas_agree(analytic, brute):
            brute_ok += 1
        else:
            failures.append(f"#{i} brute {brute.round(3)} vs analytic {analytic.round(3)}")
        if gammas_agree(analytic, estimate):
            controller_ok += 1
        else:
            failures.append(f"#{i} controller {estimate.round(4)} vs analytic {analytic.round(4)}")
    needed = int(np.ceil(constants.ORACLE_MIN_AGREEMENT * instances))
    passed = brute_ok == instances and controller_ok >= needed
    detail = (f"brute {brute_ok}/{instances} (max gap {brute_gap:.4f}), controller {controller_ok}/{instances} "
              f"(max gap {controller_gap:.4f}), noise ratio {constants.ORACLE_NOISE_RATIO}, N={n}")
    if failures:
        detail += "; " + "; ".join(failures)
    return CheckResult("oracle", passed, float(controller_ok), float(needed), detail)


def check_newton(config: ExperimentConfig, seed: int) -> CheckResult:
    base = QuadraticProblem.random(Rng(seed), 5)
    prob = QuadraticProblem(base.hessian, base.w_star, np.zeros((5, 5)))
    trace = run_testbed_training(prob, ControllerConfig(), 1, 4, Rng(seed), w0=np.zeros(5), gamma=vec2(0.0, 0.0))
    return CheckResult("newton", trace.losses[-1] <= 1e-12, trace.losses[-1], 1e-12, "one step, gamma = [0, 0]")


def check_ewma(config: ExperimentConfig, seed: int, upsilon: float = 0.9, steps: int = 20) -> CheckResult:
    state = GammaState()
    target = vec2(0.3, 0.2)
    worst = 0.0
    previous = float(np.linalg.norm(state.gamma_ewma - target))
    for _ in range(steps):
        ewma_update(state, target, upsilon)
        current = float(np.linalg.norm(state.gamma_ewma - target))
        worst = max(worst, abs(current / previous - upsilon))
        previous = current
    return CheckResult("ewma", worst <= 1e-12, worst, 1e-12, f"contraction factor deviation, upsilon={upsilon}")


def check_scale(config: ExperimentConfig, seed: int, c: float = 10.0) -> CheckResult:
    rng = Rng(seed)
    p, n = 20, 16
    grads = rng_normal(rng.child(0), (n, p)) + rng_normal(rng.child(1), (p,))
    g_prev = rng_normal(rng.child(2), (p,))
    hdiag = rng_uniform(rng.child(3), (p,), 0.5, 2.0)
    cfg = ControllerConfig(ridge=0.0)

    def gamma(scale: float):
        x = grads * scale
        g = x.mean(axis=0)
        vhat = compute_V_hat(float(np.sum(x * x / hdiag)), g, hdiag, n)
        return solve_gamma(compute_A_hat(build_G(g, g_prev * scale), hdiag), compute_b_hat(vhat), cfg)

    err = relative_error(gamma(1.0), gamma(c))
    return CheckResult("scale", err <= 1e-10, err, 1e-10, f"gradients scaled by {c:g}")


def check_complexity(config: ExperimentConfig, seed: int, trials: int = 20) -> CheckResult:
    rng = Rng(seed)
    net = ModelManager().build(constants.ARCH_MNIST, rng.child(0))
    hdiag = {g.name: np.ones(g.size) for g in net.groups}
    worst = 0.0
    details = []
    for n in (32, 128):
        images = rng_normal(rng.child(n), (n, 1, 28, 28))
        labels = np.arange(n) % 10
        _, cache = forward(net, images, constants.TRAIN, rng.child(n + 1))
        plain, stats = [], []
        for _ in range(trials):
            t0 = time.perf_counter()
            backward(net, cache, labels)
            plain.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            backward(net, cache, labels, hdiag)
            stats.append(time.perf_counter() - t0)
        ratio = float(np.median(stats) / np.median(plain))
        worst = max(worst, ratio)
        details.append(f"N={n}: {ratio:.2f}x")
    return CheckResult("complexity", worst <= 2.0, worst, 2.0, ", ".join(details))


def _mnist_trainer(config: ExperimentConfig, train_subset: int, test_subset: int, seed: int):
    train, test = load_split_pair(constants.DATASET_MNIST, config.data.dir, train_subset, test_subset, Rng(seed))
    return lambda cfg: Trainer(cfg, train, test, record_time=False)


def _mnist_config(config: ExperimentConfig, batch_size: int, epochs: int) -> ExperimentConfig:
    return replace(config,
                   data=replace(config.data, dataset=constants.DATASET_MNIST),
                   model=replace(config.model, arch=constants.ARCH_MNIST),
                   optimizer=replace(config.optimizer, kind=constants.OPT_SGD),
                   train=replace(config.train, batch_size=batch_size, epochs=epochs),
                   mode=constants.MODE_AUTO)


def trend_result(averages: Dict[Tuple[int, int], float], batch_sizes) -> CheckResult:
    """Passes when every seed's mean alpha rises strictly with the batch size."""
    failures, worst_gap = [], float("inf")
    for s, rows in trend_by_seed(averages).items():
        values = [value for _, value in rows]
        worst_gap = min(worst_gap, *(b - a for a, b in zip(values, values[1:])))
        if not strictly_increasing(values):
            failures.append(f"seed {s}: {[round(v, 4) for v in values]}")
    return CheckResult("trend", not failures, worst_gap, 0.0,
                       "; ".join(failures) or f"mean alpha increases with N {tuple(batch_sizes)}")


def check_trend(config: ExperimentConfig, seed: int, seeds=(0, 1, 2), batch_sizes=(16, 64, 256)) -> CheckResult:
    make = _mnist_trainer(config, 10_000, 2_000, seed)
    averages = {}
    for s in seeds:
        for n in batch_sizes:
            result = make(_mnist_config(config, n, 1)).run_seed(s)
            averages[(s, n)] = time_averaged_alpha(result.trace, "conv1.weight", 10_000 // n)
    return trend_result(averages, batch_sizes)


def check_table(config: ExperimentConfig, seed: int, seeds=(0, 1, 2)) -> CheckResult:
    make = _mnist_trainer(config, 10_000, 2_000, seed)
    cfg = _mnist_config(config, 64, 3)
    auto = [make(cfg).run_seed(s).final.test_error for s in seeds]
    best = float("inf")
    for alpha in (1e-3, 1e-2, 1e-1):
        for beta in (0.0, 0.9):
            errors = []
            for s in seeds:
                result = make(cfg).run_seed(s, alpha, beta)
                errors.append(result.final.test_error if not result.diverged else 1.0)
            best = min(best, float(np.mean(errors)))
    auto_mean = float(np.mean(auto))
    gap = auto_mean - best
    return CheckResult("table", gap <= 0.015 and auto_mean <= 0.05, gap, 0.015,
                       f"auto {auto_mean:.4f} vs best grid cell {best:.4f}")


SUITES: Dict[str, Callable[[ExperimentConfig, int], CheckResult]] = {
    "gradcheck": check_gradcheck,
    "per_sample": check_per_sample,
    "unbiasedness": check_unbiasedness,
    "oracle": check_oracle,
    "newton": check_newton,
    "ewma": check_ewma,
    "scale": check_scale,
    "complexity": check_complexity,
    "trend": check_trend,
    "table": check_table,
}


def run_suite(name: str, config: ExperimentConfig, seed: int = 0) -> CheckResult:
    if name not in SUITES:
        return CheckResult(name, False, float("nan"), float("nan"), "unknown suite")
    started = time.perf_counter()
    try:
        result = SUITES[name](config, seed)
    except Exception as e:
        logging.error(f"Check suite '{name}' raised: {e}", exc_info=True)
        result = CheckResult(name, False, float("nan"), float("nan"), f"raised {type(e).__name__}: {e}")
    logging.info(f"Check '{name}': {'pass' if result.passed else 'FAIL'} "
                 f"(measured {result.measured:.4g}, {time.perf_counter() - started:.1f}s)")
    return result
