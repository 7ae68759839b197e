import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

import constants
from autoopt_controller import AutoOptController, TraceRecord
from core_math import Rng
from data_io import Dataset, MiniBatchSampler
from errors import DivergenceError, NonFiniteError
from experiment_config import ExperimentConfig
from model_manager import ModelManager
from nn_engine import Network, backward, error_rate, forward, nll_loss
from optimizers import Optimizer


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    epoch: int
    step: int
    train_loss: float
    train_error: float
    test_error: float
    wall_time_s: float

    def as_row(self) -> list:
        return [self.seed, self.epoch, self.step, self.train_loss, self.train_error, self.test_error, self.wall_time_s]


@dataclass
class RunResult:
    seed: int
    alpha: Optional[float] = None
    beta: Optional[float] = None
    metrics: List[MetricsRecord] = field(default_factory=list)
    trace: List[TraceRecord] = field(default_factory=list)
    divergence: Optional[DivergenceError] = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None

    @property
    def final(self) -> Optional[MetricsRecord]:
        return self.metrics[-1] if self.metrics else None


class Trainer:
    """Runs one training job per seed: fixed (alpha, beta) or auto-tuned."""

    def __init__(self, config: ExperimentConfig, train: Dataset, test: Dataset,
                 model_manager: Optional[ModelManager] = None,
                 on_metrics: Optional[Callable[[MetricsRecord], None]] = None,
                 on_trace: Optional[Callable[[int, TraceRecord], None]] = None,
                 record_time: bool = True):
        self.config = config
        self.train = train
        self.test = test
        self.model_manager = model_manager or ModelManager()
        self.on_metrics = on_metrics
        self.on_trace = on_trace
        self.record_time = record_time
        self.arch = config.model.arch or self.model_manager.arch_for_dataset(config.data.dataset)

    def build_network(self, seed: int) -> Network:
        return self.model_manager.build(self.arch, Rng(seed).child(1), self.config.train.precision,
                                        self.config.model.dropout, self.config.model.merge_bias,
                                        input_shape=self.train.images.shape[1:])

    def _controller(self, names: List[str], seed: int, alpha: Optional[float], beta: Optional[float]):
        sink = (lambda record: self.on_trace(seed, record)) if self.on_trace else None
        ccfg = self.config.controller_config()
        if alpha is None:
            return AutoOptController(ccfg, names, sink)
        if not self.config.optimizer_spec().has_momentum:
            beta = 0.0
        return AutoOptController.fixed(alpha, beta or 0.0, names, ccfg, sink)

    def run_seed(self, seed: int, alpha: Optional[float] = None, beta: Optional[float] = None) -> RunResult:
        """``alpha`` given: fixed hyperparameters; otherwise ``config.mode`` decides."""
        if alpha is None and self.config.mode == constants.MODE_FIXED:
            alpha, beta = self.config.fixed_alpha, self.config.fixed_beta
        auto = alpha is None
        rng = Rng(seed)
        net = self.build_network(seed)
        optimizer = Optimizer(self.config.optimizer_spec(), {g.name: g.size for g in net.groups}, net.dtype)
        controller = self._controller([g.name for g in net.groups], seed, alpha, beta)
        sampler = MiniBatchSampler(self.train, self.config.train.batch_size, rng.child(2))
        dropout_rng = rng.child(3)
        factor = self.config.train.divergence_factor
        eval_every = self.config.train.eval_every

        label = "auto" if auto else f"fixed alpha={alpha:g} beta={beta or 0.0:g}"
        logging.info(f"Seed {seed}: {label}, {sampler.batches_per_epoch} steps/epoch, "
                     f"{self.config.train.epochs} epochs, optimizer {optimizer.spec.kind}")
        result = RunResult(seed, alpha, beta)
        start = time.perf_counter()
        initial_loss = None
        step = 0

        def hessian(group, g):
            return optimizer.hessian(group.name, g, controller.beta_for(group.name))

        try:
            for epoch in range(1, self.config.train.epochs + 1):
                losses = []
                for images, labels in sampler.epoch():
                    step += 1
                    optimizer.begin_step()
                    out, cache = forward(net, images, constants.TRAIN, dropout_rng)
                    loss = nll_loss(out, labels)
                    if initial_loss is None:
                        initial_loss = loss
                    if not np.isfinite(loss) or loss > factor * max(initial_loss, 1e-12):
                        raise DivergenceError(step, loss, initial_loss, factor)
                    losses.append(loss)
                    stats = backward(net, cache, labels, hdiag=hessian, sample_stats=auto)
                    for group in net.groups:
                        updated = controller.step(group.name, net.get_flat(group), stats[group.name],
                                                  optimizer.states[group.name])
                        net.set_flat(group, updated)
                    if eval_every and step % eval_every == 0:
                        self._record(result, net, seed, epoch, step, float(np.mean(losses)), start)
                self._record(result, net, seed, epoch, step, float(np.mean(losses)), start)
        except NonFiniteError as e:
            logging.error(f"Seed {seed}: non-finite values at step {step}: {e}")
            result.divergence = DivergenceError(step, float("inf"), initial_loss or 0.0, factor)
        except DivergenceError as e:
            logging.error(f"Seed {seed}: {e}")
            result.divergence = e
        result.trace = controller.trace
        return result

    def _record(self, result: RunResult, net: Network, seed: int, epoch: int, step: int,
                train_loss: float, start: float):
        record = MetricsRecord(
            seed, epoch, step, train_loss,
            error_rate(net, self.train.images, self.train.labels),
            error_rate(net, self.test.images, self.test.labels),
            round(time.perf_counter() - start, 3) if self.record_time else 0.0,
        )
        result.metrics.append(record)
        logging.info(f"Seed {seed} epoch {epoch} step {step}: loss {train_loss:.4f}, "
                     f"train error {record.train_error:.4f}, test error {record.test_error:.4f}")
        if self.on_metrics:
            self.on_metrics(record)
