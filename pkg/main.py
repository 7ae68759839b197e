from typing import Any, Dict, List, Optional, Sequence
import argparse
import os
import sys

import logging
from dotenv import load_dotenv

import constants

# Thread counts must be pinned before numpy is imported; .env values win over the default.
load_dotenv()
for _var in constants.THREAD_ENV_VARS:
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

# Local imports
from checks import run_suite  # noqa: E402
from core_math import Rng, rng_normal  # noqa: E402
from data_io import load_split_pair  # noqa: E402
from errors import AutoOptError, DivergenceError  # noqa: E402
from experiment_config import ExperimentConfig, load_config, parse_set_args, write_manifest  # noqa: E402
from file_manager import CsvWriter, FileManager  # noqa: E402
from model_manager import ModelManager  # noqa: E402
from quadratic_testbed import (QuadraticProblem, analytic_oracle, baseline_sweep, brute_force_gamma,  # noqa: E402
                               estimate_gamma_mean, gammas_agree, grid_axis, grid_index, oracle_instance,
                               run_testbed_training)
from result_formatter import ResultFormatter  # noqa: E402
from run_planner import RunPlanner  # noqa: E402
from trainer import Trainer  # noqa: E402
from utils import mean_std  # noqa: E402

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def configure_logging(level: str = "INFO", log_file: Optional[str] = None):
    """로깅 설정"""
    if log_file is None:
        log_file = os.getenv("AUTOOPT_LOG_FILE", constants.DEFAULT_LOG_FILE)
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


class AutoOptRunner:
    """AutoOpt 실행 클래스"""

    def __init__(self, config: ExperimentConfig, record_time: bool = True):
        self.config = config
        self.record_time = record_time
        self.model_manager = ModelManager()
        self.run_planner = RunPlanner()
        self.result_formatter = ResultFormatter()
        self.out_dir = None
        self.diverged = False
        self._writers: Dict[str, CsvWriter] = {}
        self._trainer: Optional[Trainer] = None
        self._grid_runs: List[Dict[str, Any]] = []
        self._checks: List[Any] = []

    def run_command(self, command: str, full: bool = False) -> int:
        """Executes every planned step and returns the process exit code."""
        self.out_dir = FileManager.run_dir(self.config.out_dir, command, clean=True)
        write_manifest(self.config, self.out_dir / "config.manifest")
        steps = self.run_planner.plan(command, self.config, full)
        self._open_outputs(command)
        step_results = []
        try:
            for i, step in enumerate(steps, 1):
                logging.info(f"{i}/{len(steps)}단계 실행 중: {step['description']}")
                try:
                    result = self._execute_step(step)
                except AutoOptError as e:
                    logging.error(f"{i}단계 실패: {e}")
                    result = {"success": False, "result": f"Error: {e}"}
                except Exception as e:
                    logging.error(f"Unexpected error in step {i}: {e}", exc_info=True)
                    result = {"success": False, "result": f"Error: {e}"}
                step_results.append({"description": step["description"], "result": result})
            self._finish(command)
        finally:
            for writer in self._writers.values():
                writer.close()
            self._writers.clear()

        print(self.result_formatter.combine_step_results(step_results))
        if self.diverged:
            return constants.EXIT_DIVERGED
        if not all(s["result"].get("success", False) for s in step_results):
            return constants.EXIT_FAILURE
        return constants.EXIT_OK

    def _open_outputs(self, command: str):
        if command in (constants.CMD_TRAIN, constants.CMD_GRID):
            rng = Rng(constants.DATA_SEED)
            train, test = load_split_pair(self.config.data.dataset, self.config.data.dir,
                                          self.config.data.train_subset, self.config.data.test_subset,
                                          rng, self.config.data.standardize)
        if command == constants.CMD_TRAIN:
            metrics = self._writers["metrics"] = CsvWriter(self.out_dir / "metrics.csv", constants.SCHEMA_METRICS)
            trace = self._writers["trace"] = CsvWriter(self.out_dir / "trace.csv", constants.SCHEMA_TRACE)
            self._trainer = Trainer(self.config, train, test, self.model_manager,
                                    on_metrics=lambda record: metrics.write_row(record.as_row()),
                                    on_trace=lambda seed, record: trace.write_row(record.as_row(seed)),
                                    record_time=self.record_time)
        elif command == constants.CMD_GRID:
            self._writers["runs"] = CsvWriter(self.out_dir / "grid_runs.csv", constants.SCHEMA_GRID_RUNS)
            self._trainer = Trainer(self.config, train, test, self.model_manager, record_time=self.record_time)
            self._grid_runs = []
        elif command == constants.CMD_CHECK:
            self._checks = []

    def _execute_step(self, step: Dict[str, Any]) -> Dict[str, Any]:
        task_type = step["task_type"]
        params = step["parameters"]
        if task_type == constants.STEP_TRAIN_SEED:
            return self._execute_train_step(params)
        elif task_type == constants.STEP_GRID_CELL:
            return self._execute_grid_step(params)
        elif task_type == constants.STEP_ORACLE:
            return self._execute_oracle_step(params)
        elif task_type == constants.STEP_CHECK_SUITE:
            return self._execute_check_step(params)
        return {"success": False, "result": f"Unknown step type: {task_type}"}

    def _execute_train_step(self, params: Dict[str, Any]) -> Dict[str, Any]:
        result = self._trainer.run_seed(params["seed"])
        if result.diverged:
            self.diverged = True
            return {"success": False, "result": f"diverged: {result.divergence}"}
        final = result.final
        return {"success": True,
                "result": f"train error {final.train_error:.4f}, test error {final.test_error:.4f}"}

    def _execute_grid_step(self, params: Dict[str, Any]) -> Dict[str, Any]:
        alpha, beta, seed = params["alpha"], params["beta"], params["seed"]
        result = self._trainer.run_seed(seed, alpha, beta)
        if result.diverged:
            # a diverged cell counts as chance-level-or-worse error in the summary
            train_error = test_error = 1.0
        else:
            train_error, test_error = result.final.train_error, result.final.test_error
        self._writers["runs"].write_row([alpha, beta, seed, train_error, test_error, result.diverged])
        self._grid_runs.append({"alpha": alpha, "beta": beta, "seed": seed, "train_error": train_error,
                                "test_error": test_error})
        status = "diverged" if result.diverged else f"test error {test_error:.4f}"
        return {"success": True, "result": status}

    def _oracle_problem(self, rng: Rng):
        tb = self.config.testbed
        if tb.noise > 0:
            return oracle_instance(rng, tb.dim, tb.batch_size, noise_ratio=tb.noise)
        prob = QuadraticProblem.random(rng, tb.dim, noise=0.0)
        w = prob.w_star + rng_normal(rng, (tb.dim,))
        return prob, w, rng_normal(rng, (tb.dim,))

    def _execute_oracle_step(self, params: Dict[str, Any]) -> Dict[str, Any]:
        tb = self.config.testbed
        rng = Rng(params["seed"])
        prob, w, g_prev = self._oracle_problem(rng.child(0))
        axis = grid_axis(step=tb.grid_step)
        analytic = analytic_oracle(prob, w, g_prev, tb.batch_size, axis)
        brute, mc_surface = brute_force_gamma(prob, w, g_prev, tb.batch_size, rng.child(1), axis, tb.draws)
        controller = estimate_gamma_mean(prob, w, g_prev, tb.batch_size, rng.child(2))

        FileManager.write_csv(self.out_dir / "oracle_surface.csv", constants.SCHEMA_SURFACE,
                              ([a[0], a[1], a[2], m[2]] for a, m in zip(analytic.surface, mc_surface)))
        reference = analytic.gamma_oracle
        compare = []
        for source, gamma in (("analytic", reference), ("brute_force", brute), ("controller", controller)):
            off = max(abs(grid_index(a, step=tb.grid_step) - grid_index(b, step=tb.grid_step))
                      for a, b in zip(reference, gamma))
            compare.append([source, float(gamma[0]), float(gamma[1]), off,
                            gammas_agree(reference, gamma, tb.grid_step)])
        FileManager.write_csv(self.out_dir / "oracle_compare.csv", constants.SCHEMA_ORACLE, compare)

        runs = []
        config = self.config.controller_config()
        try:
            trace = run_testbed_training(prob, config, tb.steps, tb.batch_size, rng.child(3), w0=w,
                                         divergence_factor=self.config.train.divergence_factor)
            runs.append(["auto", float("nan"), trace.losses[-1], trace.mean_alpha(), False])
        except DivergenceError as e:
            logging.error(f"자동 튜닝 테스트베드 실행이 발산했습니다: {e}")
            runs.append(["auto", float("nan"), float("inf"), float("nan"), True])
        sweep = baseline_sweep(prob, constants.TESTBED_BASELINE_ALPHAS, tb.steps, tb.batch_size,
                               params["seed"] + 1, w0=w)
        for alpha, loss in sweep.items():
            runs.append(["fixed", alpha, loss, alpha, not np.isfinite(loss)])
        FileManager.write_csv(self.out_dir / "testbed_training.csv", constants.SCHEMA_TESTBED, runs)

        agree = all(row[4] for row in compare)
        summary = (f"analytic {np.round(reference, 3)}, brute force {np.round(brute, 3)}, "
                   f"controller {np.round(controller, 3)}")
        return {"success": agree, "result": summary}

    def _execute_check_step(self, params: Dict[str, Any]) -> Dict[str, Any]:
        result = run_suite(params["suite"], self.config, self.config.testbed.seed)
        self._checks.append(result)
        return {"success": result.passed,
                "result": f"measured {result.measured:.4g} (threshold {result.threshold:.4g}) {result.detail}"}

    def _finish(self, command: str):
        if command == constants.CMD_GRID:
            self._write_grid_summary()
        elif command == constants.CMD_CHECK:
            FileManager.write_csv(self.out_dir / "check_report.csv", constants.SCHEMA_CHECK,
                                  (r.as_row() for r in self._checks))
            header = ["suite", "passed", "measured", "threshold"]
            print(self.result_formatter.format_table(header, [r.as_row()[:4] for r in self._checks]))

    def _write_grid_summary(self):
        cells: Dict[tuple, List[Dict[str, Any]]] = {}
        for run in self._grid_runs:
            cells.setdefault((run["alpha"], run["beta"]), []).append(run)
        rows = []
        for (alpha, beta), runs in cells.items():
            train_mean, train_std = mean_std(r["train_error"] for r in runs)
            test_mean, test_std = mean_std(r["test_error"] for r in runs)
            rows.append([alpha, beta, len(runs), train_mean, train_std, test_mean, test_std, False])
        if rows:
            best = min(range(len(rows)), key=lambda i: rows[i][5])
            rows[best][7] = True
            logging.info(f"Best grid cell: alpha={rows[best][0]:g} beta={rows[best][1]:g}, "
                         f"test error {rows[best][5]:.4f}")
        FileManager.write_csv(self.out_dir / "grid_summary.csv", constants.SCHEMA_GRID, rows)


# command-line flag -> dotted config key
FLAG_KEYS = {
    "dataset": "data.dataset",
    "data_dir": "data.dir",
    "subset": "data.train_subset",
    "test_subset": "data.test_subset",
    "arch": "model.arch",
    "optimizer": "optimizer.kind",
    "mode": "mode",
    "alpha": "fixed.alpha",
    "beta": "fixed.beta",
    "batch_size": "train.batch_size",
    "epochs": "train.epochs",
    "seed": "train.seeds",
    "precision": "train.precision",
    "upsilon": "controller.upsilon",
    "out": "out.dir",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="dotted.key=value manifest file")
    common.add_argument("--seed", type=int, action="append", help="repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", choices=[constants.DATASET_MNIST, constants.DATASET_CIFAR10])
    common.add_argument("--data-dir")
    common.add_argument("--subset", type=int, help="number of training examples")
    common.add_argument("--test-subset", type=int)
    common.add_argument("--arch", choices=sorted(ModelManager.DEFAULT_ARCHITECTURES))
    common.add_argument("--optimizer", choices=constants.OPTIMIZER_KINDS)
    common.add_argument("--mode", choices=[constants.MODE_AUTO, constants.MODE_FIXED])
    common.add_argument("--alpha", type=float, help="learning rate in fixed mode")
    common.add_argument("--beta", type=float, help="momentum in fixed mode")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--upsilon", type=float, help="EWMA weight of the previous gamma")
    common.add_argument("--precision", choices=[constants.PRECISION_F64, constants.PRECISION_F32])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--log-level", default=os.getenv("AUTOOPT_LOG_LEVEL", "INFO"))
    common.add_argument("--no-timing", action="store_true", help="write wall_time_s as 0 for reproducible metrics")

    parser = argparse.ArgumentParser(description="Automatic per-layer learning rate and momentum tuning")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(constants.CMD_TRAIN, parents=[common], help="train with auto or fixed hyperparameters")
    sub.add_parser(constants.CMD_GRID, parents=[common], help="fixed (alpha, beta) grid search baseline")
    sub.add_parser(constants.CMD_ORACLE, parents=[common], help="quadratic testbed oracle comparison")
    check = sub.add_parser(constants.CMD_CHECK, parents=[common], help="self-check suites")
    check.add_argument("--full", action="store_true", help="also run the long MNIST suites")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items() if getattr(args, flag) is not None}
    overrides.update(parse_set_args(args.set))
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = load_config(args.config, overrides_from_args(args))
    except (AutoOptError, FileNotFoundError) as e:
        logging.error(f"설정 오류: {e}")
        return constants.EXIT_FAILURE

    runner = AutoOptRunner(config, record_time=not args.no_timing)
    try:
        return runner.run_command(args.command, getattr(args, "full", False))
    except (AutoOptError, OSError) as e:
        logging.error(f"'{args.command}' failed: {e}")
        return constants.EXIT_FAILURE
    except KeyboardInterrupt:
        logging.info("사용자에 의해 중단되었습니다.")
        return constants.EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
