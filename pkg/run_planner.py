from typing import Any, Dict, List
import logging

import constants
from experiment_config import ExperimentConfig


class RunPlanner:
    """Expands a command and its config into an ordered list of plan steps.

    Every step is a dict with ``task_type``, ``description`` and ``parameters``,
    executed one by one by the runner.
    """

    def plan(self, command: str, config: ExperimentConfig, full: bool = False) -> List[Dict[str, Any]]:
        if command == constants.CMD_TRAIN:
            steps = self.plan_train(config)
        elif command == constants.CMD_GRID:
            steps = self.plan_grid(config)
        elif command == constants.CMD_ORACLE:
            steps = self.plan_oracle(config)
        elif command == constants.CMD_CHECK:
            steps = self.plan_check(full)
        else:
            raise ValueError(f"Unknown command: {command}")
        logging.info(f"Planned {len(steps)} steps for '{command}'")
        return steps

    def plan_train(self, config: ExperimentConfig) -> List[Dict[str, Any]]:
        if config.mode == constants.MODE_AUTO:
            mode = f"auto {config.optimizer.kind}"
        else:
            mode = f"fixed {config.optimizer.kind} alpha={config.fixed_alpha:g} beta={config.fixed_beta:g}"
        return [
            {
                "task_type": constants.STEP_TRAIN_SEED,
                "description": f"train seed {seed} ({mode})",
                "parameters": {"seed": seed},
            }
            for seed in config.train.seeds
        ]

    def grid_cells(self, config: ExperimentConfig) -> List[tuple]:
        """(alpha, beta) pairs; AdaGrad has no momentum so its grid collapses to beta = 0."""
        betas = config.grid.betas if config.optimizer_spec().has_momentum else [0.0]
        cells = []
        for alpha in config.grid.alphas:
            for beta in betas:
                if (alpha, beta) not in cells:
                    cells.append((alpha, beta))
        return cells

    def plan_grid(self, config: ExperimentConfig) -> List[Dict[str, Any]]:
        return [
            {
                "task_type": constants.STEP_GRID_CELL,
                "description": f"grid cell alpha={alpha:g} beta={beta:g} seed {seed}",
                "parameters": {"alpha": alpha, "beta": beta, "seed": seed},
            }
            for alpha, beta in self.grid_cells(config)
            for seed in config.train.seeds
        ]

    def plan_oracle(self, config: ExperimentConfig) -> List[Dict[str, Any]]:
        tb = config.testbed
        return [{
            "task_type": constants.STEP_ORACLE,
            "description": f"oracle comparison p={tb.dim} N={tb.batch_size} noise={tb.noise:g}",
            "parameters": {"seed": tb.seed},
        }]

    def plan_check(self, full: bool = False) -> List[Dict[str, Any]]:
        suites = constants.CHECK_SUITES + (constants.CHECK_SUITES_FULL if full else ())
        return [
            {
                "task_type": constants.STEP_CHECK_SUITE,
                "description": f"check suite '{suite}'",
                "parameters": {"suite": suite},
            }
            for suite in suites
        ]
