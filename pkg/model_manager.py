import logging
from typing import Dict, List, Tuple

import constants
from core_math import Rng, dtype_for
from nn_engine import LayerSpec, Network


def _mnist_cnn(dropout: float) -> List[LayerSpec]:
    return [
        LayerSpec.conv2d(10, 5), LayerSpec.maxpool2d(2), LayerSpec.relu(),
        LayerSpec.conv2d(20, 5), LayerSpec.dropout(dropout), LayerSpec.maxpool2d(2), LayerSpec.relu(),
        LayerSpec.flatten(),
        LayerSpec.dense(50), LayerSpec.relu(), LayerSpec.dropout(dropout),
        LayerSpec.dense(10), LayerSpec.logsoftmax(),
    ]


def _cifar_cnn(dropout: float) -> List[LayerSpec]:
    return [
        LayerSpec.conv2d(6, 5), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(16, 5), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.flatten(),
        LayerSpec.dense(120), LayerSpec.relu(),
        LayerSpec.dense(84), LayerSpec.relu(),
        LayerSpec.dense(10), LayerSpec.logsoftmax(),
    ]


def _tiny_mlp(dropout: float) -> List[LayerSpec]:
    layers = [LayerSpec.flatten(), LayerSpec.dense(16), LayerSpec.relu()]
    if dropout > 0:
        layers.append(LayerSpec.dropout(dropout))
    return layers + [LayerSpec.dense(10), LayerSpec.logsoftmax()]


class ModelManager:
    """Registry of the network architectures a run can ask for by name."""

    DEFAULT_ARCHITECTURES = {
        constants.ARCH_MNIST: ((1, 28, 28), _mnist_cnn),
        constants.ARCH_CIFAR: ((3, 32, 32), _cifar_cnn),
        constants.ARCH_TINY: ((1, 8, 8), _tiny_mlp),
    }

    DEFAULT_FOR_DATASET = {
        constants.DATASET_MNIST: constants.ARCH_MNIST,
        constants.DATASET_CIFAR10: constants.ARCH_CIFAR,
    }

    def __init__(self, extra_architectures: Dict[str, Tuple] | None = None):
        self.architectures = dict(self.DEFAULT_ARCHITECTURES)
        if extra_architectures:
            self.architectures.update(extra_architectures)
        logging.info(f"ModelManager initialized with architectures: {sorted(self.architectures)}")

    def arch_for_dataset(self, dataset: str) -> str:
        try:
            return self.DEFAULT_FOR_DATASET[dataset]
        except KeyError:
            raise ValueError(f"No default architecture for dataset '{dataset}'")

    def input_shape(self, arch: str) -> Tuple[int, ...]:
        return self._lookup(arch)[0]

    def layer_specs(self, arch: str, dropout: float = 0.5) -> List[LayerSpec]:
        return self._lookup(arch)[1](dropout)

    def build(self, arch: str, rng: Rng, precision: str = constants.PRECISION_F64,
              dropout: float = 0.5, merge_bias: bool = False, input_shape: Tuple[int, ...] | None = None) -> Network:
        """Builds a freshly initialised network.

        ``input_shape`` overrides the registered one, e.g. for the tiny MLP fed
        with differently sized synthetic images.
        """
        shape = tuple(input_shape) if input_shape else self.input_shape(arch)
        logging.info(f"Building '{arch}' for input {shape} (dropout={dropout}, merge_bias={merge_bias})")
        return Network(shape, self.layer_specs(arch, dropout), rng, dtype_for(precision), merge_bias)

    def _lookup(self, arch: str):
        try:
            return self.architectures[arch]
        except KeyError:
            raise ValueError(f"Unknown architecture '{arch}', expected one of {sorted(self.architectures)}")
