"""Forward/backward passes with streaming per-sample gradient statistics.

Conventions used throughout the reverse pass:
  * upstream derivatives are per-sample, i.e. row i holds d f_i / d out_i
    (no 1/N factor); batch gradients are the mean over samples.
  * for a diagonal preconditioner H, each parameter group reports
    sum_i g_i^T H^-1 g_i without keeping the N per-sample gradients around
    (dense layers use the rank-1 structure, conv layers accumulate in chunks).
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import constants
from core_math import Rng, Tensor, rng_uniform, shape_size, split_sizes
from errors import NonFiniteError, ParameterCeilingError, ShapeMismatchError


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0      # out_features (dense) / out_channels (conv)
    kernel: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind in (constants.LAYER_DENSE, constants.LAYER_CONV2D) and self.size <= 0:
            raise ValueError(f"{self.kind}: feature count must be positive, got {self.size}")
        if self.kind in (constants.LAYER_CONV2D, constants.LAYER_MAXPOOL2D) and self.kernel <= 0:
            raise ValueError(f"{self.kind}: kernel must be positive, got {self.kernel}")
        if self.kind == constants.LAYER_DROPOUT and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind not in _LAYER_TYPES:
            raise ValueError(f"Unknown layer kind: {self.kind}")

    @classmethod
    def dense(cls, out_features: int) -> "LayerSpec":
        return cls(constants.LAYER_DENSE, size=out_features)

    @classmethod
    def conv2d(cls, out_channels: int, kernel: int) -> "LayerSpec":
        return cls(constants.LAYER_CONV2D, size=out_channels, kernel=kernel)

    @classmethod
    def maxpool2d(cls, kernel: int) -> "LayerSpec":
        return cls(constants.LAYER_MAXPOOL2D, kernel=kernel)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(constants.LAYER_RELU)

    @classmethod
    def dropout(cls, rate: float) -> "LayerSpec":
        return cls(constants.LAYER_DROPOUT, rate=rate)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(constants.LAYER_FLATTEN)

    @classmethod
    def logsoftmax(cls) -> "LayerSpec":
        return cls(constants.LAYER_LOGSOFTMAX)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    trainable = False

    def __init__(self, spec: LayerSpec, name: str, input_shape: Tuple[int, ...]):
        self.spec = spec
        self.name = name
        self.input_shape = tuple(input_shape)
        self.output_shape = self._infer_output_shape(self.input_shape)
        self.params: Dict[str, Tensor] = {}

    def _infer_output_shape(self, input_shape):
        return input_shape

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]) -> Tuple[Tensor, Any]:
        raise NotImplementedError

    def backward(self, dy: Tensor, ctx: Any, need_dx: bool) -> Tuple[Optional[Tensor], Any]:
        raise NotImplementedError


class Dense(Layer):
    trainable = True

    def _infer_output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeMismatchError(f"{self.name}: dense layer expects flat input, got {input_shape}")
        return (self.spec.size,)

    def init_params(self, rng: Rng, dtype):
        fan_in = self.input_shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        self.params["weight"] = rng_uniform(rng, (self.spec.size, fan_in), -bound, bound, dtype)
        self.params["bias"] = rng_uniform(rng, (self.spec.size,), -bound, bound, dtype)

    def forward(self, x, mode, rng):
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dz, x, need_dx):
        dx = dz @ self.params["weight"] if need_dx else None
        return dx, (dz, x)

    def grads(self, local) -> Dict[str, Tensor]:
        dz, x = local
        n = dz.shape[0]
        return {"weight": (dz.T @ x) / n, "bias": dz.sum(axis=0) / n}

    def sample_sumsq(self, local, hinv: Mapping[str, Tensor], chunk_size: int) -> Dict[str, float]:
        # G_i = dz_i a_i^T, so sum_i sum_jk h_jk dz_ij^2 a_ik^2 = <h, (dz^2)^T (a^2)>
        dz, x = local
        dz2 = dz * dz
        out = {}
        if "weight" in hinv:
            out["weight"] = float(np.sum(hinv["weight"] * (dz2.T @ (x * x))))
        if "bias" in hinv:
            out["bias"] = float(np.dot(hinv["bias"], dz2.sum(axis=0)))
        return out

    def sample_grads(self, local) -> Dict[str, Tensor]:
        dz, x = local
        return {"weight": np.einsum("no,ni->noi", dz, x), "bias": dz.copy()}


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution via im2col."""

    trainable = True

    def _infer_output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"{self.name}: conv layer expects CxHxW input, got {input_shape}")
        c, h, w = input_shape
        k = self.spec.kernel
        if h < k or w < k:
            raise ShapeMismatchError(f"{self.name}: kernel {k} larger than input {h}x{w}")
        return (self.spec.size, h - k + 1, w - k + 1)

    def init_params(self, rng: Rng, dtype):
        c = self.input_shape[0]
        k = self.spec.kernel
        fan_in = c * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.params["weight"] = rng_uniform(rng, (self.spec.size, c, k, k), -bound, bound, dtype)
        self.params["bias"] = rng_uniform(rng, (self.spec.size,), -bound, bound, dtype)

    def _im2col(self, x):
        n, c, h, w = x.shape
        k = self.spec.kernel
        ho, wo = h - k + 1, w - k + 1
        windows = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)

    def forward(self, x, mode, rng):
        n = x.shape[0]
        cout, ho, wo = self.output_shape
        cols = self._im2col(x)
        wmat = self.params["weight"].reshape(cout, -1)
        z = cols @ wmat.T + self.params["bias"]
        return z.transpose(0, 2, 1).reshape(n, cout, ho, wo), (cols, x.shape)

    def backward(self, dz, ctx, need_dx):
        cols, x_shape = ctx
        n = dz.shape[0]
        cout = self.spec.size
        dz3 = dz.reshape(n, cout, -1)  # N, Cout, P
        dx = None
        if need_dx:
            wmat = self.params["weight"].reshape(cout, -1)
            dcols = np.matmul(dz3.transpose(0, 2, 1), wmat)  # N, P, K
            dx = self._col2im(dcols, x_shape)
        return dx, (dz3, cols)

    def _col2im(self, dcols, x_shape):
        n, c, h, w = x_shape
        k = self.spec.kernel
        ho, wo = h - k + 1, w - k + 1
        d6 = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros(x_shape, dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += d6[:, :, :, :, i, j]
        return dx

    def grads(self, local) -> Dict[str, Tensor]:
        dz3, cols = local
        n, cout, p = dz3.shape
        flat_dz = dz3.transpose(1, 0, 2).reshape(cout, n * p)
        gw = (flat_dz @ cols.reshape(n * p, -1)) / n
        return {"weight": gw.reshape(self.params["weight"].shape), "bias": dz3.sum(axis=(0, 2)) / n}

    def sample_sumsq(self, local, hinv: Mapping[str, Tensor], chunk_size: int) -> Dict[str, float]:
        dz3, cols = local
        n, cout, _ = dz3.shape
        out = {}
        if "weight" in hinv:
            hw = hinv["weight"].reshape(cout, -1)
            acc = np.zeros_like(hw)
            for start in range(0, n, chunk_size):
                g = np.matmul(dz3[start:start + chunk_size], cols[start:start + chunk_size])
                acc += np.einsum("nck,nck->ck", g, g)
            out["weight"] = float(np.sum(acc * hw))
        if "bias" in hinv:
            db = dz3.sum(axis=2)
            out["bias"] = float(np.dot(hinv["bias"], np.einsum("nc,nc->c", db, db)))
        return out

    def sample_grads(self, local) -> Dict[str, Tensor]:
        dz3, cols = local
        n = dz3.shape[0]
        gw = np.matmul(dz3, cols).reshape((n,) + self.params["weight"].shape)
        return {"weight": gw, "bias": dz3.sum(axis=2)}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties go to the lowest index in the window."""

    def _infer_output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatchError(f"{self.name}: pooling expects CxHxW input, got {input_shape}")
        c, h, w = input_shape
        k = self.spec.kernel
        if h < k or w < k:
            raise ShapeMismatchError(f"{self.name}: pool kernel {k} larger than input {h}x{w}")
        return (c, h // k, w // k)

    def forward(self, x, mode, rng):
        n = x.shape[0]
        c, ho, wo = self.output_shape
        k = self.spec.kernel
        xr = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = np.argmax(xr, axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, ctx, need_dx):
        idx, x_shape = ctx
        n = dy.shape[0]
        c, ho, wo = self.output_shape
        k = self.spec.kernel
        d = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(d, idx[..., None], dy[..., None], axis=-1)
        d = d.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        if d.shape != tuple(x_shape):
            dx = np.zeros(x_shape, dtype=dy.dtype)
            dx[:, :, :ho * k, :wo * k] = d
            d = dx
        return d, None


class ReLU(Layer):
    def forward(self, x, mode, rng):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, dy, mask, need_dx):
        return dy * mask, None


class Dropout(Layer):
    """Inverted dropout; each sample gets its own mask."""

    def forward(self, x, mode, rng):
        rate = self.spec.rate
        if mode != constants.TRAIN or rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs an Rng")
        keep = rng_uniform(rng, x.shape) >= rate
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * mask, mask

    def backward(self, dy, mask, need_dx):
        return (dy if mask is None else dy * mask), None


class Flatten(Layer):
    def _infer_output_shape(self, input_shape):
        return (shape_size(input_shape),)

    def forward(self, x, mode, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, x_shape, need_dx):
        return dy.reshape(x_shape), None


class LogSoftmax(Layer):
    def _infer_output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeMismatchError(f"{self.name}: log-softmax expects flat input, got {input_shape}")
        return input_shape

    def forward(self, x, mode, rng):
        shifted = x - x.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return out, out

    def backward(self, dy, out, need_dx):
        return dy - np.exp(out) * dy.sum(axis=1, keepdims=True), None


_LAYER_TYPES = {
    constants.LAYER_DENSE: (Dense, "fc"),
    constants.LAYER_CONV2D: (Conv2D, "conv"),
    constants.LAYER_MAXPOOL2D: (MaxPool2D, "pool"),
    constants.LAYER_RELU: (ReLU, "relu"),
    constants.LAYER_DROPOUT: (Dropout, "dropout"),
    constants.LAYER_FLATTEN: (Flatten, "flatten"),
    constants.LAYER_LOGSOFTMAX: (LogSoftmax, "logsoftmax"),
}


# ---------------------------------------------------------------------------
# Network and parameter groups
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamGroup:
    """One unit of hyperparameter tuning: a layer's weight, its bias, or both."""

    name: str
    layer_index: int
    keys: Tuple[str, ...]
    shapes: Tuple[Tuple[int, ...], ...]

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(shape_size(s) for s in self.shapes)

    @property
    def size(self) -> int:
        return sum(self.sizes)

    def flatten(self, arrays: Mapping[str, Tensor]) -> Tensor:
        parts = [np.ravel(arrays[key]) for key in self.keys]
        return parts[0].copy() if len(parts) == 1 else np.concatenate(parts)

    def split(self, flat: Tensor) -> Dict[str, Tensor]:
        return {key: flat[sl].reshape(shape)
                for key, sl, shape in zip(self.keys, split_sizes(self.sizes), self.shapes)}


class Network:
    def __init__(self, input_shape: Sequence[int], specs: Sequence[LayerSpec], rng: Rng,
                 dtype=np.float64, merge_bias: bool = False):
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers: List[Layer] = []
        counters: Dict[str, int] = {}
        shape = self.input_shape
        for spec in specs:
            cls, prefix = _LAYER_TYPES[spec.kind]
            counters[prefix] = counters.get(prefix, 0) + 1
            layer = cls(spec, f"{prefix}{counters[prefix]}", shape)
            if layer.trainable:
                layer.init_params(rng, self.dtype)
            self.layers.append(layer)
            shape = layer.output_shape
        self.output_shape = shape

        self.groups: List[ParamGroup] = []
        for index, layer in enumerate(self.layers):
            if not layer.trainable:
                continue
            if merge_bias:
                keys = ("weight", "bias")
                self.groups.append(ParamGroup(layer.name, index, keys,
                                              tuple(layer.params[k].shape for k in keys)))
            else:
                for key in ("weight", "bias"):
                    self.groups.append(ParamGroup(f"{layer.name}.{key}", index, (key,),
                                                  (layer.params[key].shape,)))
        self._groups_by_layer: Dict[int, List[ParamGroup]] = {}
        for group in self.groups:
            self._groups_by_layer.setdefault(group.layer_index, []).append(group)
        logging.info(f"Network built: {len(self.layers)} layers, {len(self.groups)} parameter groups, "
                     f"{self.num_params} parameters ({self.dtype.name})")

    @property
    def num_params(self) -> int:
        return sum(group.size for group in self.groups)

    def group(self, name: str) -> ParamGroup:
        for group in self.groups:
            if group.name == name:
                return group
        raise KeyError(f"No parameter group named '{name}'")

    def groups_for_layer(self, index: int) -> List[ParamGroup]:
        return self._groups_by_layer.get(index, [])

    def get_flat(self, group: ParamGroup) -> Tensor:
        return group.flatten(self.layers[group.layer_index].params)

    def set_flat(self, group: ParamGroup, flat: Tensor):
        params = self.layers[group.layer_index].params
        for key, value in group.split(np.asarray(flat)).items():
            params[key][...] = value


@dataclass
class ForwardCache:
    contexts: List[Any]
    batch_size: int
    mode: str
    output_shape: Tuple[int, ...] = field(default_factory=tuple)


@dataclass
class BatchGradStats:
    group: str
    batch_grad: Tensor
    sample_count: int
    per_sample_sumsq: Optional[float] = None
    hdiag: Optional[Tensor] = None


HDiagSource = Union[Mapping[str, Tensor], Callable[[ParamGroup, Tensor], Tensor]]


def forward(net: Network, batch: Tensor, mode: str = constants.EVAL,
            rng: Optional[Rng] = None) -> Tuple[Tensor, ForwardCache]:
    if tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeMismatchError(f"Batch shape {batch.shape[1:]} does not match network input {net.input_shape}")
    x = np.asarray(batch, dtype=net.dtype)
    contexts = []
    for layer in net.layers:
        x, ctx = layer.forward(x, mode, rng)
        contexts.append(ctx)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("Non-finite activation in forward pass")
    return x, ForwardCache(contexts, x.shape[0], mode, tuple(x.shape))


def _check_targets(targets, n: int, num_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeMismatchError(f"Expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= num_classes):
        raise IndexError(f"Target index out of range [0, {num_classes})")
    return targets


def nll_loss(logprobs: Tensor, targets) -> float:
    n, c = logprobs.shape
    targets = _check_targets(targets, n, c)
    return float(-np.mean(logprobs[np.arange(n), targets]))


def _backprop(net: Network, cache: ForwardCache, targets):
    """Yields (layer_index, layer, local) for every trainable layer, last layer first."""
    if cache is None or len(cache.contexts) != len(net.layers):
        raise ValueError("backward needs the cache of a matching forward call")
    n, c = cache.output_shape
    targets = _check_targets(targets, n, c)
    dy = np.zeros((n, c), dtype=net.dtype)
    dy[np.arange(n), targets] = -1.0
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        dy, local = layer.backward(dy, cache.contexts[index], need_dx=index > 0)
        if layer.trainable:
            yield index, layer, local


def _resolve_hdiag(source: HDiagSource, group: ParamGroup, grad: Tensor) -> Tensor:
    hdiag = source(group, grad) if callable(source) else source[group.name]
    hdiag = np.asarray(hdiag)
    if hdiag.shape != grad.shape:
        raise ShapeMismatchError(f"{group.name}: preconditioner shape {hdiag.shape} != gradient shape {grad.shape}")
    return hdiag


def backward(net: Network, cache: ForwardCache, targets, hdiag: Optional[HDiagSource] = None,
             sample_stats: bool = True, chunk_size: int = 32) -> Dict[str, BatchGradStats]:
    """Batch gradients per parameter group plus, when ``hdiag`` is given, the
    streamed sum_i g_i^T H^-1 g_i.

    ``hdiag`` holds the diagonal of H (not its inverse), either as a mapping
    group name -> flat diagonal or as a callable (group, batch_grad) ->
    diagonal. The callable form is invoked exactly once per group, after the
    group's batch gradient is known, so optimizers whose H depends on the
    current gradient can supply it. With ``sample_stats=False`` the diagonal
    is still resolved and returned but the per-sample sum is skipped.
    """
    stats: Dict[str, BatchGradStats] = {}
    for index, layer, local in _backprop(net, cache, targets):
        grads = layer.grads(local)
        for group in net.groups_for_layer(index):
            g = group.flatten(grads)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"Non-finite gradient in group {group.name}")
            if hdiag is None:
                stats[group.name] = BatchGradStats(group.name, g, cache.batch_size)
                continue
            h = _resolve_hdiag(hdiag, group, g)
            if not sample_stats:
                stats[group.name] = BatchGradStats(group.name, g, cache.batch_size, None, h)
                continue
            hinv = {key: arr.astype(net.dtype, copy=False)
                    for key, arr in group.split(1.0 / h).items()}
            sumsq = sum(layer.sample_sumsq(local, hinv, chunk_size).values())
            if not np.isfinite(sumsq):
                raise NonFiniteError(f"Non-finite per-sample statistic in group {group.name}")
            stats[group.name] = BatchGradStats(group.name, g, cache.batch_size, sumsq, h)
    return {group.name: stats[group.name] for group in net.groups}


def materialize_per_sample_grads(net: Network, cache: ForwardCache, targets,
                                 ceiling: int = constants.MATERIALIZE_PARAM_CEILING) -> List[Dict[str, Tensor]]:
    """Explicit per-sample gradients, one {group name: flat gradient} per sample.

    Reference path for tests and self-checks; refuses networks above ``ceiling`` parameters.
    """
    if net.num_params > ceiling:
        raise ParameterCeilingError(f"Network has {net.num_params} parameters, ceiling is {ceiling}")
    n = cache.batch_size
    per_sample: List[Dict[str, Tensor]] = [dict() for _ in range(n)]
    for index, layer, local in _backprop(net, cache, targets):
        sample_grads = layer.sample_grads(local)
        for group in net.groups_for_layer(index):
            for i in range(n):
                per_sample[i][group.name] = group.flatten({key: sample_grads[key][i] for key in group.keys})
    return per_sample


def predict(net: Network, images: Tensor, batch_size: int = 500) -> np.ndarray:
    """Arg-max class predictions in eval mode, evaluated in chunks."""
    preds = []
    for start in range(0, images.shape[0], batch_size):
        out, _ = forward(net, images[start:start + batch_size], constants.EVAL)
        preds.append(np.argmax(out, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def error_rate(net: Network, images: Tensor, labels: np.ndarray, batch_size: int = 500) -> float:
    if images.shape[0] == 0:
        return 0.0
    return float(np.mean(predict(net, images, batch_size) != np.asarray(labels)))


__all__ = [
    "LayerSpec", "Network", "ParamGroup", "ForwardCache", "BatchGradStats",
    "forward", "backward", "nll_loss", "materialize_per_sample_grads", "predict", "error_rate",
]
