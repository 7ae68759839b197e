"""Dense numeric helpers shared by the engine, the optimizers and the controller.

Tensors are plain ``numpy.ndarray`` values (float64 unless a run opts into
float32). Random numbers come from a single counter-based generator
(numpy's Philox) so that a seed fully determines every draw of a run.
"""
from typing import Sequence, Tuple

import numpy as np

import constants
from errors import NonFiniteError, ShapeMismatchError, SingularSystemError

Tensor = np.ndarray
Mat2 = np.ndarray  # shape (2, 2)
Vec2 = np.ndarray  # shape (2,)

_DTYPES = {
    constants.PRECISION_F64: np.float64,
    constants.PRECISION_F32: np.float32,
}


def dtype_for(precision: str) -> np.dtype:
    """Maps a precision tag ('f64' / 'f32') to a numpy dtype."""
    try:
        return np.dtype(_DTYPES[precision])
    except KeyError:
        raise ValueError(f"Unknown precision '{precision}', expected one of {sorted(_DTYPES)}")


class Rng:
    """Seeded Philox stream.

    Identical seed and identical call sequence give identical output.
    ``child(key)`` derives an independent stream deterministically, which is
    how Monte-Carlo draws and per-seed runs get their own generators.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, key: int) -> "Rng":
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key),))
        return Rng(int(seq.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def rng_normal(rng: Rng, shape, dtype=np.float64) -> Tensor:
    return rng.generator.standard_normal(size=shape, dtype=np.float64).astype(dtype, copy=False)


def rng_uniform(rng: Rng, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> Tensor:
    return rng.generator.uniform(low, high, size=shape).astype(dtype, copy=False)


def rng_permutation(rng: Rng, n: int) -> np.ndarray:
    return rng.generator.permutation(n)


def check_finite(x, what: str = "tensor"):
    """Raises NonFiniteError when x contains NaN or Inf; returns x otherwise."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"Non-finite values in {what}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"Inner extents differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def mat2(a11: float, a12: float, a21: float, a22: float) -> Mat2:
    return np.array([[a11, a12], [a21, a22]], dtype=np.float64)


def vec2(x1: float, x2: float) -> Vec2:
    return np.array([x1, x2], dtype=np.float64)


def solve2(A: Mat2, b: Vec2, ridge: float = 0.0) -> Vec2:
    """Solves (A + ridge*I) x = b with the 2x2 closed form.

    Raises SingularSystemError when the determinant is below machine-epsilon
    relative to the size of the products it is formed from.
    """
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    a11 = float(A[0, 0]) + ridge
    a12 = float(A[0, 1])
    a21 = float(A[1, 0])
    a22 = float(A[1, 1]) + ridge
    b1, b2 = float(b[0]), float(b[1])
    check_finite(np.array([a11, a12, a21, a22, b1, b2]), "solve2 input")

    det = a11 * a22 - a12 * a21
    scale = max(abs(a11 * a22), abs(a12 * a21))
    if scale == 0.0 or abs(det) <= np.finfo(np.float64).eps * scale:
        raise SingularSystemError(f"2x2 system is singular (det={det:.3e}, scale={scale:.3e})")

    return vec2((a22 * b1 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det)


def weighted_inner(x: Tensor, y: Tensor, hinv: Tensor) -> float:
    """x^T diag(hinv) y accumulated in float64."""
    return float(np.dot(np.asarray(x, dtype=np.float64) * np.asarray(hinv, dtype=np.float64),
                        np.asarray(y, dtype=np.float64)))


def shape_size(shape: Sequence[int]) -> int:
    size = 1
    for extent in shape:
        if extent <= 0:
            raise ShapeMismatchError(f"Extents must be positive, got {tuple(shape)}")
        size *= int(extent)
    return size


def split_sizes(sizes: Sequence[int]) -> Tuple[slice, ...]:
    """Consecutive slices covering a concatenation of blocks of the given sizes."""
    slices = []
    start = 0
    for size in sizes:
        slices.append(slice(start, start + size))
        start += size
    return tuple(slices)
