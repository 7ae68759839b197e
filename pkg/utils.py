import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value, nan for none)."""
    data = [float(v) for v in values]
    if not data:
        return float("nan"), float("nan")
    if len(data) == 1:
        return data[0], 0.0
    return float(np.mean(data)), float(np.std(data, ddof=1))


def time_averaged_alpha(records: Iterable, group: str, max_step: Optional[int] = None) -> float:
    """Mean learning rate of one group over steps 1..max_step of a trace.

    ``records`` may be TraceRecord objects or trace CSV rows (dicts of strings).
    """
    alphas = []
    for record in records:
        if isinstance(record, dict):
            name, step, alpha = record["group"], int(record["step"]), float(record["alpha"])
        else:
            name, step, alpha = record.group, record.step, record.alpha
        if name == group and (max_step is None or step <= max_step):
            alphas.append(alpha)
    return float(np.mean(alphas)) if alphas else float("nan")


def trend_by_seed(averages: Dict[Tuple[int, int], float]) -> Dict[int, List[Tuple[int, float]]]:
    """{(seed, batch_size): mean alpha} -> {seed: [(batch_size, mean alpha), ...] sorted by batch size}."""
    out: Dict[int, List[Tuple[int, float]]] = {}
    for (seed, batch), value in averages.items():
        out.setdefault(seed, []).append((batch, value))
    return {seed: sorted(rows) for seed, rows in out.items()}


def strictly_increasing(values: Sequence[float]) -> bool:
    return all(math.isfinite(b) and b > a for a, b in zip(values, values[1:]))


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
