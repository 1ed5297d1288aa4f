"""Finite-difference gradient verification.

The checker brute-forces central differences over every scalar of every
input, so it is only meant for small instances (at most 10^4 scalars).
Inputs are promoted to float64 before evaluation; the kernels under test
are dtype-preserving, so this exercises the same code the float32 runtime
uses while keeping the numerical differentiation itself accurate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAX_SCALARS = 10_000


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool


def grad_check(f: Callable, inputs: Sequence[np.ndarray], tolerance: float = 1e-3,
               step: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f(*inputs)`` must return ``(value, grads)`` where ``value`` is a
    scalar and ``grads`` is a list of arrays, one per input, holding the
    analytic gradient of ``value``. The relative error per coordinate uses
    the denominator ``max(|analytic|, |numeric|, 1e-8)``; ``worst_index``
    is the flat index into the concatenation of all inputs.
    """
    inputs = [np.asarray(a, dtype=np.float64).copy() for a in inputs]
    total = sum(a.size for a in inputs)
    if total > MAX_SCALARS:
        raise ValueError(f"grad_check limited to {MAX_SCALARS} scalars, got {total}")

    _, grads = f(*inputs)
    if len(grads) != len(inputs):
        raise ValueError(f"f returned {len(grads)} gradients for {len(inputs)} inputs")

    max_rel = 0.0
    worst = 0
    offset = 0
    for a, g in zip(inputs, grads):
        g = np.asarray(g)
        if g.shape != a.shape:
            raise ValueError(f"gradient shape {g.shape} does not match input {a.shape}")
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(*inputs)[0])
            flat[i] = orig - step
            f_minus = float(f(*inputs)[0])
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = offset + i
        offset += flat.size
    return GradCheckReport(max_rel_error=max_rel, worst_index=worst,
                           passed=max_rel <= tolerance)
