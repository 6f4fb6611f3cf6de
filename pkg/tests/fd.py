"""Finite-difference gradient oracle.

Standalone numpy code: differentiates a scalar-valued callable numerically
so analytic gradients can be checked against an independent route. Always
run in float64 with h around 1e-5.
"""

import numpy as np


def numeric_grad(f, arrays, index, h=1e-5):
    """Central-difference gradient of scalar f(*arrays) wrt arrays[index].

    f takes numpy float64 arrays and returns a python float. Only the
    array at `index` is perturbed; the returned array has its shape.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    x = work[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        pos = it.multi_index
        orig = x[pos]
        x[pos] = orig + h
        fp = float(f(*work))
        x[pos] = orig - h
        fm = float(f(*work))
        x[pos] = orig
        g[pos] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def max_rel_err(analytic, numeric, floor=1e-3):
    """max |a-n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
