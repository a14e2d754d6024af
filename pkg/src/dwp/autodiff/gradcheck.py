from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` must rebuild the graph from ``params`` on every call and return a
    scalar. The error for a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``max_coords`` only
    a random subset of coordinates per parameter is probed.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"finite_diff_check: h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check requires float64 parameters")
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
    out = fn()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("finite_diff_check: non-finite function value")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp = fn().item()
            flat[k] = orig - h
            fm = fn().item()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("finite_diff_check: non-finite function value")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return float(worst)
