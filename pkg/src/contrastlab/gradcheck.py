"""Central finite differences over every parameter entry.

Only the forward loss is used here, so the numbers are independent of the
analytic backward pass they are compared with.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def numerical_gradients(loss_fn: Callable[[], float], arrays: Mapping[str, np.ndarray], h: float = 1e-5,
                        names=None) -> dict[str, np.ndarray]:
    """Perturb ``arrays`` in place entry by entry; every entry is restored afterwards."""
    out = {}
    for name in names or arrays:
        a = arrays[name]
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all shared entries.

    The floor keeps entries whose true gradient is exactly zero (unused
    vocabulary rows, say) from turning finite-difference roundoff of order
    1e-11 into a large relative error.
    """
    worst = 0.0
    for name, n in numeric.items():
        a = np.asarray(analytic[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
