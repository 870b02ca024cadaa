"""Shared helpers: an independent numerical-gradient oracle.

Kept deliberately separate from the package's own ``grad_check`` so the
engine is audited by code that shares nothing with it.
"""

from __future__ import annotations

import numpy as np


def numeric_grad(f, arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` (arrays -> float) in each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = f(arrays)
            flat[i] = saved - h
            fm = f(arrays)
            flat[i] = saved
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, atol=1e-6, rtol=1e-5):
    for ga, gn in zip(analytic, numeric):
        np.testing.assert_allclose(ga, gn, atol=atol, rtol=rtol)
