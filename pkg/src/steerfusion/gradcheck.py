"""Central finite-difference gradient checking.

The checker is intentionally independent of the tape: it only needs a
scalar-valued function of numpy arrays, which it perturbs elementwise.
Error is reported relative to the largest gradient magnitude with a
floor of 1e-8, so near-zero gradients are compared on an absolute scale
instead of blowing up the ratio.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_FLOOR = 1e-8


def finite_difference_grad(f: Callable[..., float], args: Sequence[np.ndarray], index: int,
                           step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f(*args)`` w.r.t. ``args[index]``."""
    args = [np.array(a, dtype=np.float64) for a in args]
    target = args[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + step
        f_plus = float(f(*args))
        target[idx] = orig - step
        f_minus = float(f(*args))
        target[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
        it.iternext()
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> float:
    """Max |analytic - numeric| scaled by the larger gradient magnitude (floored)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(floor, float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(f: Callable[..., float], args: Sequence[np.ndarray],
                    analytic_grads: Sequence[np.ndarray | None],
                    step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL,
                    floor: float = DEFAULT_FLOOR) -> float:
    """Assert every provided analytic gradient against central differences.

    Returns the worst relative error across all checked arguments.
    Entries of ``analytic_grads`` that are ``None`` are skipped.
    """
    worst = 0.0
    for i, g_analytic in enumerate(analytic_grads):
        if g_analytic is None:
            continue
        g_numeric = finite_difference_grad(f, args, i, step=step)
        err = relative_error(g_analytic, g_numeric, floor=floor)
        if err > worst:
            worst = err
        if err >= tol:
            raise AssertionError(
                f"gradient check failed for argument {i}: relative error {err:.3e} >= {tol:.1e}"
            )
    return worst
