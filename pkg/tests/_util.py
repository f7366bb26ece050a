"""Shared helpers for the test suite."""

import numpy as np


def rel_err(got, want) -> float:
    """Relative Frobenius error with a floor to dodge zero denominators."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.linalg.norm(got - want)) / max(float(np.linalg.norm(want)), 1e-300)


def grad_rel_err(got, want) -> float:
    return max(
        rel_err(got.grad_e.data, want.grad_e.data),
        rel_err(got.grad_c.data, want.grad_c.data),
    )
