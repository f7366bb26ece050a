"""Full-materialization forward/backward for smoothed cross-entropy, plus a
central finite-difference gradient oracle.

This module is the correctness anchor: it allocates the complete |V| x N
logit matrix on purpose and computes everything the obvious way. Use the
blocked engine when memory matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reductions import lse_columns
from .tensors import DenseMatrix, TokenSequence

__all__ = ["LossOutput", "Gradients", "naive_forward", "naive_backward",
           "finite_diff_grad"]

REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossOutput:
    """Per-token loss pieces and the reduced scalar.

    `lse` is the softmax normalizer per token, `o` the smoothed target score
    (the (1-beta)-weighted target logit plus the beta-weighted mean logit),
    and per_token_loss = lse - o exactly as computed.
    """

    lse: np.ndarray
    o: np.ndarray
    per_token_loss: np.ndarray
    total: float
    reduction: str


@dataclass(frozen=True)
class Gradients:
    grad_e: DenseMatrix
    grad_c: DenseMatrix


def _validate(E: DenseMatrix, C: DenseMatrix, x: TokenSequence, beta: float,
              reduction: str, ignore_mask=None):
    if E.rows != C.rows:
        raise ValueError(
            f"embedding dim {E.rows} does not match classifier dim {C.rows}")
    n, v, d = E.cols, C.cols, E.rows
    if len(x) != n:
        raise ValueError(f"{len(x)} targets for {n} token columns")
    x.check_vocab(v)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    keep = None
    if ignore_mask is not None:
        keep = ~np.asarray(ignore_mask, dtype=bool)
        if keep.shape != (n,):
            raise ValueError("ignore_mask must have one flag per token")
    return E.data, C.data, x.targets, n, v, d, keep


def token_weights(n: int, reduction: str, upstream: float, keep=None) -> np.ndarray:
    """Per-token chain-rule weight for the reduced loss: upstream times 1
    for `sum`, 1/(kept count) for `mean`; ignored tokens weigh zero."""
    n_eff = n if keep is None else int(keep.sum())
    w = np.full(n, upstream / n_eff if (reduction == "mean" and n_eff) else upstream)
    if reduction == "mean" and n_eff == 0:
        w[:] = 0.0
    if keep is not None:
        w[~keep] = 0.0
    return w


def _reduce(per_token: np.ndarray, reduction: str, keep) -> float:
    if keep is not None:
        per_token = per_token[keep]
    if reduction == "sum":
        return float(per_token.sum())
    return float(per_token.mean()) if per_token.size else 0.0


def _forward_arrays(Ea, Ca, xa, beta: float, v: int):
    z = Ca.T @ Ea
    lse = lse_columns(z)
    target_scores = z[xa, np.arange(xa.size)]
    o = (1.0 - beta) * target_scores + (beta / v) * z.sum(axis=0)
    return z, lse, o


def naive_forward(E: DenseMatrix, C: DenseMatrix, x: TokenSequence, beta: float,
                  reduction: str = "sum", ignore_mask=None) -> LossOutput:
    """Smoothed cross-entropy by materializing all logits.

    Per token i the loss is lse_i - o_i where
    o_i = (1-beta) * z[x_i, i] + (beta/|V|) * sum_v z[v, i]; tokens flagged in
    `ignore_mask` contribute zero loss and are excluded from `mean`.
    """
    Ea, Ca, xa, n, v, d, keep = _validate(E, C, x, beta, reduction, ignore_mask)
    _, lse, o = _forward_arrays(Ea, Ca, xa, beta, v)
    per_token = lse - o
    if keep is not None:
        per_token = np.where(keep, per_token, 0.0)
    total = _reduce(lse - o, reduction, keep)
    return LossOutput(lse, o, per_token, total, reduction)


def naive_backward(E: DenseMatrix, C: DenseMatrix, x: TokenSequence, beta: float,
                   reduction: str = "sum", upstream: float = 1.0,
                   ignore_mask=None) -> Gradients:
    """Exact gradients of the reduced loss with respect to E and C.

    Builds the adjusted softmax matrix A[v,i] = P[v,i] - (1-beta)*[v == x_i]
    - beta/|V| (columns of A sum to zero for every beta), scales columns by
    the per-token weight, and contracts: grad_e = C A, grad_c = E A^T.
    """
    Ea, Ca, xa, n, v, d, keep = _validate(E, C, x, beta, reduction, ignore_mask)
    z, lse, _ = _forward_arrays(Ea, Ca, xa, beta, v)
    a = np.exp(z - lse)
    a[xa, np.arange(n)] -= 1.0 - beta
    a -= beta / v
    a *= token_weights(n, reduction, upstream, keep)
    grad_e = Ca @ a
    grad_c = Ea @ a.T
    return Gradients(DenseMatrix._wrap(grad_e), DenseMatrix._wrap(grad_c))


def finite_diff_grad(E: DenseMatrix, C: DenseMatrix, x: TokenSequence, beta: float,
                     h: float, reduction: str = "sum",
                     ignore_mask=None) -> Gradients:
    """Central-difference gradient of the reduced loss, entry by entry.

    Costs 2*D*(N+|V|) full forward passes; intended for small instances only.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    Ea, Ca, xa, n, v, d, keep = _validate(E, C, x, beta, reduction, ignore_mask)

    def total(e_arr, c_arr) -> float:
        _, lse, o = _forward_arrays(e_arr, c_arr, xa, beta, v)
        return _reduce(lse - o, reduction, keep)

    grad_e = np.zeros((d, n))
    e_probe = Ea.copy()
    for i in range(d):
        for j in range(n):
            orig = e_probe[i, j]
            e_probe[i, j] = orig + h
            f_plus = total(e_probe, Ca)
            e_probe[i, j] = orig - h
            f_minus = total(e_probe, Ca)
            e_probe[i, j] = orig
            grad_e[i, j] = (f_plus - f_minus) / (2.0 * h)

    grad_c = np.zeros((d, v))
    c_probe = Ca.copy()
    for i in range(d):
        for j in range(v):
            orig = c_probe[i, j]
            c_probe[i, j] = orig + h
            f_plus = total(Ea, c_probe)
            c_probe[i, j] = orig - h
            f_minus = total(Ea, c_probe)
            c_probe[i, j] = orig
            grad_c[i, j] = (f_plus - f_minus) / (2.0 * h)

    return Gradients(DenseMatrix._wrap(grad_e), DenseMatrix._wrap(grad_c))
