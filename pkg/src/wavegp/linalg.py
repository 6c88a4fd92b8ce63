"""Dense symmetric positive definite linear algebra.

Cholesky factorization with an explicit jitter argument, triangular
solves, and log-determinants, all float64.  `solve_psd` and
`logdet_psd` are the tape-aware entry points: they cache the factor
computed on the forward pass and register custom adjoints, so one
factorization serves the value, the solve, and the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .autodiff import Var


class NotPositiveDefinite(Exception):
    """Factorization failed: a pivot was non-positive (even after jitter)."""


class DimensionMismatch(Exception):
    """Operand shapes are incompatible."""


# Relative jitter used when a Gram matrix fails to factor as-is.
DEFAULT_JITTER_SCALE = 1e-8

_SYM_RTOL = 1e-9


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with A + jitter*I = L L^T."""

    lower: np.ndarray
    jitter: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _check_symmetric(a: np.ndarray) -> None:
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        return
    asym = float(np.max(np.abs(a - a.T)))
    if asym > _SYM_RTOL * scale:
        raise ValueError(f"matrix is not symmetric (asymmetry {asym:.3e}, scale {scale:.3e})")


def cholesky(a: np.ndarray, jitter: float = 0.0) -> CholeskyFactor:
    """Factor a + jitter*I = L L^T.

    Raises NotPositiveDefinite when the (jittered) matrix has a
    non-positive pivot.  Calling with jitter j is exactly equivalent to
    calling with jitter 0 on a + j*I.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    _check_symmetric(a)
    m = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
    try:
        lower = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefinite(str(e)) from e
    return CholeskyFactor(lower, float(jitter))


def solve(factor: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve (A + jitter*I) x = b via two triangular solves."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factor.dim:
        raise DimensionMismatch(
            f"solve: factor dim {factor.dim} vs right-hand side {b.shape}")
    y = solve_triangular(factor.lower, b, lower=True)
    return solve_triangular(factor.lower, y, lower=True, trans="T")


def logdet(factor: CholeskyFactor) -> float:
    """log det(A + jitter*I) = 2 sum log diag(L)."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def factor_with_rescue(a: np.ndarray, rescue: bool = True) -> CholeskyFactor:
    """Factor with jitter 0; on failure retry once with the default
    relative jitter (1e-8 times the mean diagonal)."""
    try:
        return cholesky(a, 0.0)
    except NotPositiveDefinite:
        if not rescue:
            raise
        j = DEFAULT_JITTER_SCALE * float(np.mean(np.diag(a)))
        return cholesky(a, j)


# ------------------------------------------------------------ tape entry

def solve_psd(a, b, rescue: bool = True):
    """x = (A [+ jitter])^{-1} B for symmetric PD A; tape-aware.

    B must be 2-D.  Adjoints: Bbar = A^{-1} Xbar, Abar = -Bbar x^T.
    """
    if not ad._any_var(a, b):
        return solve(factor_with_rescue(np.asarray(a, float), rescue),
                     np.asarray(b, float))
    av, bv = ad.value_of(a), ad.value_of(b)
    factor = factor_with_rescue(av, rescue)
    x = solve(factor, bv)

    def vjp(g):
        gb = solve(factor, g)
        return (-gb @ x.T, gb)

    return ad.record("solve_psd", x, (a, b), vjp,
                     lambda: solve(factor, ad.value_of(b)))


def logdet_psd(a, rescue: bool = True):
    """log det(A [+ jitter]) for symmetric PD A; tape-aware.

    Adjoint: Abar = g * A^{-1}.
    """
    if not ad._any_var(a):
        return logdet(factor_with_rescue(np.asarray(a, float), rescue))
    av = ad.value_of(a)
    factor = factor_with_rescue(av, rescue)
    val = logdet(factor)

    def vjp(g):
        inv = solve(factor, np.eye(factor.dim))
        return (float(g) * inv,)

    return ad.record("logdet_psd", np.float64(val), (a,), vjp,
                     lambda: np.float64(logdet(factor)))


__all__ = [
    "CholeskyFactor", "NotPositiveDefinite", "DimensionMismatch",
    "DEFAULT_JITTER_SCALE", "cholesky", "solve", "logdet",
    "factor_with_rescue", "solve_psd", "logdet_psd",
]
