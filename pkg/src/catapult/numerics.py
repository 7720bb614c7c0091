"""Random streams, matrix-free top-eigenvalue solvers and log-log fits.

All randomness flows through explicit ``numpy.random.Generator`` objects
backed by PCG64, so a seed plus a call sequence fixes every stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh_tridiagonal

DEFAULT_TOL = 1e-9


class NoConvergence(RuntimeError):
    """The eigensolver hit ``max_iter`` before meeting its residual tolerance."""

    def __init__(self, max_iter: int, residual: float):
        super().__init__(f"no convergence after {max_iter} iterations (residual {residual:.3e})")
        self.max_iter = max_iter
        self.residual = residual


class DegenerateFit(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; the only RNG constructor used in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_vector(rng: np.random.Generator, length: int, stddev: float = 1.0) -> np.ndarray:
    if length < 1:
        raise ValueError("length must be >= 1")
    # draw even when stddev == 0 so the stream advances identically
    return stddev * rng.standard_normal(length)


@dataclass(frozen=True)
class SymmetricMatvec:
    """A symmetric PSD operator known only through ``w -> A @ w``."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, w: np.ndarray) -> np.ndarray:
        return self.apply(w)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SymmetricMatvec":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
        return cls(matrix.shape[0], lambda w: matrix @ w)


def fix_sign(vec: np.ndarray) -> np.ndarray:
    """Flip ``vec`` so its largest-magnitude component is positive."""
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def dense_top_eig(matrix: np.ndarray) -> Tuple[float, np.ndarray]:
    """Top eigenpair of an explicit symmetric matrix (LAPACK ``eigh``)."""
    evals, evecs = np.linalg.eigh(np.asarray(matrix, dtype=np.float64))
    return float(evals[-1]), fix_sign(evecs[:, -1])


def _start_vector(op: SymmetricMatvec, rng: Optional[np.random.Generator]) -> np.ndarray:
    rng = make_rng(0) if rng is None else rng
    q = rng.standard_normal(op.dim)
    return q / np.linalg.norm(q)


def top_eig_power(op: SymmetricMatvec, tol: float = DEFAULT_TOL,
                  max_iter: Optional[int] = None,
                  rng: Optional[np.random.Generator] = None) -> Tuple[float, np.ndarray]:
    """Power iteration with a Rayleigh-quotient estimate.

    Stops once ``||A e - lam e|| <= tol * lam``. For a degenerate top
    eigenvalue the returned vector is some unit vector of that eigenspace.
    """
    max_iter = 10 * op.dim if max_iter is None else max_iter
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    e = _start_vector(op, rng)
    resid = np.inf
    for _ in range(max_iter):
        ae = op(e)
        lam = float(e @ ae)
        resid = float(np.linalg.norm(ae - lam * e))
        if resid <= tol * abs(lam):
            return lam, e
        norm = np.linalg.norm(ae)
        if norm == 0.0:
            # zero operator (or start vector in its kernel): eigenvalue 0
            return 0.0, e
        e = ae / norm
    raise NoConvergence(max_iter, resid)


def top_eig_lanczos(op: SymmetricMatvec, tol: float = DEFAULT_TOL,
                    max_iter: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> Tuple[float, np.ndarray]:
    """Lanczos with full reorthogonalization.

    The Ritz residual ``beta_j |s_j|`` decides when to stop; the candidate is
    then confirmed with one explicit matvec so the returned pair satisfies
    ``||A e - lam e|| <= tol * lam`` exactly as stated.
    """
    max_iter = 10 * op.dim if max_iter is None else max_iter
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    krylov_max = min(max_iter, op.dim)
    basis = np.empty((krylov_max, op.dim))
    alphas: list = []
    betas: list = []
    q = _start_vector(op, rng)
    resid = np.inf
    for j in range(krylov_max):
        basis[j] = q
        w = op(q)
        alpha = float(q @ w)
        w = w - alpha * q
        if j > 0:
            w -= betas[-1] * basis[j - 1]
        # two passes of Gram-Schmidt against the whole basis
        for _ in range(2):
            w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        if j == 0:
            evals, evecs = np.array([alpha]), np.ones((1, 1))
        else:
            evals, evecs = eigh_tridiagonal(np.array(alphas), np.array(betas))
        theta = float(evals[-1])
        ritz_resid = beta * abs(evecs[-1, -1])
        exhausted = j == krylov_max - 1 or beta <= 1e-14 * max(abs(theta), 1e-300)
        if ritz_resid <= tol * abs(theta) or exhausted:
            e = basis[: j + 1].T @ evecs[:, -1]
            e /= np.linalg.norm(e)
            ae = op(e)
            lam = float(e @ ae)
            resid = float(np.linalg.norm(ae - lam * e))
            if resid <= tol * abs(lam):
                return lam, e
            if exhausted:
                break
        q = w / beta
        betas.append(beta)
    raise NoConvergence(max_iter, resid)


def fit_loglog_slope(points: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    """Least-squares line through ``(log x, log y)``; returns ``(slope, intercept)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (x, y) points")
    if np.any(pts <= 0):
        raise ValueError("log-log fit needs strictly positive coordinates")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    dx = lx - lx.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DegenerateFit("all x values are equal")
    slope = float(dx @ (ly - ly.mean())) / sxx
    return slope, float(ly.mean() - slope * lx.mean())
