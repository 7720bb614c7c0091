"""One-hidden-layer linear network ``f(x) = v^T u x / sqrt(n)`` on ``m`` samples.

Parameter space: ``u`` is ``n x d``, ``v`` has length ``n``. Function space:
the error ``f~ = f - y`` and the kernel

    Theta_ab = (|v|^2 x_a.x_b + x_a^T u^T u x_b) / (n m)

evolve under exact recursions that additionally need the contractions
``|v|^2``, ``w = u^T v`` and ``M = u^T u``. Those three obey their own closed
updates (with ``c = eta / sqrt(n)`` and ``zeta = X^T f~ / m``)::

    |v|^2' = |v|^2 - 2c w.zeta + c^2 zeta^T M zeta
    w'     = w - c (M + |v|^2) zeta + c^2 (w.zeta) zeta
    M'     = M - c (w zeta^T + zeta w^T) + c^2 |v|^2 zeta zeta^T

so the function-space simulation never touches the n-dimensional weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numerics import SymmetricMatvec, fix_sign, make_rng, top_eig_lanczos
from .trace import PhaseReport, TraceRecord, TrainTrace, classify

OVERFLOW_GUARD = 1e150


class ShapeMismatch(ValueError):
    pass


class InconsistentState(ValueError):
    pass


class ZeroError(ValueError):
    pass


class Overflow(OverflowError):
    pass


@dataclass(frozen=True)
class LinearNetParams:
    u: np.ndarray
    v: np.ndarray

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def d(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class RegressionSet:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        Y = np.asarray(self.Y, dtype=np.float64).reshape(-1)
        if X.shape[0] < 1 or X.shape[1] < 1 or X.shape[0] != Y.shape[0]:
            raise ShapeMismatch(f"X {X.shape} does not match Y {Y.shape}")
        if np.isnan(X).any() or np.isnan(Y).any():
            raise ValueError("dataset contains NaN")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class FunctionState:
    f: np.ndarray
    f_tilde: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray
    v_sq: Optional[float] = None
    uv: Optional[np.ndarray] = None
    u_gram: Optional[np.ndarray] = None
    step: int = 0

    @property
    def loss(self) -> float:
        return float(self.f_tilde @ self.f_tilde) / (2.0 * self.f_tilde.shape[0])


def init_linear(rng: np.random.Generator, n: int, d: int) -> LinearNetParams:
    u = rng.standard_normal((n, d))
    v = rng.standard_normal(n)
    return LinearNetParams(u, v)


def make_regression(rng: np.random.Generator, m: int, d: int) -> RegressionSet:
    """Rows ``N(0, I/d)``, balanced ``+-1`` labels."""
    X = rng.standard_normal((m, d)) / np.sqrt(d)
    Y = 2.0 * rng.permutation(np.arange(m) % 2) - 1.0
    return RegressionSet(X, Y)


def _check(params: LinearNetParams, data: RegressionSet):
    if params.u.ndim != 2 or params.v.shape != (params.n,):
        raise ShapeMismatch(f"u {params.u.shape} and v {params.v.shape} are inconsistent")
    if data.X.shape[1] != params.d:
        raise ShapeMismatch(f"inputs have dim {data.X.shape[1]}, u expects {params.d}")


def kernel(v_sq: float, u_gram: np.ndarray, X: np.ndarray, n: int) -> np.ndarray:
    m = X.shape[0]
    K = (v_sq * (X @ X.T) + X @ u_gram @ X.T) / (n * m)
    # exact symmetry, which rounding in the triple product does not give
    return 0.5 * (K + K.T)


def forward(params: LinearNetParams, data: RegressionSet) -> FunctionState:
    _check(params, data)
    n, m = params.n, data.m
    uv = params.u.T @ params.v
    f = (data.X @ uv) / math.sqrt(n)
    f_tilde = f - data.Y
    v_sq = float(params.v @ params.v)
    u_gram = params.u.T @ params.u
    theta = kernel(v_sq, u_gram, data.X, n)
    zeta = data.X.T @ f_tilde / m
    return FunctionState(f, f_tilde, theta, zeta, v_sq, uv, u_gram)


def step_params_full(params: LinearNetParams, data: RegressionSet, eta: float) -> LinearNetParams:
    _check(params, data)
    n, m = params.n, data.m
    f = (data.X @ (params.u.T @ params.v)) / math.sqrt(n)
    zeta = data.X.T @ (f - data.Y) / m
    coef = eta * zeta / math.sqrt(n)
    u_new = params.u - np.outer(params.v, coef)
    v_new = params.v - params.u @ coef
    out = LinearNetParams(u_new, v_new)
    with np.errstate(over="ignore", invalid="ignore"):
        f_new = (data.X @ (u_new.T @ v_new)) / math.sqrt(n)
    if not np.all(np.abs(f_new) <= OVERFLOW_GUARD):
        raise Overflow("network output crossed the divergence guard")
    return out


def step_function_full(state: FunctionState, data: RegressionSet, eta: float, n: int) -> FunctionState:
    """Advance error, kernel and contractions one step without the weights."""
    if state.v_sq is None or state.uv is None or state.u_gram is None:
        raise InconsistentState("function-space step needs |v|^2, u^T v and u^T u")
    X, m = data.X, data.m
    f, ft, theta, zeta = state.f, state.f_tilde, state.theta, state.zeta
    xz = X @ zeta
    f_ft = float(f @ ft)
    ft_new = ft - eta * (theta @ ft) + (eta * eta / (n * m)) * xz * f_ft

    zmz = float(zeta @ state.u_gram @ zeta)
    gram = X @ X.T
    theta_new = (theta
                 - (eta / (n * m)) * (np.outer(f, xz) + np.outer(xz, f) + (2.0 / m) * gram * f_ft)
                 + (eta * eta / (n * n * m)) * (state.v_sq * np.outer(xz, xz) + zmz * gram))

    c = eta / math.sqrt(n)
    w, M, vsq = state.uv, state.u_gram, state.v_sq
    wz = float(w @ zeta)
    v_sq_new = vsq - 2.0 * c * wz + c * c * zmz
    w_new = w - c * (M @ zeta + vsq * zeta) + c * c * wz * zeta
    M_new = M - c * (np.outer(w, zeta) + np.outer(zeta, w)) + c * c * vsq * np.outer(zeta, zeta)

    f_new = ft_new + data.Y
    if not np.all(np.abs(f_new) <= OVERFLOW_GUARD):
        raise Overflow("network output crossed the divergence guard")
    zeta_new = X.T @ ft_new / m
    return FunctionState(f_new, ft_new, theta_new, zeta_new, v_sq_new, w_new, M_new, state.step + 1)


def top_kernel_eig(theta: np.ndarray, tol: float = 1e-9) -> Tuple[float, np.ndarray]:
    """Top eigenpair of a training-set kernel, sign fixed so the largest entry is positive."""
    op = SymmetricMatvec.from_matrix(theta)
    lam, vec = top_eig_lanczos(op, tol=tol, rng=make_rng(0))
    return lam, fix_sign(vec)


def rayleigh(theta: np.ndarray, f_tilde: np.ndarray) -> float:
    norm2 = float(f_tilde @ f_tilde)
    if norm2 == 0.0:
        raise ZeroError("error vector is zero; projection undefined")
    return float(f_tilde @ theta @ f_tilde) / norm2


def projected_dynamics(states: Sequence[FunctionState]) -> List[Tuple[float, float, float]]:
    """Per step ``(lambda_hat, fmax, lam)``: kernel Rayleigh quotient along the
    error, the error's component along the top kernel eigenvector, and the top
    eigenvalue itself.
    """
    out = []
    for st in states:
        lam_hat = rayleigh(st.theta, st.f_tilde)
        lam, e_max = top_kernel_eig(st.theta)
        out.append((lam_hat, float(e_max @ st.f_tilde), lam))
    return out


def run_linear(params: LinearNetParams, data: RegressionSet, eta: float, max_steps: int = 10_000,
               conv_tol: float = 1e-10, div_threshold: float = 1e10, lazy_band: float = 0.05,
               stop_on_converge: bool = True, seed: Optional[int] = None
               ) -> Tuple[TrainTrace, PhaseReport]:
    """Parameter-space gradient descent with per-step kernel diagnostics."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    st = forward(params, data)
    lam0 = top_kernel_eig(st.theta)[0]
    trace = TrainTrace(meta={"model": "linear", "eta": eta, "n": params.n, "d": params.d,
                             "m": data.m, "lambda0": lam0, "seed": seed})

    def record(t, st):
        lam, e_max = top_kernel_eig(st.theta)
        norm = float(np.linalg.norm(st.f_tilde))
        aux = {"fnorm": norm, "fmax": float(e_max @ st.f_tilde),
               "zeta_norm": float(np.linalg.norm(st.zeta))}
        if norm > 0:
            aux["lambda_hat"] = rayleigh(st.theta, st.f_tilde)
        trace.append(TraceRecord(t, st.loss, lam, aux))

    record(0, st)
    for t in range(1, max_steps + 1):
        if stop_on_converge and st.loss < conv_tol:
            break
        try:
            params = step_params_full(params, data, eta)
        except Overflow:
            trace.diverged = True
            break
        st = forward(params, data)
        record(t, st)
        if st.loss > div_threshold:
            trace.diverged = True
            break
    report = classify(trace, eta, lam0, conv_tol, div_threshold, lazy_band)
    return trace, report
