"""Single-sample, one-hidden-layer linear network (x = 1, y = 0).

The network output is ``f = v . u / sqrt(n)`` and its (scalar) NTK is
``lam = (|u|^2 + |v|^2) / n``. Gradient descent on ``L = f^2 / 2`` closes
exactly on the pair ``(f, lam)``::

    f'   = (1 - eta*lam + eta^2 f^2 / n) f
    lam' = lam + (eta f^2 / n) (eta*lam - 4)

so the model can be simulated either in parameter space (``step_params``)
or in the two-variable reduced form (``step_reduced``); the two agree up to
rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .numerics import gaussian_vector, make_rng
from .trace import PhaseReport, TraceRecord, TrainTrace, classify

OVERFLOW_GUARD = 1e150
CONV_TOL = 1e-10
DIV_THRESHOLD = 1e10


class Overflow(OverflowError):
    """|f| crossed the divergence guard."""


@dataclass(frozen=True)
class WarmupState:
    f: float
    lam: float
    n: int
    step: int = 0

    @property
    def loss(self) -> float:
        return 0.5 * self.f * self.f


@dataclass(frozen=True)
class WarmupParams:
    u: np.ndarray
    v: np.ndarray
    step: int = 0

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def f(self) -> float:
        return float(self.v @ self.u) / math.sqrt(self.n)

    @property
    def lam(self) -> float:
        return float(self.u @ self.u + self.v @ self.v) / self.n

    def state(self) -> WarmupState:
        return WarmupState(self.f, self.lam, self.n, self.step)


def init_warmup(rng: np.random.Generator, n: int) -> WarmupParams:
    if n < 1:
        raise ValueError("width n must be >= 1")
    u = gaussian_vector(rng, n)
    v = gaussian_vector(rng, n)
    return WarmupParams(u, v)


def step_reduced(state: WarmupState, eta: float) -> WarmupState:
    f, lam, n = state.f, state.lam, state.n
    f2n = f * f / n
    f_new = (1.0 - eta * lam + eta * eta * f2n) * f
    lam_new = lam + eta * f2n * (eta * lam - 4.0)
    if not abs(f_new) <= OVERFLOW_GUARD:
        raise Overflow(f"|f| = {abs(f_new):.3e} at step {state.step + 1}")
    return WarmupState(f_new, lam_new, n, state.step + 1)


def step_params(params: WarmupParams, eta: float) -> WarmupParams:
    g = eta * params.f / math.sqrt(params.n)
    u_new = params.u - g * params.v
    v_new = params.v - g * params.u
    out = WarmupParams(u_new, v_new, params.step + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        f_new = out.f
    if not abs(f_new) <= OVERFLOW_GUARD:
        raise Overflow(f"|f| = {abs(f_new):.3e} at step {out.step}")
    return out


def run_warmup(start: Union[WarmupParams, WarmupState], eta: float, max_steps: int = 10_000,
               conv_tol: float = CONV_TOL, div_threshold: float = DIV_THRESHOLD,
               lazy_band: float = 0.05, stop_on_converge: bool = True,
               seed: Optional[int] = None) -> Tuple[TrainTrace, PhaseReport]:
    """Train from ``start`` and classify the run.

    Parameters are stepped in parameter space, a ``WarmupState`` with the
    reduced recursion. The run stops early on divergence, and (unless
    ``stop_on_converge`` is False) once the loss drops below ``conv_tol``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    stepper = step_params if isinstance(start, WarmupParams) else step_reduced
    cur = start
    st = cur.state() if isinstance(cur, WarmupParams) else cur
    lam0 = st.lam
    trace = TrainTrace(meta={"model": "warmup", "eta": eta, "n": st.n, "lambda0": lam0,
                             "seed": seed})
    trace.append(TraceRecord(0, st.loss, st.lam, {"f": st.f}))
    for t in range(1, max_steps + 1):
        if stop_on_converge and st.loss < conv_tol:
            break
        try:
            cur = stepper(cur, eta)
        except Overflow:
            trace.diverged = True
            trace.meta["overflow_step"] = t
            break
        st = cur.state() if isinstance(cur, WarmupParams) else cur
        trace.append(TraceRecord(t, st.loss, st.lam, {"f": st.f}))
        if st.loss > div_threshold:
            trace.diverged = True
            break
    report = classify(trace, eta, lam0, conv_tol, div_threshold, lazy_band)
    return trace, report


def slice_basis(n: int, r_seed: int, s_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Orthonormal ``(r, s)`` in R^n from two seeded Gaussian draws (Gram-Schmidt)."""
    if n < 2:
        raise ValueError("a 2d slice needs n >= 2")
    r = gaussian_vector(make_rng(r_seed), n)
    r /= np.linalg.norm(r)
    s = gaussian_vector(make_rng(s_seed), n)
    s -= (s @ r) * r
    s -= (s @ r) * r
    s /= np.linalg.norm(s)
    return r, s


def slice_point(a: float, b: float, r: np.ndarray, s: np.ndarray) -> WarmupParams:
    return WarmupParams(a * r + b * s, a * r - b * s)


def slice_coords(params: WarmupParams, r: np.ndarray, s: np.ndarray) -> Tuple[float, float, float]:
    """Project ``(u, v)`` onto the slice; returns ``(a, b, off_slice_residual)``."""
    a = 0.5 * float((params.u + params.v) @ r)
    b = 0.5 * float((params.u - params.v) @ s)
    back = slice_point(a, b, r, s)
    resid = float(np.linalg.norm(params.u - back.u) + np.linalg.norm(params.v - back.v))
    return a, b, resid


def surface_slice(n: int, a_grid: Tuple[float, float, int], b_grid: Tuple[float, float, int],
                  r_seed: int = 1, s_seed: int = 2) -> List[Tuple[float, float, float, float]]:
    """Loss and curvature on the plane ``u = a r + b s, v = a r - b s``.

    On this plane ``f = (a^2 - b^2)/sqrt(n)`` and ``lam = 2 (a^2 + b^2)/n``;
    values are computed from the actual weight vectors.
    """
    r, s = slice_basis(n, r_seed, s_seed)
    rows = []
    for a in np.linspace(*a_grid):
        for b in np.linspace(*b_grid):
            p = slice_point(float(a), float(b), r, s)
            f = p.f
            rows.append((float(a), float(b), 0.5 * f * f, p.lam))
    return rows


def reduced_trajectory(state: WarmupState, eta: float, steps: int) -> List[WarmupState]:
    out = [state]
    for _ in range(steps):
        out.append(step_reduced(out[-1], eta))
    return out
