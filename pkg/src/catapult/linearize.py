"""Tangent (linearized) models of an MLP and the NTK-change metric.

A tangent model freezes the anchor parameters ``theta0`` and trains only an
offset ``delta``; its outputs are ``f(x; theta0) + J(theta0) delta``. Each
training step costs one JVP and one VJP through the cached anchor pass, and
the Jacobian is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .mlp import Batch, MlpModel, OptimizerCfg, _Cache, ntk_dense, sgd_train
from .trace import TraceRecord, TrainTrace


@dataclass
class TangentModel:
    anchor: MlpModel
    delta: np.ndarray
    caches: Dict[str, _Cache] = field(default_factory=dict, repr=False)

    def attach(self, name: str, X: np.ndarray) -> None:
        """Cache the anchor forward pass on a named input set."""
        self.caches[name] = _Cache(self.anchor, X)

    def base_outputs(self, name: str) -> np.ndarray:
        return self.caches[name].output

    def predict(self, name: str) -> np.ndarray:
        cache = self.caches[name]
        return cache.output + cache.jvp(self.delta)

    def predict_inputs(self, X: np.ndarray) -> np.ndarray:
        cache = _Cache(self.anchor, X)
        return cache.output + cache.jvp(self.delta)

    def loss_grad(self, name: str, Y: np.ndarray):
        """``(loss, gradient wrt delta)`` on a cached set under the MLP loss normalization."""
        cache = self.caches[name]
        resid = cache.output + cache.jvp(self.delta) - Y
        nb, k = resid.shape
        loss = float(np.sum(resid ** 2) / (2.0 * k * nb))
        return loss, cache.vjp(resid) / (k * nb)


def linearize_at(model: MlpModel, sets: Optional[Dict[str, np.ndarray]] = None) -> TangentModel:
    """Tangent model anchored at a copy of ``model`` with ``delta = 0``."""
    tm = TangentModel(model.copy(), np.zeros(model.num_params))
    for name, X in (sets or {}).items():
        tm.attach(name, X)
    return tm


def train_tangent(tm: TangentModel, X: np.ndarray, Y: np.ndarray, eta: float, steps: int,
                  div_threshold: float = 1e10, name: str = "train", callback=None) -> TrainTrace:
    """Full-batch gradient descent on ``delta``, updating ``tm`` in place.

    The train error then evolves as ``e' = (I - eta Theta0) e`` with the
    anchor kernel ``Theta0``. Divergence stops the run and sets
    ``trace.diverged``. ``callback(t, tm, outputs)`` may return True to stop.
    """
    if name not in tm.caches:
        tm.attach(name, X)
    cfg = OptimizerCfg(eta)
    Y = Batch(X, Y).Y
    cache = tm.caches[name]
    trace = TrainTrace(meta={"eta": eta, "model": "tangent", "widths": list(tm.anchor.widths)})
    for t in range(steps + 1):
        out = cache.output + cache.jvp(tm.delta)
        resid = out - Y
        nb, k = resid.shape
        loss = float(np.sum(resid ** 2) / (2.0 * k * nb))
        trace.append(TraceRecord(t, loss))
        if not np.isfinite(loss) or loss > div_threshold:
            trace.diverged = True
            break
        if t == steps or (callback is not None and callback(t, tm, out)):
            break
        tm.delta -= cfg.eta * (cache.vjp(resid) / (k * nb))
    return trace


def relative_kernel_change(theta_a: np.ndarray, theta_b: np.ndarray) -> float:
    """``|Theta_b - Theta_a|_F / |Theta_a|_F``."""
    return float(np.linalg.norm(theta_b - theta_a) / np.linalg.norm(theta_a))


def kernel_change(model: MlpModel, X: np.ndarray, Y: np.ndarray, eta: float, t_lin: int,
                  t_end: int, measure_X: Optional[np.ndarray] = None) -> float:
    """Relative Frobenius change of the NTK Gram between steps ``t_lin`` and ``t_end``.

    Trains a copy of ``model`` by full-batch gradient descent on ``(X, Y)``;
    the kernel is materialized on ``measure_X`` (default: ``X``).
    """
    if t_end < t_lin or t_lin < 0:
        raise ValueError("need 0 <= t_lin <= t_end")
    measure_X = X if measure_X is None else measure_X
    work = model.copy()
    cfg = OptimizerCfg(eta)
    if t_lin > 0:
        sgd_train(work, X, Y, cfg, steps=t_lin, eig_every=0)
    theta_lin = ntk_dense(work, measure_X)
    if t_end == t_lin:
        return 0.0
    trace = sgd_train(work, X, Y, cfg, steps=t_end - t_lin, eig_every=0)
    if trace.diverged:
        return float("inf")
    return relative_kernel_change(theta_lin, ntk_dense(work, measure_X))
