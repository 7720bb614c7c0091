"""Finite-width fully-connected networks with hand-written forward/reverse mode.

Parameters live in one flat float64 vector ``theta``; per-layer weights and
biases are views into it. Two parameterizations are supported:

* ``standard``: ``W ~ N(0, sigma_w^2 / fan_in)``, ``b ~ N(0, sigma_b^2)``,
  used as-is in the forward pass.
* ``ntk``: ``W, b ~ N(0, 1)`` with forward multipliers ``sigma_w / sqrt(fan_in)``
  and ``sigma_b``.

Loss and kernel use the per-class, per-sample normalization
``L = sum((f - y)^2) / (2 k |B|)`` and ``Theta = J J^T / (k |B|)``, so that
gradient descent on ``L`` moves the outputs by ``-eta * Theta @ residual`` to
first order and ``eta * lambda = 2`` is the linear stability edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import (NoConvergence, SymmetricMatvec, dense_top_eig, fix_sign,
                       make_rng, top_eig_lanczos)
from .trace import TraceRecord, TrainTrace

ACTIVATIONS = ("relu", "tanh", "identity")
PARAMETERIZATIONS = ("standard", "ntk")


class ShapeMismatch(ValueError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_deriv(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        # derivative at 0 taken as 0
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


@dataclass
class MlpModel:
    widths: Tuple[int, ...]
    activation: str = "relu"
    parameterization: str = "ntk"
    sigma_w: float = np.sqrt(2.0)
    sigma_b: float = 0.0
    theta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ShapeMismatch(f"bad layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.theta is None:
            self.theta = np.zeros(self.num_params)
        elif self.theta.shape != (self.num_params,):
            raise ShapeMismatch(f"theta has shape {self.theta.shape}, expected ({self.num_params},)")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def _slices(self):
        offset = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            yield (slice(offset, offset + a * b), (a, b)), slice(offset + a * b, offset + a * b + b)
            offset += a * b + b

    def split(self, vec: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """View a parameter-shaped flat vector as ``[(W, b), ...]``; ``W`` is fan_in x fan_out."""
        if vec.shape != (self.num_params,):
            raise ShapeMismatch(f"vector has shape {vec.shape}, expected ({self.num_params},)")
        return [(vec[ws].reshape(shape), vec[bs]) for (ws, shape), bs in self._slices()]

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return self.split(self.theta)

    def multipliers(self) -> List[Tuple[float, float]]:
        if self.parameterization == "standard":
            return [(1.0, 1.0)] * self.num_layers
        return [(self.sigma_w / np.sqrt(a), self.sigma_b) for a in self.widths[:-1]]

    def copy(self) -> "MlpModel":
        return MlpModel(self.widths, self.activation, self.parameterization,
                        self.sigma_w, self.sigma_b, self.theta.copy())


def init_mlp(rng: np.random.Generator, widths: Sequence[int], activation: str = "relu",
             parameterization: str = "ntk", sigma_w: float = np.sqrt(2.0),
             sigma_b: float = 0.0) -> MlpModel:
    model = MlpModel(tuple(widths), activation, parameterization, sigma_w, sigma_b)
    for (W, b), fan_in in zip(model.layers(), model.widths[:-1]):
        if parameterization == "standard":
            W[...] = rng.standard_normal(W.shape) * (sigma_w / np.sqrt(fan_in))
            b[...] = rng.standard_normal(b.shape) * sigma_b
        else:
            W[...] = rng.standard_normal(W.shape)
            b[...] = rng.standard_normal(b.shape)
    return model


@dataclass
class Batch:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.shape[0] < 1 or self.X.shape[0] != self.Y.shape[0]:
            raise ShapeMismatch(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")

    def __len__(self):
        return self.X.shape[0]


@dataclass
class OptimizerCfg:
    eta: float
    momentum: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")


class _Cache:
    """Activations of one forward pass, reused by JVP/VJP at fixed parameters."""

    def __init__(self, model: MlpModel, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != model.widths[0]:
            raise ShapeMismatch(f"input dim {X.shape[1]} != model input dim {model.widths[0]}")
        self.model = model
        self.layers = model.layers()
        self.mults = model.multipliers()
        self.inputs = []
        self.derivs = []
        h = X
        last = model.num_layers - 1
        for i, ((W, b), (wm, bm)) in enumerate(zip(self.layers, self.mults)):
            self.inputs.append(h)
            z = wm * (h @ W) + bm * b
            if i < last:
                self.derivs.append(_act_deriv(model.activation, z))
                h = _act(model.activation, z)
            else:
                h = z
        self.output = h

    def vjp(self, cot: np.ndarray) -> np.ndarray:
        """``J^T cot`` as a flat parameter vector (no loss normalization)."""
        cot = np.asarray(cot, dtype=np.float64).reshape(self.output.shape)
        grad = np.zeros(self.model.num_params)
        gparts = self.model.split(grad)
        g = cot
        for i in range(self.model.num_layers - 1, -1, -1):
            W = self.layers[i][0]
            wm, bm = self.mults[i]
            dW, db = gparts[i]
            dW[...] = wm * (self.inputs[i].T @ g)
            db[...] = bm * g.sum(axis=0)
            if i > 0:
                g = wm * (g @ W.T) * self.derivs[i - 1]
        return grad

    def jvp(self, tangent: np.ndarray) -> np.ndarray:
        """``J tangent`` as a ``|B| x k`` matrix."""
        tparts = self.model.split(np.asarray(tangent, dtype=np.float64))
        dh = None
        for i, ((W, _), (dW, db), (wm, bm)) in enumerate(zip(self.layers, tparts, self.mults)):
            dz = self.inputs[i] @ dW
            if dh is not None:
                dz += dh @ W
            dz = wm * dz + bm * db
            dh = dz * self.derivs[i] if i < self.model.num_layers - 1 else dz
        return dh


def mlp_forward(model: MlpModel, X: np.ndarray) -> np.ndarray:
    return _Cache(model, X).output


def mlp_loss(model: MlpModel, batch: Batch) -> float:
    out = mlp_forward(model, batch.X)
    if out.shape != batch.Y.shape:
        raise ShapeMismatch(f"outputs {out.shape} vs targets {batch.Y.shape}")
    k, nb = out.shape[1], out.shape[0]
    return float(np.sum((out - batch.Y) ** 2) / (2.0 * k * nb))


def mlp_grad(model: MlpModel, batch: Batch) -> np.ndarray:
    cache = _Cache(model, batch.X)
    if cache.output.shape != batch.Y.shape:
        raise ShapeMismatch(f"outputs {cache.output.shape} vs targets {batch.Y.shape}")
    nb, k = batch.Y.shape
    return cache.vjp(cache.output - batch.Y) / (k * nb)


def mlp_jvp(model: MlpModel, X: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    return _Cache(model, X).jvp(tangent)


def mlp_vjp(model: MlpModel, X: np.ndarray, cot: np.ndarray) -> np.ndarray:
    return _Cache(model, X).vjp(cot)


def ntk_operator(model: MlpModel, X: np.ndarray) -> SymmetricMatvec:
    """Matrix-free normalized NTK Gram on ``X``: one VJP and one JVP per matvec."""
    cache = _Cache(model, X)
    nb, k = cache.output.shape
    scale = 1.0 / (k * nb)

    def apply(w):
        return scale * cache.jvp(cache.vjp(w)).ravel()

    return SymmetricMatvec(nb * k, apply)


def ntk_top_eig(model: MlpModel, X: np.ndarray, tol: float = 1e-9,
                max_iter: Optional[int] = None, seed: int = 0) -> Tuple[float, np.ndarray]:
    """Top eigenpair of the normalized empirical NTK, computed with Lanczos.

    The eigenvector is indexed ``(sample, output)`` in row-major order.
    """
    op = ntk_operator(model, X)
    lam, vec = top_eig_lanczos(op, tol=tol, max_iter=max_iter, rng=make_rng(seed))
    return lam, fix_sign(vec)


def per_sample_jacobian(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Materialized ``(|B| k) x P`` Jacobian, built one sample and one output at a time."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    k = model.out_dim
    rows = []
    for x in X:
        cache = _Cache(model, x[None, :])
        for i in range(k):
            cot = np.zeros((1, k))
            cot[0, i] = 1.0
            rows.append(cache.vjp(cot))
    return np.array(rows)


def ntk_dense(model: MlpModel, X: np.ndarray) -> np.ndarray:
    jac = per_sample_jacobian(model, X)
    nb = np.atleast_2d(X).shape[0]
    return jac @ jac.T / (model.out_dim * nb)


def measure_lambda(model: MlpModel, X: np.ndarray, batches: int = 1, seed: int = 0) -> float:
    """Top NTK eigenvalue averaged over ``batches`` equal contiguous slices of ``X``."""
    parts = np.array_split(np.atleast_2d(X), batches)
    return float(np.mean([ntk_top_eig(model, p, seed=seed)[0] for p in parts]))


def sgd_train(model: MlpModel, X: np.ndarray, Y: np.ndarray, cfg: OptimizerCfg,
              batch_size: Optional[int] = None, steps: int = 100, eig_every: int = 10,
              measure_X: Optional[np.ndarray] = None, div_threshold: float = 1e10,
              seed: int = 0, eig_steps: Sequence[int] = (),
              callback: Optional[Callable[[int, MlpModel, np.ndarray], bool]] = None) -> TrainTrace:
    """Minibatch SGD (in dataset order, no shuffling), updating ``model`` in place.

    Step ``t`` records the loss of the minibatch about to be used and, every
    ``eig_every`` steps (plus any step in ``eig_steps``), the top NTK
    eigenvalue on ``measure_X``. A run whose loss exceeds ``div_threshold``
    or becomes non-finite stops early with ``trace.diverged`` set.

    ``callback(t, model, outputs)`` runs after each record (``outputs`` are the
    minibatch predictions at step ``t``); returning True stops training there.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    n_data = X.shape[0]
    batch_size = n_data if batch_size is None else batch_size
    measure_X = X[: min(256, n_data)] if measure_X is None else measure_X
    eig_steps = set(eig_steps)
    trace = TrainTrace(meta={"eta": cfg.eta, "momentum": cfg.momentum, "l2": cfg.l2,
                             "batch_size": batch_size, "widths": list(model.widths),
                             "activation": model.activation, "seed": seed})
    velocity = np.zeros_like(model.theta)
    for t in range(steps + 1):
        start = (t * batch_size) % n_data
        idx = np.arange(start, start + batch_size) % n_data
        batch = Batch(X[idx], Y[idx])
        cache = _Cache(model, batch.X)
        resid = cache.output - batch.Y
        nb, k = resid.shape
        loss = float(np.sum(resid ** 2) / (2.0 * k * nb))
        lam = None
        want_eig = eig_every > 0 and (t % eig_every == 0 or t == steps)
        if np.isfinite(loss) and loss <= div_threshold and (want_eig or t in eig_steps):
            try:
                lam = ntk_top_eig(model, measure_X, seed=seed)[0]
            except NoConvergence:
                lam = float("nan")
        trace.append(TraceRecord(t, loss, lam))
        if not np.isfinite(loss) or loss > div_threshold:
            trace.diverged = True
            break
        if t == steps or (callback is not None and callback(t, model, cache.output)):
            break
        grad = cache.vjp(resid) / (k * nb)
        if cfg.l2:
            grad = grad + cfg.l2 * model.theta
        if cfg.momentum:
            velocity = cfg.momentum * velocity + grad
            model.theta -= cfg.eta * velocity
        else:
            model.theta -= cfg.eta * grad
    return trace


def accuracy(model: MlpModel, X: np.ndarray, Y: np.ndarray) -> float:
    out = mlp_forward(model, X)
    return float(np.mean(np.argmax(out, axis=1) == np.argmax(Y, axis=1)))


def dead_fraction(model: MlpModel, X: np.ndarray) -> float:
    """Fraction of hidden units whose activation derivative is zero on every probe input."""
    cache = _Cache(model, X)
    if not cache.derivs:
        return 0.0
    dead = [np.all(d == 0, axis=0) for d in cache.derivs]
    return float(np.concatenate(dead).mean())


def relu_simple_model(width: int, eta: float, steps: int, seed: int = 0,
                      sigma_w: float = np.sqrt(2.0)) -> TrainTrace:
    """Two-hidden-layer ReLU chain ``f = u . relu(w . relu(v))`` on the single sample x=1, y=1.

    Records loss, curvature and the dead-unit fraction each step. A collapse to
    ``f = 0`` is a legitimate endpoint and is reported via ``meta['dead_end']``.
    """
    model = init_mlp(make_rng(seed), (1, width, width, 1), "relu", "ntk", sigma_w, 0.0)
    X = np.ones((1, 1))
    Y = np.ones((1, 1))
    trace = TrainTrace(meta={"eta": eta, "width": width, "seed": seed})
    for t in range(steps + 1):
        cache = _Cache(model, X)
        resid = cache.output - Y
        loss = float(0.5 * np.sum(resid ** 2))
        lam = float(np.sum(cache.vjp(np.ones((1, 1))) ** 2))
        dead = float(np.concatenate([np.all(d == 0, axis=0) for d in cache.derivs]).mean())
        trace.append(TraceRecord(t, loss, lam, {"f": float(cache.output[0, 0]), "dead": dead}))
        if not np.isfinite(loss) or loss > 1e10:
            trace.diverged = True
            break
        if t < steps:
            model.theta -= eta * cache.vjp(resid)
    trace.meta["lambda0"] = trace.records[0].lam
    trace.meta["dead_end"] = bool(trace.records[-1].aux["f"] == 0.0)
    return trace
