"""Learning-rate sweeps, max-learning-rate bisection, critical exponents,
physical-time comparisons and the post-catapult linearization comparison.

Learning rates and physical times are given in units of ``lambda0`` by
default: a grid value ``c`` means ``eta = c / lambda0`` and a physical time
``T`` means ``T / c`` steps. This makes different widths, datasets and
architectures directly comparable.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import data as data_mod
from . import linear_model as lin
from . import warmup as wm
from .linearize import kernel_change, linearize_at, train_tangent
from .mlp import (Batch, MlpModel, OptimizerCfg, accuracy, init_mlp, mlp_loss, ntk_top_eig,
                  sgd_train)
from .numerics import fit_loglog_slope, make_rng
from .trace import Phase, PhaseReport, TraceRecord, TrainTrace, classify


class BracketInvalid(ValueError):
    pass


# ---------------------------------------------------------------- model specs

@dataclass
class Prepared:
    """A model at initialization together with its data and measured ``lambda0``."""

    seed: int
    state: Any
    lambda0: float
    data: Any = None
    test: Any = None


@dataclass(frozen=True)
class WarmupSpec:
    n: int = 1000
    reduced: bool = False
    conv_tol: float = 1e-8
    div_threshold: float = 1e10
    lazy_band: float = 0.05

    kind = "warmup"

    def prepare(self, seed: int) -> Prepared:
        params = wm.init_warmup(make_rng(seed), self.n)
        state = params.state() if self.reduced else params
        return Prepared(seed, state, params.lam)

    def run(self, prep: Prepared, eta: float, steps: int, stop_on_converge: bool = True,
            eig_every: int = 1, measure: bool = True) -> Tuple[TrainTrace, PhaseReport]:
        return wm.run_warmup(prep.state, eta, steps, self.conv_tol, self.div_threshold,
                             self.lazy_band, stop_on_converge, seed=prep.seed)

    def advance(self, state, eta: float, steps: int, start_step: int, trace: TrainTrace):
        """Plain steps appended to ``trace``; returns the new state (None on divergence)."""
        stepper = wm.step_params if isinstance(state, wm.WarmupParams) else wm.step_reduced
        for t in range(start_step + 1, start_step + steps + 1):
            try:
                state = stepper(state, eta)
            except wm.Overflow:
                trace.diverged = True
                return None
            st = state.state() if isinstance(state, wm.WarmupParams) else state
            trace.append(TraceRecord(t, st.loss, st.lam))
        return state

    def loss(self, prep: Prepared, state) -> float:
        st = state.state() if isinstance(state, wm.WarmupParams) else state
        return st.loss


@dataclass(frozen=True)
class LinearSpec:
    n: int = 1024
    m: int = 8
    d: int = 16
    conv_tol: float = 1e-8
    div_threshold: float = 1e10
    lazy_band: float = 0.05

    kind = "linear"

    def prepare(self, seed: int) -> Prepared:
        rng = make_rng(seed)
        params = lin.init_linear(rng, self.n, self.d)
        data = lin.make_regression(rng, self.m, self.d)
        lam0 = lin.top_kernel_eig(lin.forward(params, data).theta)[0]
        return Prepared(seed, params, lam0, data)

    def run(self, prep: Prepared, eta: float, steps: int, stop_on_converge: bool = True,
            eig_every: int = 1, measure: bool = True) -> Tuple[TrainTrace, PhaseReport]:
        return lin.run_linear(prep.state, prep.data, eta, steps, self.conv_tol,
                              self.div_threshold, self.lazy_band, stop_on_converge, seed=prep.seed)

    def advance(self, state, eta: float, steps: int, start_step: int, trace: TrainTrace, data=None):
        for t in range(start_step + 1, start_step + steps + 1):
            try:
                state = lin.step_params_full(state, data, eta)
            except lin.Overflow:
                trace.diverged = True
                return None
            trace.append(TraceRecord(t, lin.forward(state, data).loss))
        return state

    def loss(self, prep: Prepared, state) -> float:
        return lin.forward(state, prep.data).loss


@lru_cache(maxsize=8)
def _dataset(name: str, n_train: int, data_seed: int, classes: Optional[Tuple[int, ...]],
             dim: int, center: bool = False):
    train, test, source = _load(name, n_train, data_seed, classes, dim)
    if center:
        train, test = data_mod.center_features(train, test)
    return train, test, source


def _load(name, n_train, data_seed, classes, dim):
    if name == "gaussian":
        k = len(classes) if classes else 10
        rng = make_rng(data_seed)
        full = data_mod.gen_gaussian_mixture(rng, 2 * n_train, dim, k)
        return full.subset(slice(0, n_train)), full.subset(slice(n_train, None)), name
    if name == "digits":
        tr, te = data_mod.load_digits_split(n_train, data_seed, classes)
        return tr, te, "sklearn-digits"
    if name == "auto":
        return data_mod.image_classification_split(n_train, data_seed, None, classes)
    if name == "mnist":
        paths = data_mod.find_mnist()
        if paths is None:
            raise FileNotFoundError(f"MNIST IDX files not found; set ${data_mod.DATA_DIR_ENV}")
        return data_mod.image_classification_split(n_train, data_seed, None, classes)
    raise ValueError(f"unknown dataset {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected net trained by (full-batch by default) gradient descent."""

    hidden: Tuple[int, ...] = (512, 512, 512)
    activation: str = "relu"
    parameterization: str = "ntk"
    sigma_w: float = math.sqrt(2.0)
    sigma_b: float = 0.0
    dataset: str = "auto"
    n_train: int = 512
    data_seed: int = 0
    classes: Optional[Tuple[int, ...]] = None
    gaussian_dim: int = 784
    center: bool = False
    batch_size: Optional[int] = None
    measure_size: int = 256
    div_threshold: float = 1e10
    lazy_band: float = 0.1

    kind = "mlp"

    def load(self):
        return _dataset(self.dataset, self.n_train, self.data_seed, self.classes, self.gaussian_dim,
                        self.center)

    def build(self, seed: int, in_dim: int, out_dim: int) -> MlpModel:
        widths = (in_dim,) + tuple(self.hidden) + (out_dim,)
        return init_mlp(make_rng(seed), widths, self.activation, self.parameterization,
                        self.sigma_w, self.sigma_b)

    def prepare(self, seed: int) -> Prepared:
        train, test, _ = self.load()
        model = self.build(seed, train.X.shape[1], train.Y.shape[1])
        lam0 = ntk_top_eig(model, train.X[: self.measure_size], seed=seed)[0]
        return Prepared(seed, model, lam0, train, test)

    def run(self, prep: Prepared, eta: float, steps: int, stop_on_converge: bool = True,
            eig_every: int = 10, measure: bool = True,
            stop_at_train_acc_1: bool = False) -> Tuple[TrainTrace, PhaseReport]:
        """Train a copy of the initial model. ``measure=False`` skips the final
        curvature and accuracy evaluation (used by divergence probes).
        """
        model = prep.state.copy()
        train, test = prep.data, prep.test
        callback = None
        if stop_at_train_acc_1:
            labels = np.argmax(train.Y, axis=1)

            def callback(t, _model, out):
                return bool(np.all(np.argmax(out, axis=1) == labels))
        trace = sgd_train(model, train.X, train.Y, OptimizerCfg(eta), self.batch_size, steps,
                          eig_every, train.X[: self.measure_size], self.div_threshold,
                          seed=prep.seed, callback=callback)
        trace.meta.update({"model": "mlp", "lambda0": prep.lambda0, "seed": prep.seed})
        if measure and not trace.diverged:
            trace.meta["train_acc"] = accuracy(model, train.X, train.Y)
            trace.meta["test_acc"] = accuracy(model, test.X, test.Y)
            if trace.records[-1].lam is None:
                trace.records[-1].lam = ntk_top_eig(model, train.X[: self.measure_size],
                                                    seed=prep.seed)[0]
        report = classify(trace, eta, prep.lambda0, None, self.div_threshold, self.lazy_band,
                          require_monotone=False)
        return trace, report

    def advance(self, state: MlpModel, eta: float, steps: int, start_step: int,
                trace: TrainTrace, data=None):
        sub = sgd_train(state, data.X, data.Y, OptimizerCfg(eta), self.batch_size, steps,
                        eig_every=0, div_threshold=self.div_threshold)
        for rec in sub.records[1:]:
            trace.append(TraceRecord(start_step + rec.step, rec.loss))
        if sub.diverged:
            trace.diverged = True
            return None
        return state

    def loss(self, prep: Prepared, state: MlpModel) -> float:
        return mlp_loss(state, Batch(prep.data.X, prep.data.Y))


ModelSpec = Union[WarmupSpec, LinearSpec, MlpSpec]


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class StopRule:
    """``steps``: fixed step count; ``physical_time``: ``ceil(T / eta)`` steps
    (``T / (eta lambda0)`` in lambda0 units); ``train_acc_1``: MLP runs stop when
    every training sample is classified correctly, ``value`` caps the steps.
    """

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("steps", "physical_time", "train_acc_1"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if not self.value > 0:
            raise ValueError("stop rule value must be positive")

    def steps_for(self, eta_units: float) -> int:
        if self.kind == "physical_time":
            return max(1, physical_steps(self.value, eta_units))
        return int(self.value)


def physical_steps(t_phys: float, eta: float) -> int:
    """``ceil(t_phys / eta)``, guarded against the ratio landing a hair above an integer."""
    return int(math.ceil(t_phys / eta - 1e-9))


@dataclass(frozen=True)
class Decay:
    t_phys: float
    eta_final: float
    extra_steps: int


@dataclass(frozen=True)
class SweepCfg:
    model: ModelSpec
    eta_grid: Tuple[float, ...]
    stop: StopRule
    seeds: Tuple[int, ...] = (0,)
    lambda0_units: bool = True
    stop_on_converge: bool = True
    eig_every: Optional[int] = None
    decay: Optional[Decay] = None

    def __post_init__(self):
        grid = tuple(float(x) for x in self.eta_grid)
        if not grid or any(x <= 0 for x in grid):
            raise ValueError("eta_grid must be a nonempty list of positive values")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("eta_grid must be strictly increasing")
        object.__setattr__(self, "eta_grid", grid)
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.stop.kind == "train_acc_1" and not isinstance(self.model, MlpSpec):
            raise ValueError("train_acc_1 applies to classifiers only")


def log_grid(lo: float, hi: float, num: int) -> Tuple[float, ...]:
    return tuple(float(x) for x in np.geomspace(lo, hi, num))


@dataclass
class SweepResult:
    report: PhaseReport
    trace: Optional[TrainTrace] = None


def _eig_every(cfg: SweepCfg) -> int:
    if cfg.eig_every is not None:
        return cfg.eig_every
    return 10 if isinstance(cfg.model, MlpSpec) else 1


def _run_point(cfg: SweepCfg, prep: Prepared, g: float) -> SweepResult:
    eta = g / prep.lambda0 if cfg.lambda0_units else g
    try:
        steps = cfg.stop.steps_for(g)
        kwargs = {}
        if cfg.stop.kind == "train_acc_1":
            kwargs["stop_at_train_acc_1"] = True
        trace, report = cfg.model.run(prep, eta, steps, cfg.stop_on_converge, _eig_every(cfg),
                                      **kwargs)
        return SweepResult(report, trace)
    except Exception as exc:  # one bad grid point must not sink the sweep
        report = PhaseReport(eta, None, prep.lambda0, None, None, False, math.nan, math.nan,
                             seed=prep.seed, note=f"error: {type(exc).__name__}: {exc}")
        return SweepResult(report, None)


def _run_task(args):
    return _run_point(*args)


def lr_sweep(cfg: SweepCfg, jobs: int = 1, keep_traces: bool = True) -> List[SweepResult]:
    """One report per ``(eta, seed)``, ordered by ``eta`` then seed.

    ``lambda0`` is measured once per seed and shared by every learning rate.
    """
    preps = [cfg.model.prepare(s) for s in cfg.seeds]
    tasks = [(cfg, prep, g) for g in cfg.eta_grid for prep in preps]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_point(*t) for t in tasks]
    if not keep_traces:
        for r in results:
            r.trace = None
    return results


# ---------------------------------------------------------------- max learning rate

@dataclass
class MaxLrResult:
    eta_max: float
    lambda0: float
    lo: float
    hi: float
    probes: List[Tuple[float, bool]] = field(default_factory=list)

    @property
    def c_act(self) -> float:
        return self.eta_max * self.lambda0

    def as_dict(self) -> Dict[str, Any]:
        return {"eta_max": self.eta_max, "lambda0": self.lambda0, "c_act": self.c_act,
                "bracket": [self.lo, self.hi],
                "probes": [{"eta_lambda0": c, "trainable": ok} for c, ok in self.probes]}


def max_lr_bisect(spec: ModelSpec, probe_steps: int, bracket: Tuple[float, float] = (1.0, 20.0),
                  seed: int = 0, rel_tol: float = 0.02) -> MaxLrResult:
    """Bisect (geometrically, in ``eta lambda0`` units) for the divergence boundary.

    A learning rate is trainable when ``probe_steps`` steps finish without
    divergence. The bracket must be trainable at its low end and divergent at
    its high end. The result is the geometric midpoint of the final bracket,
    whose endpoints are within ``rel_tol`` of each other.
    """
    lo, hi = bracket
    if not 0 < lo < hi:
        raise BracketInvalid(f"bracket {bracket} is not an increasing positive pair")
    prep = spec.prepare(seed)
    probes = []

    def trainable(c):
        trace, _ = spec.run(prep, c / prep.lambda0, probe_steps, stop_on_converge=True, eig_every=0,
                            measure=False)
        ok = not trace.diverged
        probes.append((c, ok))
        return ok

    if not trainable(lo):
        raise BracketInvalid(f"eta*lambda0 = {lo} already diverges")
    if trainable(hi):
        raise BracketInvalid(f"eta*lambda0 = {hi} still trains")
    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        if trainable(mid):
            lo = mid
        else:
            hi = mid
    return MaxLrResult(math.sqrt(lo * hi) / prep.lambda0, prep.lambda0, lo, hi, probes)


# ---------------------------------------------------------------- critical exponent

@dataclass
class CritExpResult:
    side: str
    slope: float
    intercept: float
    points: List[Tuple[float, int]]
    excluded: List[float]

    def as_dict(self) -> Dict[str, Any]:
        return {"side": self.side, "slope": self.slope, "intercept": self.intercept,
                "points": [{"eps": e, "t_star": t} for e, t in self.points],
                "excluded": self.excluded}


def convergence_time(start, eta: float, conv_tol: float, max_steps: int) -> Optional[int]:
    """Steps until the warmup loss first drops below ``conv_tol``; None if never."""
    stepper = wm.step_params if isinstance(start, wm.WarmupParams) else wm.step_reduced
    cur = start
    for t in range(max_steps + 1):
        st = cur.state() if isinstance(cur, wm.WarmupParams) else cur
        if st.loss < conv_tol:
            return t
        if t == max_steps:
            return None
        try:
            cur = stepper(cur, eta)
        except wm.Overflow:
            return None
    return None


def critical_exponent(n: int = 16000, eps_grid: Sequence[float] = (0.04, 0.08, 0.16, 0.32),
                      side: str = "below", seed: int = 0, conv_tol: float = 1e-8,
                      max_steps: int = 1_000_000, reduced: bool = False) -> CritExpResult:
    """Fit ``log t*`` against ``log eps`` for ``eta lambda0 = 2 - eps`` (below) or ``2 + eps`` (above)."""
    if side not in ("below", "above"):
        raise ValueError("side must be 'below' or 'above'")
    params = wm.init_warmup(make_rng(seed), n)
    start = params.state() if reduced else params
    lam0 = params.lam
    sign = -1.0 if side == "below" else 1.0
    points, excluded = [], []
    for eps in eps_grid:
        t_star = convergence_time(start, (2.0 + sign * eps) / lam0, conv_tol, max_steps)
        if t_star is None or t_star == 0:
            excluded.append(float(eps))
        else:
            points.append((float(eps), t_star))
    slope, intercept = fit_loglog_slope(points)
    return CritExpResult(side, slope, intercept, points, excluded)


# ---------------------------------------------------------------- physical time

@dataclass
class PhysRow:
    eta: float
    eta_lambda0: float
    steps: int
    loss_final: float
    diverged: bool
    train_acc: Optional[float] = None
    test_acc: Optional[float] = None
    trace: Optional[TrainTrace] = None

    def as_dict(self) -> Dict[str, Any]:
        return {"eta": self.eta, "eta_lambda0": self.eta_lambda0, "steps": self.steps,
                "loss_final": self.loss_final, "diverged": self.diverged,
                "train_acc": self.train_acc, "test_acc": self.test_acc}


def physical_time_compare(spec: ModelSpec, eta_grid: Sequence[float], decay: Decay,
                          seed: int = 0, lambda0_units: bool = True) -> List[PhysRow]:
    """Each learning rate runs ``ceil(t_phys / eta)`` steps, then ``extra_steps``
    at ``eta_final`` (both ``t_phys`` and ``eta_final`` in lambda0 units when
    ``lambda0_units``). Diverged runs are reported, not raised.
    """
    prep = spec.prepare(seed)
    scale = prep.lambda0 if lambda0_units else 1.0
    rows = []
    for g in eta_grid:
        eta = g / scale
        steps = physical_steps(decay.t_phys, g)
        state = prep.state.copy() if isinstance(spec, MlpSpec) else prep.state
        trace = TrainTrace(meta={"eta": eta, "lambda0": prep.lambda0, "seed": seed})
        trace.append(TraceRecord(0, spec.loss(prep, state)))
        state = spec.advance(state, eta, steps, 0, trace, **_data_kw(spec, prep))
        if state is not None and decay.extra_steps > 0:
            state = spec.advance(state, decay.eta_final / scale, decay.extra_steps, steps, trace,
                                 **_data_kw(spec, prep))
        row = PhysRow(eta, eta * prep.lambda0, steps, trace.records[-1].loss, trace.diverged,
                      trace=trace)
        if isinstance(spec, MlpSpec) and state is not None:
            row.train_acc = accuracy(state, prep.data.X, prep.data.Y)
            row.test_acc = accuracy(state, prep.test.X, prep.test.Y)
        rows.append(row)
    return rows


def _data_kw(spec, prep):
    return {} if isinstance(spec, WarmupSpec) else {"data": prep.data}


# ---------------------------------------------------------------- linearization

@dataclass
class LinCompare:
    eta_lambda0: float
    lambda0: float
    horizon: int
    reached_train_acc_1: bool
    nonlinear_loss: float
    nonlinear_test_acc: float
    linear_loss: float
    linear_test_acc: float
    linear_diverged: bool
    linear0_diverged: bool
    linear0_steps: int

    @property
    def loss_rel_gap(self) -> float:
        return abs(self.linear_loss - self.nonlinear_loss) / self.nonlinear_loss

    @property
    def test_acc_gap(self) -> float:
        return abs(self.linear_test_acc - self.nonlinear_test_acc)

    def as_dict(self) -> Dict[str, Any]:
        out = dict(self.__dict__)
        out.update({"loss_rel_gap": self.loss_rel_gap, "test_acc_gap": self.test_acc_gap})
        return out


def linearization_compare(spec: MlpSpec, eta_lambda0: float, seed: int = 0, t_lin: int = 10,
                          max_steps: int = 5000) -> LinCompare:
    """Nonlinear training versus tangent models anchored at step 0 and ``t_lin``.

    The nonlinear model trains (full batch) until training accuracy 1 or
    ``max_steps``; that step count is the common horizon. The step-``t_lin``
    tangent model takes over from the nonlinear trajectory at ``t_lin`` and
    runs to the same horizon. The step-0 tangent model runs up to ``max_steps``
    or until it diverges.
    """
    prep = spec.prepare(seed)
    train, test = prep.data, prep.test
    eta = eta_lambda0 / prep.lambda0
    cfg = OptimizerCfg(eta)
    labels = np.argmax(train.Y, axis=1)

    def all_correct(t, _m, out):
        return bool(np.all(np.argmax(out, axis=1) == labels))

    model = prep.state.copy()
    sgd_train(model, train.X, train.Y, cfg, spec.batch_size, t_lin, eig_every=0)
    anchor = model.copy()
    rest = sgd_train(model, train.X, train.Y, cfg, spec.batch_size, max_steps - t_lin,
                     eig_every=0, callback=all_correct)
    horizon = t_lin + rest.records[-1].step
    reached = not rest.diverged and accuracy(model, train.X, train.Y) == 1.0
    nl_loss = mlp_loss(model, Batch(train.X, train.Y))
    nl_test = accuracy(model, test.X, test.Y)

    tm = linearize_at(anchor, {"train": train.X, "test": test.X})
    lin_trace = train_tangent(tm, train.X, train.Y, eta, horizon - t_lin)
    lin_loss = lin_trace.records[-1].loss
    lin_test = float(np.mean(np.argmax(tm.predict("test"), axis=1) == np.argmax(test.Y, axis=1)))

    # the step-0 tangent runs the full step budget: with eta above its
    # stability edge it diverges, but possibly later than the horizon
    tm0 = linearize_at(prep.state, {"train": train.X})
    lin0_trace = train_tangent(tm0, train.X, train.Y, eta, max_steps)
    return LinCompare(eta_lambda0, prep.lambda0, horizon, reached, nl_loss, nl_test, lin_loss,
                      lin_test, lin_trace.diverged, lin0_trace.diverged, lin0_trace.records[-1].step)


def phase_sequence_ok(reports: Sequence[PhaseReport]) -> bool:
    """No divergent run below a lazy one, when sorted by learning rate."""
    order = sorted(reports, key=lambda r: r.eta)
    seen_div = False
    for r in order:
        if r.phase == Phase.DIVERGENT:
            seen_div = True
        elif r.phase == Phase.LAZY and seen_div:
            return False
    return True


def kernel_change_by_width(widths: Sequence[int], seeds: Sequence[int] = (0, 1, 2), t_lin: int = 50,
                           t_end: int = 1000, eta_lambda0: float = 1.0, n_train: int = 200,
                           classes: Tuple[int, int] = (0, 1), dataset: str = "auto",
                           data_seed: int = 0, center: bool = False
                           ) -> List[Tuple[int, int, float, float]]:
    """NTK change between ``t_lin`` and ``t_end`` for 1-hidden-layer ReLU nets of several widths.

    Two-class task with scalar ``+-1`` targets; returns ``(width, seed, lambda0, change)`` rows.
    """
    if dataset == "gaussian":
        raise ValueError("kernel scan needs an image dataset")
    train, _, _ = _dataset(dataset, n_train, data_seed, tuple(classes), 0, center)
    X = train.X
    Y = (2.0 * train.Y[:, 1:2] - 1.0)
    rows = []
    for w in widths:
        for s in seeds:
            model = init_mlp(make_rng(s), (X.shape[1], int(w), 1), "relu", "ntk")
            lam0 = ntk_top_eig(model, X, seed=s)[0]
            rows.append((int(w), int(s), lam0,
                         kernel_change(model, X, Y, eta_lambda0 / lam0, t_lin, t_end)))
    return rows
