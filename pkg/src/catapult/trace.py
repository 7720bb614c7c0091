"""Per-step training records, phase reports, and their serialization.

Machine-readable trace files store every float as a C99 hex-float string
(``float.hex``) so a write/read cycle is bit-exact. Human-facing CSV uses 17
significant digits, which also round-trips IEEE doubles.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

SCHEMA_VERSION = "catapult-trace/1"


class Phase(str, enum.Enum):
    LAZY = "lazy"
    CATAPULT = "catapult"
    DIVERGENT = "divergent"


class BeforeFirstRecord(ValueError):
    pass


@dataclass
class TraceRecord:
    step: int
    loss: float
    lam: Optional[float] = None
    aux: Dict[str, float] = field(default_factory=dict)


@dataclass
class TrainTrace:
    records: List[TraceRecord] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)
    diverged: bool = False

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"step {rec.step} does not increase past {self.records[-1].step}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def steps(self) -> List[int]:
        return [r.step for r in self.records]

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def lambdas(self) -> List[Optional[float]]:
        return [r.lam for r in self.records]

    def last_lambda(self) -> Optional[float]:
        for rec in reversed(self.records):
            if rec.lam is not None:
                return rec.lam
        return None

    def to_json(self) -> str:
        return json.dumps({
            "schema": SCHEMA_VERSION,
            "meta": _hexify(self.meta),
            "diverged": self.diverged,
            "records": [[r.step, _hex(r.loss), _hex(r.lam), _hexify(r.aux)] for r in self.records],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainTrace":
        obj = json.loads(text)
        if obj.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported trace schema {obj.get('schema')!r}")
        records = [TraceRecord(step, _unhex(loss), _unhex(lam), _unhexify(aux))
                   for step, loss, lam, aux in obj["records"]]
        return cls(records, _unhexify(obj["meta"]), obj["diverged"])


def _hex(x):
    if x is None:
        return None
    return float(x).hex()


def _unhex(s):
    return None if s is None else float.fromhex(s)


def _hexify(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        return {"hex": obj.hex()}
    if isinstance(obj, dict):
        return {k: _hexify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_hexify(v) for v in obj]
    if hasattr(obj, "item"):
        return _hexify(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _unhexify(obj):
    if isinstance(obj, dict):
        if set(obj) == {"hex"}:
            return float.fromhex(obj["hex"])
        return {k: _unhexify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unhexify(v) for v in obj]
    return obj


def fmt_float(x) -> str:
    """17-significant-digit rendering used in CSV output; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


@dataclass
class ReducedPoint:
    lambda_at: Optional[float]
    loss_at: float
    step: int
    truncated: bool


def trace_reduce(trace: TrainTrace, eta: float, at_physical_time: float) -> ReducedPoint:
    """Values at the last recorded step with ``step * eta <= at_physical_time``.

    ``lambda_at`` comes from the last record at or before that step that
    carries a curvature measurement. If the trace ends before the requested
    time, the final record is returned with ``truncated=True``.
    """
    if not trace.records:
        raise BeforeFirstRecord("empty trace")
    if trace.records[0].step * eta > at_physical_time:
        raise BeforeFirstRecord(f"first record is after physical time {at_physical_time}")
    chosen = None
    lam = None
    for rec in trace.records:
        if rec.step * eta > at_physical_time:
            break
        chosen = rec
        if rec.lam is not None:
            lam = rec.lam
    last = trace.records[-1]
    # a record past the target means the trace covered the requested time
    truncated = chosen is last and (eta <= 0 or (last.step + 1) * eta <= at_physical_time)
    return ReducedPoint(lam, chosen.loss, chosen.step, truncated)


@dataclass
class PhaseReport:
    eta: float
    phase: Optional[Phase]
    lambda0: float
    lambda_final: Optional[float]
    t_star: Optional[int]
    diverged: bool
    loss_final: float
    peak_loss_ratio: float
    seed: Optional[int] = None
    note: str = ""

    @property
    def eta_lambda0(self) -> float:
        return self.eta * self.lambda0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "eta": self.eta,
            "eta_lambda0": self.eta_lambda0,
            "phase": self.phase.value if self.phase is not None else "unclassified",
            "lambda0": self.lambda0,
            "lambda_final": self.lambda_final,
            "t_star": self.t_star,
            "peak_loss_ratio": self.peak_loss_ratio,
            "loss_final": self.loss_final,
            "diverged": self.diverged,
            "seed": self.seed,
            "note": self.note,
        }


def classify(trace: TrainTrace, eta: float, lambda0: float, conv_tol: Optional[float],
             div_threshold: float, lazy_band: float = 0.05,
             rise_margin: float = 1.01, require_monotone: bool = True) -> PhaseReport:
    """Assign a phase to a finished run.

    Divergent: loss went above ``div_threshold`` (or the run overflowed).
    Lazy: loss decreased monotonically (with ``require_monotone=False`` it
    need only stay under ``rise_margin`` times its initial value), ended
    below ``conv_tol``, and the final curvature is within ``lazy_band`` of
    ``lambda0``.
    Catapult: loss exceeded ``rise_margin`` times its initial value at some
    step, then ended below ``conv_tol`` with ``lambda_final < 2 / eta``.
    Anything else is left unclassified (``phase=None``) with a note.

    ``conv_tol=None`` drops the convergence requirement (fixed-budget runs of
    networks that are not trained to zero loss); ``t_star`` is then None.
    """
    losses = trace.losses
    loss0 = losses[0]
    finite = [x for x in losses if math.isfinite(x)]
    peak = max(finite) if finite else math.inf
    peak_ratio = peak / loss0 if loss0 > 0 else (1.0 if peak == 0 else math.inf)
    lam_final = trace.last_lambda()
    t_star = None
    if conv_tol is not None:
        t_star = next((r.step for r in trace.records if r.loss < conv_tol), None)
    diverged = trace.diverged or any(not math.isfinite(x) or x > div_threshold for x in losses)
    report = PhaseReport(eta, None, lambda0, lam_final, t_star, diverged, losses[-1], peak_ratio,
                         seed=trace.meta.get("seed"))
    if diverged:
        report.phase = Phase.DIVERGENT
        return report
    converged = conv_tol is None or losses[-1] < conv_tol
    rose = any(x > rise_margin * loss0 for x in losses)
    monotone = all(b <= a for a, b in zip(losses, losses[1:])) or not require_monotone
    if converged and not rose and monotone and lam_final is not None \
            and abs(lam_final - lambda0) < lazy_band * lambda0:
        report.phase = Phase.LAZY
    elif converged and rose and lam_final is not None and eta * lam_final < 2.0:
        report.phase = Phase.CATAPULT
    else:
        report.note = ("did not converge within the step budget" if not converged
                       else "converged but matched no phase criterion")
    return report
