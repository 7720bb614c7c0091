"""Command-line front end.

Every subcommand writes its outputs next to ``--out PREFIX``: a CSV table
(``PREFIX.csv``) and/or a JSON report (``PREFIX.json``). CSV files begin with
``#`` comment lines carrying the schema version and the full run
configuration; JSON reports carry the same under ``schema`` and ``config``.
Files are written atomically. A one-line JSON summary goes to stdout.

Exit codes: 0 success, 2 usage or configuration error, 3 the run diverged
(outputs are still written), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import experiments as ex
from . import warmup as wm
from .trace import SCHEMA_VERSION, Phase, fmt_float

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

WARMUP_COLUMNS = ("step", "loss", "lambda", "eta_lambda", "f")
SWEEP_COLUMNS = ("eta", "eta_lambda0", "phase", "lambda0", "lambda_final", "t_star",
                 "peak_loss_ratio", "loss_final", "diverged")
SURFACE_COLUMNS = ("a", "b", "loss", "lambda")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    params: Dict[str, Any]

    def to_json(self) -> str:
        return json.dumps({"subcommand": self.subcommand, "params": self.params}, sort_keys=True)


def _run_config(args: argparse.Namespace) -> RunConfig:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    return RunConfig(args.command, params)


# ---------------------------------------------------------------- output helpers

def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return fmt_float(x)
    if isinstance(x, Phase):
        return x.value
    return str(x)


def write_csv(path: str, cfg: RunConfig, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(f"# schema: {SCHEMA_VERSION}\n")
    buf.write(f"# config: {cfg.to_json()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(x) for x in row])
    _atomic_write(path, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Phase):
        return obj.value
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path: str, cfg: RunConfig, payload: Dict[str, Any]) -> None:
    doc = {"schema": SCHEMA_VERSION, "config": json.loads(cfg.to_json())}
    doc.update(payload)
    _atomic_write(path, json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n")


def _summary(command: str, status: str, outputs: List[str], **extra) -> None:
    line = {"command": command, "status": status, "outputs": outputs}
    line.update(extra)
    print(json.dumps(_jsonable(line), sort_keys=True))


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------- model flags

def _add_model_flags(p: argparse.ArgumentParser, default_model: str = "warmup",
                     default_hidden: str = "512,512,512", default_n_train: Optional[int] = 512) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=("warmup", "linear", "mlp"), default=default_model)
    g.add_argument("--n", type=int, default=1000, help="width of the warmup/linear model")
    g.add_argument("--m", type=int, default=8, help="samples for the linear model")
    g.add_argument("--d", type=int, default=16, help="input dim for the linear model")
    g.add_argument("--reduced", action="store_true", help="warmup: step the (f, lambda) recursion")
    g.add_argument("--conv-tol", type=float, default=1e-8)
    g.add_argument("--hidden", type=_int_list, default=_int_list(default_hidden))
    g.add_argument("--activation", choices=("relu", "tanh", "identity"), default="relu")
    g.add_argument("--param", choices=("ntk", "standard"), default="ntk")
    g.add_argument("--sigma-w", type=float, default=math.sqrt(2.0))
    g.add_argument("--sigma-b", type=float, default=0.0)
    g.add_argument("--dataset", choices=("auto", "mnist", "digits", "gaussian"), default="auto",
                   help="auto: MNIST from $CATAPULT_DATA_DIR when present, else bundled digits")
    g.add_argument("--n-train", type=int, default=default_n_train)
    g.add_argument("--classes", type=_int_list, default=None)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--center", action="store_true", help="subtract the training feature mean")
    g.add_argument("--batch-size", type=int, default=None)


def _spec(args) -> ex.ModelSpec:
    if args.model == "warmup":
        if args.n < 1:
            raise ConfigError("--n must be >= 1")
        return ex.WarmupSpec(args.n, args.reduced, args.conv_tol)
    if args.model == "linear":
        if min(args.n, args.m, args.d) < 1:
            raise ConfigError("--n, --m and --d must be >= 1")
        return ex.LinearSpec(args.n, args.m, args.d, args.conv_tol)
    if not args.hidden or min(args.hidden) < 1:
        raise ConfigError("--hidden needs positive widths")
    return ex.MlpSpec(tuple(args.hidden), args.activation, args.param, args.sigma_w, args.sigma_b,
                      args.dataset, args.n_train, args.data_seed,
                      tuple(args.classes) if args.classes else None, center=args.center,
                      batch_size=args.batch_size)


def _eta(args, lambda0: float) -> float:
    if (args.eta is None) == (args.eta_lambda0 is None):
        raise ConfigError("give exactly one of --eta and --eta-lambda0")
    eta = args.eta if args.eta is not None else args.eta_lambda0 / lambda0
    if eta < 0:
        raise ConfigError("learning rate must be nonnegative")
    return eta


def _add_eta(p):
    p.add_argument("--eta", type=float, default=None, help="learning rate")
    p.add_argument("--eta-lambda0", type=float, default=None,
                   help="learning rate in units of 1/lambda0")


# ---------------------------------------------------------------- subcommands

def cmd_warmup(args, cfg: RunConfig) -> int:
    if args.n < 1 or args.steps < 1:
        raise ConfigError("--n and --steps must be >= 1")
    params = wm.init_warmup(ex.make_rng(args.seed), args.n)
    eta = _eta(args, params.lam)
    start = params.state() if args.reduced else params
    trace, report = wm.run_warmup(start, eta, args.steps, args.conv_tol, stop_on_converge=not args.no_stop,
                                  seed=args.seed)
    rows = [(r.step, r.loss, r.lam, eta * r.lam, r.aux["f"]) for r in trace.records]
    out_csv, out_json = args.out + ".csv", args.out + ".json"
    write_csv(out_csv, cfg, WARMUP_COLUMNS, rows)
    write_json(out_json, cfg, {"report": report.as_dict()})
    status = "diverged" if report.phase == Phase.DIVERGENT else "ok"
    _summary("warmup", status, [out_csv, out_json], phase=report.as_dict()["phase"],
             eta_lambda0=report.eta_lambda0)
    return EXIT_DIVERGED if status == "diverged" else EXIT_OK


def _grid(args) -> tuple:
    if args.grid is not None:
        return tuple(args.grid)
    lo, hi, num = args.grid_lin if args.grid_lin else args.grid_log
    num = int(num)
    if num < 1:
        raise ConfigError("grid needs at least one point")
    if args.grid_lin:
        return tuple(float(x) for x in np.linspace(lo, hi, num))
    return ex.log_grid(lo, hi, num)


def cmd_sweep(args, cfg: RunConfig) -> int:
    spec = _spec(args)
    stop_value = args.stop_value
    if stop_value is None:
        stop_value = {"steps": 10000, "physical_time": 80.0, "train_acc_1": 5000}[args.stop]
    sweep = ex.SweepCfg(spec, _grid(args), ex.StopRule(args.stop, stop_value), tuple(args.seeds),
                        args.units == "lambda0", eig_every=args.eig_every)
    results = ex.lr_sweep(sweep, jobs=args.jobs)
    reports = [r.report for r in results]
    rows = [(r.eta, r.eta_lambda0, r.phase.value if r.phase else "unclassified", r.lambda0,
             r.lambda_final, r.t_star, r.peak_loss_ratio, r.loss_final, r.diverged)
            for r in reports]
    out_csv, out_json = args.out + ".csv", args.out + ".json"
    write_csv(out_csv, cfg, SWEEP_COLUMNS, rows)
    payload = {"reports": [r.as_dict() for r in reports]}
    if args.reduce_at is not None:
        from .trace import trace_reduce
        payload["reduced"] = []
        for r in results:
            if r.trace is None:
                payload["reduced"].append(None)
                continue
            t_phys = args.reduce_at / r.report.lambda0 if args.units == "lambda0" else args.reduce_at
            red = trace_reduce(r.trace, r.report.eta, t_phys)
            payload["reduced"].append(dict(red.__dict__))
    write_json(out_json, cfg, payload)
    _summary("sweep", "ok", [out_csv, out_json], runs=len(reports),
             phases=[r.as_dict()["phase"] for r in reports])
    return EXIT_OK


def cmd_critexp(args, cfg: RunConfig) -> int:
    if any(e <= 0 for e in args.eps):
        raise ConfigError("--eps values must be positive")
    sides = ("below", "above") if args.side == "both" else (args.side,)
    results = [ex.critical_exponent(args.n, args.eps, s, args.seed, args.conv_tol, args.max_steps,
                                    args.reduced) for s in sides]
    rows = [(r.side, eps, t) for r in results for eps, t in r.points]
    out_csv, out_json = args.out + ".csv", args.out + ".json"
    write_csv(out_csv, cfg, ("side", "eps", "t_star"), rows)
    payload = {"results": [r.as_dict() for r in results]}
    payload["slope"] = {r.side: r.slope for r in results}
    write_json(out_json, cfg, payload)
    _summary("critexp", "ok", [out_csv, out_json], slope=payload["slope"])
    return EXIT_OK


def cmd_maxlr(args, cfg: RunConfig) -> int:
    spec = _spec(args)
    lo, hi = args.bracket
    res = ex.max_lr_bisect(spec, args.probe_steps, (lo, hi), args.seed, args.rel_tol)
    out_json = args.out + ".json"
    write_json(out_json, cfg, {"result": res.as_dict()})
    _summary("maxlr", "ok", [out_json], c_act=res.c_act)
    return EXIT_OK


def cmd_mlp(args, cfg: RunConfig) -> int:
    args.model = "mlp"
    spec = _spec(args)
    prep = spec.prepare(args.seed)
    eta = _eta(args, prep.lambda0)
    trace, report = spec.run(prep, eta, args.steps, eig_every=args.eig_every,
                             stop_at_train_acc_1=args.stop_at_train_acc_1)
    rows = [(r.step, r.loss, r.lam, None if r.lam is None else eta * r.lam) for r in trace.records]
    out_csv, out_json = args.out + ".csv", args.out + ".json"
    write_csv(out_csv, cfg, ("step", "loss", "lambda", "eta_lambda"), rows)
    payload = {"report": report.as_dict(),
               "train_acc": trace.meta.get("train_acc"), "test_acc": trace.meta.get("test_acc"),
               "dataset": spec.load()[2]}
    write_json(out_json, cfg, payload)
    status = "diverged" if report.phase == Phase.DIVERGENT else "ok"
    _summary("mlp", status, [out_csv, out_json], phase=report.as_dict()["phase"],
             eta_lambda0=report.eta_lambda0)
    return EXIT_DIVERGED if status == "diverged" else EXIT_OK


def cmd_linearize(args, cfg: RunConfig) -> int:
    args.model = "mlp"
    if args.n_train is None:
        # a two-class kernel scan must fit inside the smaller bundled dataset
        args.n_train = 512 if args.mode == "compare" else 200
    if args.mode == "compare":
        spec = _spec(args)
        if args.eta_lambda0 is None:
            raise ConfigError("--eta-lambda0 is required")
        res = ex.linearization_compare(spec, args.eta_lambda0, args.seed, args.t_lin, args.max_steps)
        out_json = args.out + ".json"
        write_json(out_json, cfg, {"result": res.as_dict(), "dataset": spec.load()[2]})
        status = "diverged" if res.linear_diverged else "ok"
        _summary("linearize", status, [out_json], loss_rel_gap=res.loss_rel_gap,
                 test_acc_gap=res.test_acc_gap)
        return EXIT_DIVERGED if status == "diverged" else EXIT_OK
    rows = ex.kernel_change_by_width(args.widths, tuple(args.seeds), args.t_lin, args.t_end,
                                     args.eta_lambda0 or 1.0, args.n_train, tuple(args.classes or (0, 1)),
                                     args.dataset, args.data_seed, args.center)
    out_csv = args.out + ".csv"
    write_csv(out_csv, cfg, ("width", "seed", "lambda0", "kernel_change"), rows)
    _summary("linearize", "ok", [out_csv], points=len(rows))
    return EXIT_OK


def cmd_surface(args, cfg: RunConfig) -> int:
    a0, a1, an = args.a_range
    b0, b1, bn = args.b_range
    if int(an) < 1 or int(bn) < 1 or args.n < 2:
        raise ConfigError("grid sizes must be >= 1 and --n >= 2")
    rows = wm.surface_slice(args.n, (a0, a1, int(an)), (b0, b1, int(bn)), args.r_seed, args.s_seed)
    out_csv = args.out + ".csv"
    write_csv(out_csv, cfg, SURFACE_COLUMNS, rows)
    _summary("surface", "ok", [out_csv], rows=len(rows))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catapult", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, eig_every=1):
        p.add_argument("--out", required=True, help="output path prefix")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--eig-every", type=int, default=eig_every,
                       help="steps between curvature evaluations")

    p = sub.add_parser("warmup", help="single-sample linear network run")
    common(p)
    p.add_argument("--n", type=int, default=1000)
    _add_eta(p)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--conv-tol", type=float, default=1e-8)
    p.add_argument("--reduced", action="store_true")
    p.add_argument("--no-stop", action="store_true", help="run all steps even after convergence")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("sweep", help="learning-rate sweep with phase labels")
    common(p)
    _add_model_flags(p)
    grid = p.add_mutually_exclusive_group(required=True)
    grid.add_argument("--grid", type=_float_list)
    grid.add_argument("--grid-lin", type=float, nargs=3, metavar=("LO", "HI", "NUM"))
    grid.add_argument("--grid-log", type=float, nargs=3, metavar=("LO", "HI", "NUM"))
    p.add_argument("--units", choices=("lambda0", "absolute"), default="lambda0")
    p.add_argument("--stop", choices=("steps", "physical_time", "train_acc_1"), default="steps")
    p.add_argument("--stop-value", type=float, default=None)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--reduce-at", type=float, default=None,
                   help="also report loss and lambda at this physical time")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("critexp", help="convergence-time exponent near eta*lambda0 = 2")
    common(p)
    p.add_argument("--n", type=int, default=16000)
    p.add_argument("--eps", type=_float_list, default=[0.04, 0.08, 0.16, 0.32])
    p.add_argument("--side", choices=("below", "above", "both"), default="both")
    p.add_argument("--conv-tol", type=float, default=1e-8)
    p.add_argument("--max-steps", type=int, default=1_000_000)
    p.add_argument("--reduced", action="store_true")
    p.set_defaults(func=cmd_critexp)

    p = sub.add_parser("maxlr", help="bisect for the maximum trainable learning rate")
    common(p)
    _add_model_flags(p, default_model="mlp")
    p.add_argument("--probe-steps", type=int, default=100)
    p.add_argument("--bracket", type=float, nargs=2, default=(4.0, 20.0), metavar=("LO", "HI"),
                   help="in units of 1/lambda0")
    p.add_argument("--rel-tol", type=float, default=0.02)
    p.set_defaults(func=cmd_maxlr)

    p = sub.add_parser("mlp", help="train one fully-connected network")
    common(p, eig_every=10)
    _add_model_flags(p, default_model="mlp")
    _add_eta(p)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--stop-at-train-acc-1", action="store_true")
    p.set_defaults(func=cmd_mlp)

    p = sub.add_parser("linearize", help="tangent-model comparison or kernel-change scan")
    common(p, eig_every=0)
    _add_model_flags(p, default_model="mlp", default_hidden="2048", default_n_train=None)
    p.add_argument("--mode", choices=("compare", "kernel"), default="compare")
    p.add_argument("--eta-lambda0", type=float, default=None)
    p.add_argument("--t-lin", type=int, default=10)
    p.add_argument("--t-end", type=int, default=1000)
    p.add_argument("--max-steps", type=int, default=5000)
    p.add_argument("--widths", type=_int_list, default=[64, 128, 256, 512, 1024])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("surface", help="loss and curvature on a 2d slice of the warmup model")
    common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--a-range", type=float, nargs=3, default=(-3.0, 3.0, 101),
                   metavar=("LO", "HI", "NUM"))
    p.add_argument("--b-range", type=float, nargs=3, default=(-3.0, 3.0, 101),
                   metavar=("LO", "HI", "NUM"))
    p.add_argument("--r-seed", type=int, default=1)
    p.add_argument("--s-seed", type=int, default=2)
    p.set_defaults(func=cmd_surface)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _run_config(args)
    try:
        return args.func(args, cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
