"""Command-line experiments: simulate, sweep, certify, analyze, gain-curve.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 integration
failure.  Failures print one JSON line ``{"code": .., "error": .., "message": ..}``
on stderr.  Output files go to ``--output-dir``, else ``$SELFTUNE_OUTPUT_DIR``,
else ``./selftune-output``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, stabcert
from .adaptation import effective_gains, validate_theorem1, validate_theorem3_4
from .dynamics import chart_trajectory, simulate
from .errors import ConfigError, Infeasible, SelfTuneError
from .scenario import Scenario, load
from .stabcert import Box, Budget, EpsilonFamily, TargetSet

OUTPUT_ENV = "SELFTUNE_OUTPUT_DIR"
DEFAULT_OUTPUT = "selftune-output"
MEASURE_FRACTION = 0.25
UNSETTLED_SPREAD = 0.05
EXIT_OK, EXIT_INVALID, EXIT_INTEGRATION = 0, 2, 3


class InvalidInput(Exception):
    """Wraps a validation failure so ``main`` can map it to exit code 2."""


def fmt(value):
    """17 significant digits, the shortest width that always round-trips a double."""
    return f"{value:.17g}"


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def output_dir(path=None) -> Path:
    out = Path(path or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_table(path: Path, columns, rows, fmt_kind="csv"):
    """Write rows of mixed floats/strings as CSV (17 digits) or JSON records."""
    if fmt_kind == "json":
        path.write_text(dump_json({"columns": list(columns),
                                   "rows": [dict(zip(columns, r)) for r in rows]}))
        return path
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if v is None else fmt(v) if isinstance(v, (float, np.floating))
                         else v for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path):
    """Header and float matrix of a trajectory CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj):
            out += _flatten(obj[k], f"{prefix}{k}.")
        return out
    if isinstance(obj, (list, tuple)):
        out = []
        for i, v in enumerate(obj):
            out += _flatten(v, f"{prefix}{i}.")
        return out
    return [(prefix[:-1], obj)]


def write_record(path: Path, record: dict, fmt_kind="json"):
    """A nested result as JSON, or as flattened ``key,value`` CSV."""
    if fmt_kind == "json":
        path.write_text(dump_json(record))
        return path
    return write_table(path, ("key", "value"), _flatten(_clean(record)))


# -- single runs -----------------------------------------------------------------------


def settle_time(times, mu_error, band):
    """First time after which ``|mu - mu0| <= band`` for the rest of the run, else None."""
    outside = np.flatnonzero(np.asarray(mu_error) > band)
    if len(outside) == 0:
        return float(times[0])
    if outside[-1] == len(times) - 1:
        return None
    return float(times[outside[-1] + 1])


def window_amplitude(times, x, fraction=MEASURE_FRACTION):
    """``max |x|`` over the last ``fraction`` of the run, and over each half of that window."""
    start = times[-1] - fraction * (times[-1] - times[0])
    mask = times >= start
    t, xs = times[mask], np.abs(x[mask])
    mid = 0.5 * (t[0] + t[-1])
    halves = [float(np.max(xs[t <= mid])), float(np.max(xs[t >= mid]))]
    return float(np.max(xs)), halves


@dataclass
class RunReport:
    scenario: str
    system: str
    seed: int
    horizon: float
    final_mu_error: float
    settle_band: float
    settle_time: Optional[float]
    settled: bool
    target_amplitude: float
    final_amplitude: float
    final_state: dict
    n_accepted: int
    n_rejected: int
    analyses: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def to_dict(self):
        return _clean(asdict(self))


def hypothesis_summary(scenario: Scenario):
    law = scenario.law_object()
    mu0 = scenario.system.mu0
    if scenario.oscillating:
        report = validate_theorem3_4(law, mu0, scenario.system.omega)
    else:
        report = validate_theorem1(law, [mu0])
    return report


def integrate_scenario(scenario: Scenario):
    loop = scenario.build_loop()
    traj = simulate(loop, scenario.initial_state(), scenario.t_end, scenario.integrator,
                    chart=scenario.chart)
    return loop, traj


def summarize(scenario: Scenario, loop, traj, with_analyses=True) -> RunReport:
    mu_err = np.abs(traj.states[:, -1] - scenario.system.mu0)
    settle = settle_time(traj.times, mu_err, scenario.settle_band)
    final = traj.final
    amp = float(loop.radius(final)) if scenario.oscillating else float(final[0])
    analyses = {}
    if with_analyses:
        hyp = hypothesis_summary(scenario)
        analyses["hypotheses"] = {"theorem": hyp.theorem, "passed": hyp.passed,
                                  "failed": hyp.failed()}
        if not scenario.oscillating:
            qp = chart_trajectory(loop, traj, "log")
            analyses["lyapunov_max_increase"] = analysis.lyapunov_monotonicity(
                qp, loop.law, scenario.system.mu0)
        elif scenario.system.kind == "oscillator":
            fl = analysis.floquet_multipliers(loop.law, scenario.system.mu0,
                                              scenario.system.omega, check=False)
            analyses["floquet_spectral_radius"] = fl.spectral_radius
    return RunReport(
        scenario=scenario.name, system=scenario.system.kind, seed=scenario.seed,
        horizon=scenario.t_end, final_mu_error=float(mu_err[-1]),
        settle_band=scenario.settle_band, settle_time=settle, settled=settle is not None,
        target_amplitude=float(loop.x_star()), final_amplitude=amp,
        final_state=dict(zip(traj.labels, final.tolist())),
        n_accepted=traj.n_accepted, n_rejected=traj.n_rejected, analyses=analyses)


def run_scenario(scenario: Scenario, out=None, fmt_kind="csv") -> RunReport:
    """Simulate ``scenario``; write ``<name>.csv`` (or ``.json``) and ``<name>-report.json``."""
    scenario.validate()
    loop, traj = integrate_scenario(scenario)
    report = summarize(scenario, loop, traj)
    out = output_dir(out)
    rows = np.column_stack([traj.times, traj.states])
    table = write_table(out / f"{scenario.name}.{fmt_kind}", scenario.columns,
                        [list(r) for r in rows], fmt_kind)
    report_path = out / f"{scenario.name}-report.json"
    report.files = [table.name, report_path.name]
    report_path.write_text(dump_json(report.to_dict()))
    return report


# -- sweeps ----------------------------------------------------------------------------

SWEEP_METRICS = ("status", "final_mu_error", "settle_time", "settled", "final_amplitude",
                 "residual", "hypotheses_passed", "floquet_spectral_radius", "error")


def sweep_row(scenario: Scenario, param, value):
    """One sweep row; failures land in the ``error`` column instead of raising."""
    row = dict.fromkeys(SWEEP_METRICS)
    try:
        sc = scenario.with_value(param, value).validate()
        row["hypotheses_passed"] = hypothesis_summary(sc).passed
        loop, traj = integrate_scenario(sc)
        rep = summarize(sc, loop, traj, with_analyses=False)
        tail = traj.tail(MEASURE_FRACTION)
        row.update(status="ok", final_mu_error=rep.final_mu_error, settle_time=rep.settle_time,
                   settled=rep.settled, final_amplitude=rep.final_amplitude,
                   residual=float(np.max(TargetSet(loop).distance(tail.states))))
        if sc.system.kind == "oscillator":
            a_eff, b_eff, _ = effective_gains(sc.law_object(), sc.system.mu0)
            row["floquet_spectral_radius"] = analysis.floquet_from_gains(
                a_eff, b_eff, sc.system.omega).spectral_radius
    except (SelfTuneError, ValueError, ArithmeticError) as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _sweep_job(args):
    return sweep_row(*args)


def run_sweep(scenario: Scenario, param, values: Sequence, out=None, fmt_kind="csv",
              workers=1):
    """Run one scenario per value of ``param``; rows keep the order of ``values``."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    scenario.validate()
    scenario.get_value(param)
    scenario.with_value(param, values[0])
    jobs = [(scenario, param, v) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    columns = (param,) + SWEEP_METRICS
    table = [[_cell(v)] + [_cell(r[m]) for m in SWEEP_METRICS] for v, r in zip(values, rows)]
    path = write_table(output_dir(out) / f"{scenario.name}-sweep-{param}.{fmt_kind}", columns,
                       table, fmt_kind)
    return [dict(zip(columns, r)) for r in table], path


def _cell(v):
    if isinstance(v, bool) or v is None or isinstance(v, str):
        return v
    return float(v)


# -- gain curve ------------------------------------------------------------------------


def gain_curve(scenario: Scenario, amplitudes: Sequence[float], frequency=None, out=None,
               fmt_kind="csv"):
    """Steady response ``max |x|`` to ``F cos(w t)`` for each forcing amplitude ``F``.

    ``frequency`` defaults to the natural frequency ``omega``.  A row is flagged
    unsettled when the two halves of the measurement window disagree by more
    than 5%.
    """
    scenario.validate()
    if scenario.system.kind != "oscillator_full":
        raise ConfigError("gain curves need system.kind = oscillator_full (lambda > 0)")
    amps = [float(a) for a in amplitudes]
    if not amps or any(a < 0 for a in amps) or any(b <= a for a, b in zip(amps, amps[1:])):
        raise ConfigError("amplitudes must be non-negative and strictly increasing")
    w = scenario.system.omega if frequency is None else float(frequency)
    if not w > 0:
        raise ConfigError("forcing frequency must be positive")
    rows = []
    for F in amps:
        expr = None if F == 0 else f"{F!r}*cos({w!r}*t)"
        sc = replace(scenario, forcing=replace(scenario.forcing, expr=expr))
        loop, traj = integrate_scenario(sc)
        response, halves = window_amplitude(traj.times, traj.states[:, 0])
        spread = (max(halves) - min(halves)) / max(max(halves), 1e-300)
        rows.append({"F": F, "response": response, "slope": None,
                     "unsettled": bool(spread > UNSETTLED_SPREAD),
                     "final_mu": float(traj.final[-1])})
    for prev, row in zip(rows, rows[1:]):
        if prev["F"] > 0:
            row["slope"] = math.log(row["response"] / prev["response"]) / math.log(row["F"] / prev["F"])
    columns = ("F", "response", "slope", "unsettled", "final_mu")
    path = write_table(output_dir(out) / f"{scenario.name}-gain.{fmt_kind}", columns,
                       [[r[c] for c in columns] for r in rows], fmt_kind)
    return rows, path


# -- certification ---------------------------------------------------------------------


def certify(scenario: Scenario, clause="practical", radius=0.05, k_radius=0.5, k_box=None,
            perturbation=None, budget: Budget = None, residual_epsilons=None):
    """Falsification verdict for one clause of uniform practical stability."""
    scenario.validate()
    loop = scenario.build_loop().with_model(perturbation=None)
    source = perturbation or scenario.perturbation.expr or "sin(t)"
    family = EpsilonFamily.from_source(loop, source)
    target = TargetSet(loop)
    budget = budget or Budget(seed=scenario.seed)
    if clause == "practical":
        verdict = stabcert.falsify_practical_stability(family, target, radius, budget)
    elif clause == "semiglobal":
        K = Box(*k_box) if k_box is not None else k_radius
        verdict = stabcert.falsify_semiglobal_practical(family, target, K, radius, budget)
    else:
        raise ConfigError(f"unknown clause {clause!r}")
    record = verdict.to_dict()
    record["seed"] = budget.seed
    record["perturbation"] = source
    if residual_epsilons:
        sweep = stabcert.epsilon_residual_sweep(family, target, residual_epsilons)
        record["residual_sweep"] = [{"epsilon": e, "residual": r} for e, r in sweep]
    return verdict, record


# -- analyses --------------------------------------------------------------------------

ANALYSES = ("lyapunov", "kyp", "positive-real", "floquet", "linearize", "sector")


def _gains(scenario):
    law = scenario.law_object()
    if scenario.oscillating:
        a, b, _ = effective_gains(law, scenario.system.mu0)
        return a, b
    if law.variant == "log":
        return law.params["a"], law.params["b"]
    lin = analysis.linearize_equilibrium(law, scenario.system.mu0)
    # q'' + b q' + a q = 0 with the linearised stiffness and damping
    return float(-lin.matrix[1, 0]), float(-lin.matrix[1, 1])


def analyze(scenario: Scenario, what, mode="reduced", samples=10_000):
    scenario.validate()
    law = scenario.law_object()
    mu0 = scenario.system.mu0
    record = {"analysis": what, "scenario": scenario.name, "seed": scenario.seed}
    if what == "lyapunov":
        if scenario.oscillating:
            raise ConfigError("the Lyapunov analysis applies to first_order systems")
        loop, traj = integrate_scenario(scenario)
        qp = chart_trajectory(loop, traj, "log")
        q0, p0 = qp.states[0]
        record.update(max_increase=analysis.lyapunov_monotonicity(qp, law, mu0),
                      V_initial=analysis.lyapunov_value(q0, p0, law, mu0),
                      V_final=analysis.lyapunov_value(*qp.states[-1], law, mu0),
                      n_samples=len(qp.times))
    elif what in ("kyp", "positive-real"):
        a, b = _gains(scenario)
        margin = analysis.positive_real_margin(a, b)
        record.update(a=a, b=b, margin=margin, positive_real=margin >= 0)
        if what == "kyp":
            try:
                form = analysis.kyp_storage(a, b, seed=scenario.seed)
            except Infeasible as exc:
                record.update(feasible=False, reason=str(exc))
            else:
                top = np.linalg.eigvalsh(analysis.kyp_block(form.P, a, b))[-1]
                record.update(feasible=True, P=form.P, max_kyp_eigenvalue=top)
    elif what == "floquet":
        if not scenario.oscillating:
            raise ConfigError("Floquet analysis applies to oscillator systems")
        res = analysis.floquet_multipliers(law, mu0, scenario.system.omega, mode=mode,
                                           check=False)
        record.update(res.to_dict())
        record["hypotheses_passed"] = hypothesis_summary(scenario).passed
    elif what == "linearize":
        if scenario.oscillating:
            raise ConfigError("equilibrium linearisation applies to first_order systems")
        lin = analysis.linearize_equilibrium(law, mu0)
        record.update(matrix=lin.matrix, eigenvalues=lin.eigenvalues, x_star=lin.x_star,
                      stable=lin.stable, slowest_rate=lin.slowest_rate)
    elif what == "sector":
        rng = np.random.default_rng(scenario.seed)
        phi = rng.uniform(0, 2 * np.pi, samples)
        p = rng.normal(0, 3, samples)
        lhs, rhs = analysis.sector_identity(phi, p)
        rel = np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))
        record.update(samples=samples, max_relative_error=float(np.max(rel)))
    else:
        raise ConfigError(f"unknown analysis {what!r}")
    return record


# -- argparse --------------------------------------------------------------------------


def float_list(text):
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _box(text):
    """``"x_lo:x_hi,mu_lo:mu_hi"`` (three ranges for oscillators)."""
    try:
        pairs = [tuple(float(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad box {text!r}")
    if any(len(p) != 2 or not p[0] < p[1] for p in pairs):
        raise argparse.ArgumentTypeError(f"bad box {text!r}; use lo:hi per coordinate")
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInput(message)


def build_parser():
    parser = _Parser(prog="selftune", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("config", help="scenario TOML file or preset name")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--format", choices=("csv", "json"), default=None)
        p.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV})")
        return p

    common(sub.add_parser("simulate", help="integrate one scenario"))

    p = common(sub.add_parser("sweep", help="vary one parameter"))
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, type=float_list)
    p.add_argument("--workers", type=int, default=1)

    p = common(sub.add_parser("certify", help="falsification search for practical stability"))
    p.add_argument("--clause", choices=("practical", "semiglobal"), default="practical")
    p.add_argument("--radius", type=float, default=0.05, help="U2 (or U) radius in the chart")
    p.add_argument("--k-radius", type=float, default=0.5, help="compact set as a chart ball")
    p.add_argument("--k-box", type=_box, help="compact set as lo:hi ranges in original coordinates")
    p.add_argument("--perturbation", help="perturbation shape p (default: scenario or sin(t))")
    p.add_argument("--epsilons", type=float_list)
    p.add_argument("--horizon", type=float)
    p.add_argument("--points-per-shell", type=int)
    p.add_argument("--shells", type=int)
    p.add_argument("--start-times", type=float_list)
    p.add_argument("--residual-sweep", type=float_list, help="also run a residual sweep over these epsilons")

    p = common(sub.add_parser("analyze", help="closed-form and numerical analyses"))
    p.add_argument("--what", required=True, choices=ANALYSES)
    p.add_argument("--mode", choices=("reduced", "full"), default="reduced")
    p.add_argument("--samples", type=int, default=10_000)

    p = common(sub.add_parser("gain-curve", help="forced response of the full oscillator"))
    p.add_argument("--amplitudes", required=True, type=float_list)
    p.add_argument("--frequency", type=float, help="forcing frequency (default omega)")
    return parser


def _fail(code, exc):
    line = {"code": code, "error": type(exc).__name__, "message": str(exc).splitlines()[0]
            if str(exc) else ""}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        scenario = load(args.config)
        if args.seed is not None:
            scenario = replace(scenario, seed=args.seed)
        scenario.validate()
        budget = None
        if args.command == "certify":
            overrides = {k: v for k, v in {
                "epsilons": args.epsilons, "horizon": args.horizon,
                "points_per_shell": args.points_per_shell, "shells": args.shells,
                "start_times": tuple(args.start_times) if args.start_times else None,
            }.items() if v is not None}
            budget = Budget(seed=scenario.seed, **overrides)
        if args.command == "sweep":
            scenario.get_value(args.param)
            if not args.values:
                raise ConfigError("sweep needs at least one value")
    except (InvalidInput, SelfTuneError, ValueError) as exc:
        return _fail(EXIT_INVALID, exc)

    try:
        return _dispatch(args, scenario, budget)
    except (ConfigError, InvalidInput) as exc:
        return _fail(EXIT_INVALID, exc)
    except (SelfTuneError, ArithmeticError) as exc:
        return _fail(EXIT_INTEGRATION, exc)


def _dispatch(args, scenario, budget):
    out = args.output_dir
    if args.command == "simulate":
        report = run_scenario(scenario, out, args.format or "csv")
        print(f"{scenario.name}: final |mu - mu0| = {fmt(report.final_mu_error)}, "
              f"settle time = {report.settle_time}; wrote {', '.join(report.files)}")
    elif args.command == "sweep":
        rows, path = run_sweep(scenario, args.param, args.values, out, args.format or "csv",
                               args.workers)
        n_err = sum(r["status"] == "error" for r in rows)
        print(f"{len(rows)} rows ({n_err} failed); wrote {path.name}")
    elif args.command == "gain-curve":
        rows, path = gain_curve(scenario, args.amplitudes, args.frequency, out,
                                args.format or "csv")
        print(f"{len(rows)} amplitudes; wrote {path.name}")
    elif args.command == "certify":
        verdict, record = certify(scenario, args.clause, args.radius, args.k_radius, args.k_box,
                                  args.perturbation, budget, args.residual_sweep)
        path = write_record(output_dir(out) / f"{scenario.name}-certify-{args.clause}."
                            f"{args.format or 'json'}", record, args.format or "json")
        print(f"{verdict.clause}: {verdict.outcome}; wrote {path.name}")
    elif args.command == "analyze":
        record = analyze(scenario, args.what, args.mode, args.samples)
        path = write_record(output_dir(out) / f"{scenario.name}-{args.what}."
                            f"{args.format or 'json'}", record, args.format or "json")
        print(f"{args.what}: wrote {path.name}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
