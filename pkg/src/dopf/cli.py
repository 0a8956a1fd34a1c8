"""Command-line front end: scenario runs, penetration sweeps, dispatch audits.

Three subcommands:

``dopf run``      solve one scenario and write a report plus trace CSVs
``dopf sweep``    repeat a scenario over a list of DG penetration levels
``dopf validate`` audit a reactive dispatch file against the exact sweep

Reports are split into a deterministic part (``report.json``, byte-stable
for a fixed scenario and seed) and a timing part (``timing.json``) that
carries the wall-clock numbers.
"""

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .bfm import InfeasibleInitialization
from .conic import SolverError
from .feeder import DgSpec, FeederError, parse_feeder, scale_loads, with_dgs
from .isocp import IsocpSettings, run_isocp
from .powerflow import PowerFlowDiverged, sweep_powerflow, validate_dispatch
from .pslp import PslpSettings, run_pslp

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_SOLVER = 5
EXIT_USAGE = 64

# inverter fleet used for penetration studies: 48 kVA units sized at
# 1.2x their active rating, generating half of that rating by default
DEFAULT_UNIT_VA = 48000.0
RATING_MARGIN = 1.2
DEFAULT_OUTPUT_FRAC = 0.5

ALGOS = ("pslp", "isocp")


class UsageError(Exception):
    pass


@dataclasses.dataclass
class Scenario:
    """One fully specified run: feeder, scaling, fleet, algorithms."""

    feeder: str
    algo: str = "both"
    load_scale: float = 1.0
    dg_penetration: float = None
    dg_list: str = None
    dg_unit_va: float = DEFAULT_UNIT_VA
    dg_output_frac: float = DEFAULT_OUTPUT_FRAC
    seed: int = 0
    settings: dict = dataclasses.field(default_factory=dict)
    out: str = None

    def __post_init__(self):
        if self.load_scale <= 0:
            raise UsageError("--load-scale must be positive")
        if self.dg_penetration is not None and not 0.0 <= self.dg_penetration <= 1.0:
            raise UsageError("--dg-penetration must lie in [0, 1]")
        if self.dg_penetration is not None and self.dg_list is not None:
            raise UsageError("--dg-penetration and --dg-list are mutually exclusive")
        if self.algo not in ALGOS + ("both",):
            raise UsageError(f"unknown algorithm {self.algo!r}")

    def algorithms(self):
        return list(ALGOS) if self.algo == "both" else [self.algo]


@dataclasses.dataclass
class AlgoOutcome:
    converged: bool
    iterations: int
    objective_mw: float
    validated_mw: float
    final_eps: float
    reduction_pct: float
    dispatch: dict
    wall_time_s: float
    trace: list = dataclasses.field(repr=False, default=None)


@dataclasses.dataclass
class RunReport:
    scenario: Scenario
    n_buses: int
    n_branches: int
    total_load_mw: float
    dg_sites: int
    dg_rating_mva: float
    baseline_mw: float
    outcomes: dict  # algo name -> AlgoOutcome

    @property
    def all_converged(self):
        return all(o.converged for o in self.outcomes.values())


def _valid_settings_keys():
    keys = {}
    for cls in (PslpSettings, IsocpSettings):
        for f in dataclasses.fields(cls):
            keys.setdefault(f.name, f.type)
    return keys


def parse_overrides(pairs):
    """``key=value`` strings -> dict, typed against the settings fields."""
    valid = _valid_settings_keys()
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not raw:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        if key not in valid:
            raise UsageError(
                f"unknown settings key {key!r}; valid keys: {', '.join(sorted(valid))}"
            )
        out[key] = _coerce(raw, valid[key])
    return out


def _coerce(raw, ftype):
    name = getattr(ftype, "__name__", str(ftype))
    if "bool" in name:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if "int" in name:
        return int(raw)
    if "float" in name:
        return float(raw)
    return raw


def _split_settings(overrides):
    ps_fields = {f.name for f in dataclasses.fields(PslpSettings)}
    iso_fields = {f.name for f in dataclasses.fields(IsocpSettings)}
    ps = PslpSettings(**{k: v for k, v in overrides.items() if k in ps_fields})
    iso = IsocpSettings(**{k: v for k, v in overrides.items() if k in iso_fields})
    return ps, iso


def place_dg_fleet(graph, penetration, seed, unit_va=DEFAULT_UNIT_VA,
                   output_frac=DEFAULT_OUTPUT_FRAC):
    """Seeded load-proportional placement of identical inverter units.

    Penetration is the ratio of total placed active rating to total feeder
    active load. Units land on load-carrying bus phases with probability
    proportional to the load there; multiple units at one site aggregate
    into a single generator record. Replaces any generators already on
    the graph so sweeps start from a common DG-free baseline.
    """
    sites = []
    weights = []
    for bus in graph.buses.values():
        if bus.is_substation:
            continue
        for p in sorted(bus.loads):
            if bus.loads[p].p0 > 0:
                sites.append((bus.name, p))
                weights.append(bus.loads[p].p0)
    total_p = sum(weights)
    if not sites or total_p <= 0:
        return with_dgs(graph, {})
    p_rated_unit = unit_va / RATING_MARGIN / graph.s_base
    n_units = int(round(penetration * total_p / p_rated_unit))
    if n_units == 0:
        return with_dgs(graph, {})
    # sites are file-ordered and the multinomial draw is a single RNG call,
    # so a fixed seed pins the whole fleet
    order = sorted(range(len(sites)), key=lambda i: sites[i])
    pvals = np.array([weights[i] for i in order]) / total_p
    counts = np.random.default_rng(seed).multinomial(n_units, pvals)
    dg_map = {}
    for idx, n in zip(order, counts):
        if n == 0:
            continue
        p_rated = n * p_rated_unit
        dg_map[sites[idx]] = DgSpec(
            p_out=p_rated * output_frac, s_rated=n * unit_va / graph.s_base
        )
    return with_dgs(graph, dg_map)


def load_dg_list(path, s_base):
    """Explicit fleet file: JSON list of {bus, phase, p_w, s_va}."""
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise UsageError("--dg-list file must hold a JSON list")
    dg_map = {}
    for rec in records:
        try:
            key = (rec["bus"], rec["phase"])
            dg_map[key] = DgSpec(p_out=rec["p_w"] / s_base, s_rated=rec["s_va"] / s_base)
        except (KeyError, TypeError) as exc:
            raise UsageError(f"--dg-list records need bus/phase/p_w/s_va: {rec!r}") from exc
    return dg_map


def build_graph(scenario):
    text = Path(scenario.feeder).read_text()
    graph = parse_feeder(text)
    if scenario.load_scale != 1.0:
        graph = scale_loads(graph, scenario.load_scale)
    if scenario.dg_penetration is not None:
        graph = place_dg_fleet(
            graph, scenario.dg_penetration, scenario.seed,
            unit_va=scenario.dg_unit_va, output_frac=scenario.dg_output_frac,
        )
    elif scenario.dg_list is not None:
        graph = with_dgs(graph, load_dg_list(scenario.dg_list, graph.s_base))
    return graph


def run_scenario(scenario):
    """Baseline sweep, selected algorithms, exact-model validation."""
    graph = build_graph(scenario)
    ps_settings, iso_settings = _split_settings(scenario.settings)

    baseline = sweep_powerflow(graph, load_model="cvr")
    baseline_mw = baseline.substation_power().real * graph.s_base / 1e6

    outcomes = {}
    for algo in scenario.algorithms():
        t0 = time.perf_counter()
        if algo == "pslp":
            res = run_pslp(graph, ps_settings)
            final_eps = abs(res.final_eps)
        else:
            res = run_isocp(graph, iso_settings)
            final_eps = res.final_eps
        wall = time.perf_counter() - t0
        audit = validate_dispatch(graph, res.dispatch)
        outcomes[algo] = AlgoOutcome(
            converged=res.converged,
            iterations=res.iterations,
            objective_mw=res.objective_mw,
            validated_mw=audit.substation_mw,
            final_eps=final_eps,
            reduction_pct=100.0 * (baseline_mw - audit.substation_mw) / baseline_mw,
            dispatch=dict(res.dispatch),
            wall_time_s=wall,
            trace=res.trace,
        )

    report = RunReport(
        scenario=scenario,
        n_buses=len(graph.buses),
        n_branches=len(graph.branches),
        total_load_mw=sum(
            ld.p0 for b in graph.buses.values() for ld in b.loads.values()
        ) * graph.s_base / 1e6,
        dg_sites=sum(len(b.dgs) for b in graph.buses.values()),
        dg_rating_mva=sum(
            dg.s_rated for b in graph.buses.values() for dg in b.dgs.values()
        ) * graph.s_base / 1e6,
        baseline_mw=baseline_mw,
        outcomes=outcomes,
    )
    if scenario.out is not None:
        write_report(report, Path(scenario.out))
    return report


def report_payload(report):
    """The deterministic half of a report (no wall-clock numbers)."""
    scen = report.scenario
    payload = {
        "scenario": {
            "feeder": str(scen.feeder),
            "algo": scen.algo,
            "load_scale": scen.load_scale,
            "dg_penetration": scen.dg_penetration,
            "dg_list": str(scen.dg_list) if scen.dg_list else None,
            "seed": scen.seed,
            "settings": dict(scen.settings),
        },
        "feeder": {
            "buses": report.n_buses,
            "branches": report.n_branches,
            "total_load_mw": report.total_load_mw,
            "dg_sites": report.dg_sites,
            "dg_rating_mva": report.dg_rating_mva,
        },
        "baseline_mw": report.baseline_mw,
        "algorithms": {},
    }
    for algo, o in report.outcomes.items():
        payload["algorithms"][algo] = {
            "converged": o.converged,
            "iterations": o.iterations,
            "objective_mw": o.objective_mw,
            "validated_mw": o.validated_mw,
            "final_eps": o.final_eps,
            "reduction_pct": o.reduction_pct,
            "dispatch": {f"{b}.{p}": q for (b, p), q in sorted(o.dispatch.items())},
        }
    return payload


PSLP_TRACE_COLUMNS = (
    "k", "objective_mw", "eps", "step", "elastic_mass", "quad_max",
    "lp_status", "solve_time",
)
ISOCP_TRACE_COLUMNS = (
    "k", "eps", "max_pp", "max_pq", "f_socp_mw", "f_sys_mw", "n_cuts",
    "contraction", "socp_status", "solve_time",
)


def write_report(report, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report_payload(report), indent=2, sort_keys=True) + "\n"
    )
    timing = {a: o.wall_time_s for a, o in report.outcomes.items()}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    for algo, o in report.outcomes.items():
        cols = PSLP_TRACE_COLUMNS if algo == "pslp" else ISOCP_TRACE_COLUMNS
        with (out_dir / f"{algo}_trace.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for it in o.trace:
                writer.writerow([getattr(it, c) for c in cols])


def sweep_penetration(base, levels, jobs=1):
    """One run per penetration level, plus a summary CSV next to them."""
    if any(not 0.0 < lv <= 1.0 for lv in levels):
        raise UsageError("sweep levels must lie in (0, 1]")
    if sorted(levels) != list(levels):
        raise UsageError("sweep levels must be sorted ascending")
    scenarios = []
    for lv in levels:
        sub = None
        if base.out is not None:
            sub = str(Path(base.out) / f"pen_{int(round(lv * 100)):03d}")
        scenarios.append(dataclasses.replace(base, dg_penetration=lv, out=sub))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_scenario, scenarios))
    else:
        reports = [run_scenario(s) for s in scenarios]
    if base.out is not None:
        _write_sweep_summary(levels, reports, Path(base.out) / "sweep_summary.csv")
    return reports


def _write_sweep_summary(levels, reports, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    algos = list(reports[0].outcomes)
    header = ["penetration", "baseline_mw"]
    for a in algos:
        header += [f"{a}_mw", f"{a}_reduction_pct", f"{a}_iterations", f"{a}_converged"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for lv, rep in zip(levels, reports):
            row = [lv, rep.baseline_mw]
            for a in algos:
                o = rep.outcomes[a]
                row += [o.validated_mw, o.reduction_pct, o.iterations, o.converged]
            writer.writerow(row)


def load_dispatch_file(path):
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise UsageError("dispatch file must hold a JSON object of bus.phase -> q")
    dispatch = {}
    for key, q in raw.items():
        bus, sep, phase = key.rpartition(".")
        if not sep or phase not in "abc" or not bus:
            raise UsageError(f"dispatch key must look like 'bus.phase', got {key!r}")
        dispatch[(bus, phase)] = float(q)
    return dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_scenario_args(sub):
    sub.add_argument("--feeder", required=True, help="feeder description file")
    sub.add_argument("--algo", default="both", choices=["pslp", "isocp", "both"])
    sub.add_argument("--load-scale", type=float, default=1.0)
    sub.add_argument("--out", default=None, help="directory for reports and traces")
    fleet = sub.add_mutually_exclusive_group()
    fleet.add_argument("--dg-penetration", type=float, default=None,
                       help="replace generators with a seeded fleet at this penetration")
    fleet.add_argument("--dg-list", default=None,
                       help="JSON file of explicit generator records")
    sub.add_argument("--dg-unit-va", type=float, default=DEFAULT_UNIT_VA)
    sub.add_argument("--dg-output-frac", type=float, default=DEFAULT_OUTPUT_FRAC)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                     help="override a solver settings field (repeatable)")


def _scenario_from_args(args, **replacements):
    scen = Scenario(
        feeder=args.feeder,
        algo=args.algo,
        load_scale=args.load_scale,
        dg_penetration=args.dg_penetration,
        dg_list=args.dg_list,
        dg_unit_va=args.dg_unit_va,
        dg_output_frac=args.dg_output_frac,
        seed=args.seed,
        settings=parse_overrides(args.overrides),
        out=args.out,
    )
    return dataclasses.replace(scen, **replacements) if replacements else scen


def _print_report(report):
    print(f"baseline {report.baseline_mw:.6f} MW "
          f"({report.n_buses} buses, {report.dg_sites} DG sites, "
          f"{report.dg_rating_mva:.3f} MVA)")
    for algo, o in report.outcomes.items():
        flag = "converged" if o.converged else "NOT CONVERGED"
        print(f"{algo:6s} {o.validated_mw:.6f} MW validated "
              f"(model {o.objective_mw:.6f}, {o.iterations} iterations, "
              f"{o.reduction_pct:+.3f}%, {o.wall_time_s:.2f}s) {flag}")


def cmd_run(args):
    report = run_scenario(_scenario_from_args(args))
    _print_report(report)
    return EXIT_OK if report.all_converged else EXIT_NOT_CONVERGED


def cmd_sweep(args):
    try:
        levels = [float(tok) for tok in args.levels.split(",") if tok]
    except ValueError as exc:
        raise UsageError(f"bad --levels: {exc}") from exc
    if not levels:
        raise UsageError("--levels must name at least one penetration fraction")
    base = _scenario_from_args(args, dg_penetration=None)
    reports = sweep_penetration(base, levels, jobs=args.jobs)
    for lv, rep in zip(levels, reports):
        print(f"--- penetration {lv:.0%} ---")
        _print_report(rep)
    ok = all(r.all_converged for r in reports)
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def cmd_validate(args):
    text = Path(args.feeder).read_text()
    graph = parse_feeder(text)
    dispatch = load_dispatch_file(args.dispatch)
    audit = validate_dispatch(graph, dispatch)
    print(f"substation {audit.substation_mw:.6f} MW, {audit.substation_mvar:.6f} Mvar")
    vmin_key = min(audit.voltages, key=audit.voltages.get)
    vmax_key = max(audit.voltages, key=audit.voltages.get)
    print(f"voltage range [{audit.voltages[vmin_key]:.5f} @ {vmin_key[0]}.{vmin_key[1]}, "
          f"{audit.voltages[vmax_key]:.5f} @ {vmax_key[0]}.{vmax_key[1]}] pu")
    if audit.violations:
        for v in audit.violations:
            print(f"violation: {v}")
        return EXIT_NOT_CONVERGED
    print("no violations")
    return EXIT_OK


def main(argv=None):
    parser = _Parser(prog="dopf", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    run_p = subs.add_parser("run", help="solve one scenario")
    _add_scenario_args(run_p)
    run_p.set_defaults(func=cmd_run)

    sweep_p = subs.add_parser("sweep", help="run a DG penetration sweep")
    _add_scenario_args(sweep_p)
    sweep_p.add_argument("--levels", required=True,
                         help="comma-separated penetration fractions, ascending")
    sweep_p.add_argument("--jobs", type=int, default=1)
    sweep_p.set_defaults(func=cmd_sweep)

    val_p = subs.add_parser("validate", help="audit a dispatch against the exact model")
    val_p.add_argument("--feeder", required=True)
    val_p.add_argument("--dispatch", required=True,
                       help="JSON object mapping bus.phase to reactive output, per unit")
    val_p.set_defaults(func=cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dopf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FeederError as exc:
        print(f"dopf: feeder error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (PowerFlowDiverged, InfeasibleInitialization, SolverError) as exc:
        print(f"dopf: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"dopf: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
