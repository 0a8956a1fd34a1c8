"""Exact three-phase power flow by forward-backward sweep.

Works directly on bus voltage and branch current phasors with the full
complex phase-impedance matrices, so mutual coupling and load voltage
dependence are represented without approximation. Used as the ground
truth that every optimized dispatch is checked against, and as the
source of the frozen current-angle table the linearized model needs.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

from dopf.feeder import NOMINAL_ANGLE, topological_order

LOAD_MODELS = ("constant-power", "constant-impedance", "cvr")


class PowerFlowDiverged(RuntimeError):
    """Sweep iteration failed to settle (or voltages collapsed)."""

    def __init__(self, message, sweeps=None, mismatch=None, worst_bus=None):
        super().__init__(message)
        self.sweeps = sweeps
        self.mismatch = mismatch
        self.worst_bus = worst_bus


@dataclass
class PhasorSolution:
    """Converged sweep state: phasors per bus phase and branch phase."""

    V: dict  # (bus, phase) -> complex, per unit
    I: dict  # ((from, to), phase) -> complex, per unit
    S_sub: dict  # phase -> complex substation injection, per unit
    sweeps: int
    mismatch: float
    load_model: str

    def substation_power(self):
        return sum(self.S_sub.values())

    def vm(self, bus, phase):
        return abs(self.V[(bus, phase)])


def _load_power(spec, V, model):
    """Complex power drawn by one load record at voltage phasor V."""
    if model == "constant-power":
        return complex(spec.p0, spec.q0)
    if model == "constant-impedance":
        return complex(spec.p0, spec.q0) * (abs(V) ** 2)
    if model == "cvr":
        vsq = abs(V) ** 2
        p = spec.p0 * (1.0 + 0.5 * spec.cvr_p * (vsq - 1.0))
        q = spec.q0 * (1.0 + 0.5 * spec.cvr_q * (vsq - 1.0))
        return complex(p, q)
    raise ValueError(f"unknown load model {model!r}")


def sweep_powerflow(
    graph,
    load_model="cvr",
    q_dg=None,
    p_dg=None,
    slack_v=1.0,
    tol=1e-9,
    max_sweeps=200,
):
    """Solve the exact power flow, returning a :class:`PhasorSolution`.

    ``q_dg`` maps (bus, phase) to dispatched reactive output (per unit,
    default zero); ``p_dg`` optionally overrides each generator's fixed
    active output. Convergence requires the largest bus-voltage change
    between two successive sweeps to fall below ``tol``.
    """
    if load_model not in LOAD_MODELS:
        raise ValueError(f"unknown load model {load_model!r}")
    q_dg = dict(q_dg or {})
    p_dg = dict(p_dg or {})
    for key in list(q_dg) + list(p_dg):
        bus = graph.buses.get(key[0])
        if bus is None or key[1] not in bus.dgs:
            raise KeyError(f"dispatch names no generator at bus {key[0]!r} phase {key[1]!r}")

    order = topological_order(graph)
    V = {}
    for bus in graph.buses.values():
        for p in bus.phases:
            V[(bus.name, p)] = slack_v * cmath.exp(1j * NOMINAL_ANGLE[p])

    sub = graph.substation
    I_br = {}
    for sweep in range(1, max_sweeps + 1):
        # net complex draw at each bus phase for the present voltages
        draw = {}
        for bus in graph.buses.values():
            for p in bus.phases:
                s = 0.0 + 0.0j
                if p in bus.loads:
                    s += _load_power(bus.loads[p], V[(bus.name, p)], load_model)
                if p in bus.dgs:
                    pv = p_dg.get((bus.name, p), bus.dgs[p].p_out)
                    qv = q_dg.get((bus.name, p), 0.0)
                    s -= complex(pv, qv)
                key = (bus.name, p)
                draw[key] = (s / V[key]).conjugate() if s != 0 else 0.0 + 0.0j

        # backward: aggregate branch currents from the leaves up
        I_br = {}
        for br in reversed(order):
            for p in br.phases:
                i = draw[(br.to_bus, p)]
                for child in graph.children[br.to_bus]:
                    if p in child.phases:
                        i += I_br[(child.key, p)]
                I_br[(br.key, p)] = i

        # forward: push voltages from the substation down
        mismatch = 0.0
        worst = None
        for br in order:
            for p in br.phases:
                v = V[(br.from_bus, p)]
                for q in br.phases:
                    v -= br.z.at(p, q) * I_br[(br.key, q)]
                delta = abs(v - V[(br.to_bus, p)])
                if delta > mismatch:
                    mismatch = delta
                    worst = (br.to_bus, p)
                V[(br.to_bus, p)] = v

        collapse = min(abs(v) for v in V.values())
        if collapse < 0.5:
            low = min(V, key=lambda k: abs(V[k]))
            raise PowerFlowDiverged(
                f"voltage collapse at bus {low[0]!r} phase {low[1]!r} (|V|={abs(V[low]):.4f})",
                sweeps=sweep,
                mismatch=mismatch,
                worst_bus=low,
            )
        if mismatch < tol:
            S_sub = {}
            for p in graph.buses[sub].phases:
                inj = 0.0 + 0.0j
                for br in graph.children[sub]:
                    if p in br.phases:
                        inj += V[(sub, p)] * I_br[(br.key, p)].conjugate()
                S_sub[p] = inj
            return PhasorSolution(
                V=V, I=I_br, S_sub=S_sub, sweeps=sweep, mismatch=mismatch, load_model=load_model
            )

    raise PowerFlowDiverged(
        f"no convergence in {max_sweeps} sweeps (mismatch {mismatch:.3e} at {worst})",
        sweeps=max_sweeps,
        mismatch=mismatch,
        worst_bus=worst,
    )


def _wrap_angle(theta):
    return math.atan2(math.sin(theta), math.cos(theta))


@dataclass
class AngleTable:
    """Frozen branch-current angle separations between phase pairs.

    Stores one angle per branch and ordered-by-name phase pair (p, q)
    with p before q; lookups for the reversed pair negate the value and
    same-phase lookups return zero.
    """

    delta: dict  # ((from, to), (p, q)) -> radians, p < q
    current_floor: float = 1e-10

    def at(self, branch_key, p, q):
        if p == q:
            return 0.0
        if (branch_key, (p, q)) in self.delta:
            return self.delta[(branch_key, (p, q))]
        return -self.delta[(branch_key, (q, p))]

    def pairs(self):
        return list(self.delta)


def extract_angle_table(graph, current_floor=1e-10):
    """Branch-current angle table from a constant-impedance base solve.

    Generators keep their fixed active output with zero reactive
    dispatch. Phase pairs whose current magnitude sits below
    ``current_floor`` fall back to the nominal phase separation.
    """
    sol = sweep_powerflow(graph, load_model="constant-impedance")
    delta = {}
    for br in graph.branches:
        for idx, p in enumerate(br.phases):
            for q in br.phases[idx + 1 :]:
                ip = sol.I[(br.key, p)]
                iq = sol.I[(br.key, q)]
                if abs(ip) < current_floor or abs(iq) < current_floor:
                    d = _wrap_angle(NOMINAL_ANGLE[p] - NOMINAL_ANGLE[q])
                else:
                    d = _wrap_angle(cmath.phase(ip) - cmath.phase(iq))
                delta[(br.key, (p, q))] = d
    return AngleTable(delta=delta, current_floor=current_floor)


@dataclass
class DispatchReport:
    """Exact-model audit of one reactive dispatch."""

    substation_mw: float
    substation_mvar: float
    voltages: dict  # (bus, phase) -> magnitude, per unit
    currents: dict  # ((from, to), phase) -> magnitude, per unit
    violations: list
    solution: PhasorSolution = field(repr=False, default=None)


def validate_dispatch(graph, q_dg=None, v_limits=(0.95, 1.05), tol=1e-4):
    """Run the exact sweep at a dispatch and audit limits.

    Voltage-dependent loads use their declared voltage dependence.
    Violations list entries exceeding the limits by more than ``tol``.
    """
    sol = sweep_powerflow(graph, load_model="cvr", q_dg=q_dg)
    v_lo, v_hi = v_limits
    violations = []
    voltages = {}
    for key, V in sol.V.items():
        vm = abs(V)
        voltages[key] = vm
        if vm < v_lo - tol:
            violations.append(f"v[{key[0]}.{key[1]}]={vm:.6f} below {v_lo}")
        elif vm > v_hi + tol:
            violations.append(f"v[{key[0]}.{key[1]}]={vm:.6f} above {v_hi}")
    currents = {}
    for br in graph.branches:
        for p in br.phases:
            im = abs(sol.I[(br.key, p)])
            currents[(br.key, p)] = im
            if br.ampacity is not None and p in br.ampacity and im > br.ampacity[p] + tol:
                violations.append(
                    f"i[{br.from_bus}-{br.to_bus}.{p}]={im:.6f} above rating {br.ampacity[p]:.6f}"
                )
    total = sol.substation_power()
    mw = total.real * graph.s_base / 1e6
    mvar = total.imag * graph.s_base / 1e6
    return DispatchReport(
        substation_mw=mw,
        substation_mvar=mvar,
        voltages=voltages,
        currents=currents,
        violations=violations,
        solution=sol,
    )


@dataclass
class ApproxErrorReport:
    max_flow_err_pct: float
    max_volt_err: float
    flow_err_pct: dict  # ((from, to), phase) -> percent
    volt_err: dict  # (bus, phase) -> per unit
    skipped: list  # branch phases with negligible exact flow


def approximation_error_report(graph, point, sol, flow_floor=1e-6):
    """Compare a model operating point against an exact phasor solution.

    Flow error is the percent difference of apparent-power magnitude per
    branch phase at the sending end, skipping branch phases whose exact
    flow is below ``flow_floor``. Voltage error is the absolute
    difference of voltage magnitude per bus phase.
    """
    flow_err = {}
    skipped = []
    for br in graph.branches:
        for p in br.phases:
            key = (br.key, p)
            if key not in point.P:
                raise KeyError(f"operating point missing flow for branch {br.key} phase {p!r}")
            s_exact = abs(sol.V[(br.from_bus, p)] * sol.I[key].conjugate())
            if s_exact < flow_floor:
                skipped.append(key)
                continue
            s_model = math.hypot(point.P[key], point.Q[key])
            flow_err[key] = abs(s_model - s_exact) / s_exact * 100.0
    volt_err = {}
    for bus in graph.buses.values():
        for p in bus.phases:
            key = (bus.name, p)
            if key not in point.v:
                raise KeyError(f"operating point missing voltage for bus {bus.name!r} phase {p!r}")
            volt_err[key] = abs(math.sqrt(point.v[key]) - abs(sol.V[key]))
    return ApproxErrorReport(
        max_flow_err_pct=max(flow_err.values(), default=0.0),
        max_volt_err=max(volt_err.values(), default=0.0),
        flow_err_pct=flow_err,
        volt_err=volt_err,
        skipped=skipped,
    )


def solution_to_dict(graph, sol):
    """JSON-ready nested dict of one phasor solution."""
    buses = {}
    for bus in graph.buses.values():
        entry = {}
        for p in bus.phases:
            V = sol.V[(bus.name, p)]
            entry[p] = {"vm": abs(V), "va_deg": math.degrees(cmath.phase(V))}
        buses[bus.name] = entry
    branches = {}
    for br in graph.branches:
        entry = {}
        for p in br.phases:
            S = sol.V[(br.from_bus, p)] * sol.I[(br.key, p)].conjugate()
            entry[p] = {"p": S.real, "q": S.imag, "i": abs(sol.I[(br.key, p)])}
        branches[f"{br.from_bus}-{br.to_bus}"] = entry
    total = sol.substation_power()
    return {
        "buses": buses,
        "branches": branches,
        "substation": {
            "p_mw": total.real * graph.s_base / 1e6,
            "q_mvar": total.imag * graph.s_base / 1e6,
            "per_phase": {p: {"p": s.real, "q": s.imag} for p, s in sol.S_sub.items()},
        },
        "sweeps": sol.sweeps,
        "load_model": sol.load_model,
    }
