"""Linearized-quadratic branch-flow model on squared voltages and currents.

State per branch and phase: sending-end active/reactive flow P, Q and
squared current magnitude l; per branch and unordered phase pair the
current cross product l_pq = |I_p||I_q|; per bus and phase the squared
voltage magnitude v. Two frozen-angle devices close the cross-phase
terms: bus voltages are assumed at their nominal 120-degree spacing, and
branch current angle separations come from a constant-impedance base
solve. What remains nonlinear is exactly one quadratic equality per
branch phase (apparent power vs v*l) and one per phase pair (cross
product vs the two squared currents); everything else is affine,
including the voltage-dependent load model.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from dopf.feeder import NOMINAL_ANGLE, AMPACITY_SENTINEL_SQ


class InfeasibleInitialization(RuntimeError):
    """The loss-free initializer has no point inside the voltage box."""


@dataclass
class LoadModelCoefficients:
    """Affine load consumption in squared voltage: p(v) = a_p + b_p * v."""

    a_p: float
    b_p: float
    a_q: float
    b_q: float

    @classmethod
    def from_load(cls, spec):
        return cls(
            a_p=spec.p0 * (1.0 - 0.5 * spec.cvr_p),
            b_p=0.5 * spec.cvr_p * spec.p0,
            a_q=spec.q0 * (1.0 - 0.5 * spec.cvr_q),
            b_q=0.5 * spec.cvr_q * spec.q0,
        )

    def eval(self, v):
        return (self.a_p + self.b_p * v, self.a_q + self.b_q * v)


@dataclass
class OperatingPoint:
    """One full model state, keyed by network elements."""

    v: dict = field(default_factory=dict)  # (bus, phase) -> squared voltage
    P: dict = field(default_factory=dict)  # ((from, to), phase) -> active flow
    Q: dict = field(default_factory=dict)
    l: dict = field(default_factory=dict)  # ((from, to), phase) -> squared current
    lx: dict = field(default_factory=dict)  # ((from, to), (p, q)) -> cross product
    q_dg: dict = field(default_factory=dict)  # (bus, phase) -> reactive dispatch

    def copy(self):
        return OperatingPoint(
            dict(self.v), dict(self.P), dict(self.Q), dict(self.l), dict(self.lx), dict(self.q_dg)
        )


class VariableIndex:
    """Deterministic flat ordering of the model variables."""

    def __init__(self, graph):
        self.names = []
        self.v_id = {}
        self.P_id = {}
        self.Q_id = {}
        self.l_id = {}
        self.lx_id = {}
        self.qdg_id = {}

        def add(table, key, name):
            table[key] = len(self.names)
            self.names.append(name)

        for bus in graph.buses.values():
            for p in bus.phases:
                add(self.v_id, (bus.name, p), f"v[{bus.name}.{p}]")
        for br in graph.branches:
            tag = f"{br.from_bus}-{br.to_bus}"
            for p in br.phases:
                add(self.P_id, (br.key, p), f"P[{tag}.{p}]")
        for br in graph.branches:
            tag = f"{br.from_bus}-{br.to_bus}"
            for p in br.phases:
                add(self.Q_id, (br.key, p), f"Q[{tag}.{p}]")
        for br in graph.branches:
            tag = f"{br.from_bus}-{br.to_bus}"
            for p in br.phases:
                add(self.l_id, (br.key, p), f"l[{tag}.{p}]")
        for br in graph.branches:
            tag = f"{br.from_bus}-{br.to_bus}"
            for i, p in enumerate(br.phases):
                for q in br.phases[i + 1 :]:
                    add(self.lx_id, (br.key, (p, q)), f"lx[{tag}.{p}{q}]")
        for bus in graph.buses.values():
            for p in bus.phases:
                if p in bus.dgs:
                    add(self.qdg_id, (bus.name, p), f"qdg[{bus.name}.{p}]")
        self.n = len(self.names)

    def to_vector(self, point):
        x = np.zeros(self.n)
        for table, values in (
            (self.v_id, point.v),
            (self.P_id, point.P),
            (self.Q_id, point.Q),
            (self.l_id, point.l),
            (self.lx_id, point.lx),
            (self.qdg_id, point.q_dg),
        ):
            for key, idx in table.items():
                x[idx] = values[key]
        return x

    def to_point(self, x):
        pt = OperatingPoint()
        for table, values in (
            (self.v_id, pt.v),
            (self.P_id, pt.P),
            (self.Q_id, pt.Q),
            (self.l_id, pt.l),
            (self.lx_id, pt.lx),
            (self.qdg_id, pt.q_dg),
        ):
            for key, idx in table.items():
                values[key] = float(x[idx])
        return pt


@dataclass
class QuadPP:
    """P^2 + Q^2 = v_from * l on one branch phase."""

    branch: tuple
    phase: str
    iP: int
    iQ: int
    iv: int
    il: int


@dataclass
class QuadPQ:
    """lx^2 = l_p * l_q on one branch phase pair."""

    branch: tuple
    pair: tuple
    ilx: int
    ilp: int
    ilq: int


@dataclass
class ConstraintSystem:
    """Assembled affine rows, quadratic couplings, boxes, and objective."""

    graph: object = field(repr=False)
    angles: object = field(repr=False)
    index: VariableIndex = field(repr=False)
    A_eq: sparse.csr_matrix = field(repr=False)
    b_eq: np.ndarray = field(repr=False)
    row_labels: list
    quad_pp: list
    quad_pq: list
    lb: np.ndarray = field(repr=False)
    ub: np.ndarray = field(repr=False)
    c_obj: np.ndarray = field(repr=False)
    v_min: float
    v_max: float
    slack_v: float
    n_opf_variables: int

    def objective_pu(self, x):
        return float(self.c_obj @ x)

    def objective_mw(self, x):
        return self.objective_pu(x) * self.graph.s_base / 1e6


def _loss_coeff_p(z, delta):
    """Active-power coefficient of one l term in a flow-balance row."""
    return z.real * math.cos(delta) + z.imag * math.sin(delta)


def _loss_coeff_q(z, delta):
    return z.imag * math.cos(delta) - z.real * math.sin(delta)


def _drop_coeffs(z, theta):
    """(P, Q) coefficients of the voltage-drop term 2*Re[S^pq * conj(z^pq)]."""
    c, s = math.cos(theta), math.sin(theta)
    return (
        2.0 * (z.real * c + z.imag * s),
        2.0 * (z.imag * c - z.real * s),
    )


def build_constraints(
    graph,
    angles=None,
    *,
    v_min=0.95,
    v_max=1.05,
    slack_v=1.0,
    fix_qdg=None,
    include_losses=True,
):
    """Assemble the affine rows and quadratic couplings for one feeder.

    Per branch and phase there are three equality rows: active balance,
    reactive balance, and voltage drop, each with the voltage-dependent
    load terms folded in as coefficients on the downstream bus voltage.
    ``include_losses=False`` drops every squared-current term (the
    loss-free model used for initialization). ``fix_qdg`` pins the named
    reactive dispatches by collapsing their boxes.
    """
    if include_losses and angles is None:
        raise ValueError("an angle table is required when loss terms are kept")
    index = VariableIndex(graph)
    rows = []  # list of (coeff dict, rhs, label)
    quad_pp = []
    quad_pq = []

    for br in graph.branches:
        tag = f"{br.from_bus}-{br.to_bus}"
        jbus = graph.buses[br.to_bus]
        for p in br.phases:
            # active and reactive balance at the downstream bus
            coeff_p = {index.P_id[(br.key, p)]: 1.0}
            coeff_q = {index.Q_id[(br.key, p)]: 1.0}
            rhs_p = 0.0
            rhs_q = 0.0
            if include_losses:
                for q in br.phases:
                    d = angles.at(br.key, p, q)
                    z = br.z.at(p, q)
                    if q == p:
                        lid = index.l_id[(br.key, p)]
                    else:
                        pair = (p, q) if p < q else (q, p)
                        lid = index.lx_id[(br.key, pair)]
                    coeff_p[lid] = coeff_p.get(lid, 0.0) - _loss_coeff_p(z, d)
                    coeff_q[lid] = coeff_q.get(lid, 0.0) - _loss_coeff_q(z, d)
            for child in graph.children[br.to_bus]:
                if p in child.phases:
                    coeff_p[index.P_id[(child.key, p)]] = -1.0
                    coeff_q[index.Q_id[(child.key, p)]] = -1.0
            if p in jbus.loads:
                lm = LoadModelCoefficients.from_load(jbus.loads[p])
                vid = index.v_id[(br.to_bus, p)]
                coeff_p[vid] = coeff_p.get(vid, 0.0) - lm.b_p
                coeff_q[vid] = coeff_q.get(vid, 0.0) - lm.b_q
                rhs_p += lm.a_p
                rhs_q += lm.a_q
            if p in jbus.dgs:
                rhs_p -= jbus.dgs[p].p_out
                coeff_q[index.qdg_id[(br.to_bus, p)]] = 1.0
            rows.append((coeff_p, rhs_p, f"P[{tag}.{p}]"))
            rows.append((coeff_q, rhs_q, f"Q[{tag}.{p}]"))

            # voltage drop along the branch
            coeff_v = {
                index.v_id[(br.from_bus, p)]: 1.0,
                index.v_id[(br.to_bus, p)]: -1.0,
            }
            for q in br.phases:
                z = br.z.at(p, q)
                theta = NOMINAL_ANGLE[p] - NOMINAL_ANGLE[q]
                cp, cq = _drop_coeffs(z, theta)
                pid = index.P_id[(br.key, q)]
                qid = index.Q_id[(br.key, q)]
                coeff_v[pid] = coeff_v.get(pid, 0.0) - cp
                coeff_v[qid] = coeff_v.get(qid, 0.0) - cq
                if include_losses:
                    lid = index.l_id[(br.key, q)]
                    coeff_v[lid] = coeff_v.get(lid, 0.0) + abs(z) ** 2
            if include_losses:
                for i1, q1 in enumerate(br.phases):
                    for q2 in br.phases[i1 + 1 :]:
                        d = angles.at(br.key, q1, q2)
                        g = br.z.at(p, q1) * br.z.at(p, q2).conjugate() * cmath.exp(1j * d)
                        lxid = index.lx_id[(br.key, (q1, q2))]
                        coeff_v[lxid] = coeff_v.get(lxid, 0.0) + 2.0 * g.real
            rows.append((coeff_v, 0.0, f"V[{tag}.{p}]"))

            quad_pp.append(
                QuadPP(
                    branch=br.key,
                    phase=p,
                    iP=index.P_id[(br.key, p)],
                    iQ=index.Q_id[(br.key, p)],
                    iv=index.v_id[(br.from_bus, p)],
                    il=index.l_id[(br.key, p)],
                )
            )
        for i1, p in enumerate(br.phases):
            for q in br.phases[i1 + 1 :]:
                quad_pq.append(
                    QuadPQ(
                        branch=br.key,
                        pair=(p, q),
                        ilx=index.lx_id[(br.key, (p, q))],
                        ilp=index.l_id[(br.key, p)],
                        ilq=index.l_id[(br.key, q)],
                    )
                )

    data, ri, ci = [], [], []
    b_eq = np.zeros(len(rows))
    labels = []
    for r, (coeffs, rhs, label) in enumerate(rows):
        b_eq[r] = rhs
        labels.append(label)
        for cidx, val in coeffs.items():
            ri.append(r)
            ci.append(cidx)
            data.append(val)
    A_eq = sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), index.n))

    lb = np.full(index.n, -np.inf)
    ub = np.full(index.n, np.inf)
    slack_sq = slack_v**2
    for (bus, p), idx in index.v_id.items():
        if graph.buses[bus].is_substation:
            lb[idx] = ub[idx] = slack_sq
        else:
            lb[idx] = v_min**2
            ub[idx] = v_max**2
    for br in graph.branches:
        for p in br.phases:
            idx = index.l_id[(br.key, p)]
            lb[idx] = 0.0
            ub[idx] = min(br.ampacity_sq(p), AMPACITY_SENTINEL_SQ)
        for i1, p in enumerate(br.phases):
            for q in br.phases[i1 + 1 :]:
                idx = index.lx_id[(br.key, (p, q))]
                lb[idx] = 0.0
                ub[idx] = min(
                    math.sqrt(br.ampacity_sq(p) * br.ampacity_sq(q)), AMPACITY_SENTINEL_SQ
                )
    for (bus, p), idx in index.qdg_id.items():
        qm = graph.buses[bus].dgs[p].q_max()
        lb[idx] = -qm
        ub[idx] = qm
    if fix_qdg is not None:
        for key, val in fix_qdg.items():
            if key not in index.qdg_id:
                raise KeyError(f"no generator variable at {key}")
            idx = index.qdg_id[key]
            lb[idx] = ub[idx] = val

    c_obj = np.zeros(index.n)
    sub = graph.substation
    for br in graph.children[sub]:
        for p in br.phases:
            c_obj[index.P_id[(br.key, p)]] = 1.0

    n_pinned_slack = len(graph.buses[sub].phases)
    return ConstraintSystem(
        graph=graph,
        angles=angles,
        index=index,
        A_eq=A_eq,
        b_eq=b_eq,
        row_labels=labels,
        quad_pp=quad_pp,
        quad_pq=quad_pq,
        lb=lb,
        ub=ub,
        c_obj=c_obj,
        v_min=v_min,
        v_max=v_max,
        slack_v=slack_v,
        n_opf_variables=index.n - n_pinned_slack,
    )


@dataclass
class ResidualReport:
    linear: dict
    quad_pp: dict
    quad_pq: dict

    @property
    def linear_max(self):
        return max((abs(v) for v in self.linear.values()), default=0.0)

    @property
    def quad_max(self):
        vals = [abs(v) for v in self.quad_pp.values()]
        vals += [abs(v) for v in self.quad_pq.values()]
        return max(vals, default=0.0)


def residuals(x, system):
    """Signed constraint residuals of a point (vector or OperatingPoint)."""
    if isinstance(x, OperatingPoint):
        x = system.index.to_vector(x)
    r = system.A_eq @ x - system.b_eq
    linear = {label: float(r[i]) for i, label in enumerate(system.row_labels)}
    quad_pp = {}
    for qd in system.quad_pp:
        quad_pp[(qd.branch, qd.phase)] = float(
            x[qd.iP] ** 2 + x[qd.iQ] ** 2 - x[qd.iv] * x[qd.il]
        )
    quad_pq = {}
    for qd in system.quad_pq:
        quad_pq[(qd.branch, qd.pair)] = float(x[qd.ilx] ** 2 - x[qd.ilp] * x[qd.ilq])
    return ResidualReport(linear=linear, quad_pp=quad_pp, quad_pq=quad_pq)


def operating_point_from_phasors(graph, sol, q_dg=None):
    """Map an exact phasor solution into the model's coordinates.

    Sending-end flows become V_from * conj(I), voltages and currents
    enter as squared magnitudes, and cross products as magnitude
    products, so both quadratic couplings hold exactly by construction.
    """
    q_dg = dict(q_dg or {})
    pt = OperatingPoint()
    for bus in graph.buses.values():
        for p in bus.phases:
            pt.v[(bus.name, p)] = abs(sol.V[(bus.name, p)]) ** 2
            if p in bus.dgs:
                pt.q_dg[(bus.name, p)] = q_dg.get((bus.name, p), 0.0)
    for br in graph.branches:
        for p in br.phases:
            S = sol.V[(br.from_bus, p)] * sol.I[(br.key, p)].conjugate()
            pt.P[(br.key, p)] = S.real
            pt.Q[(br.key, p)] = S.imag
            pt.l[(br.key, p)] = abs(sol.I[(br.key, p)]) ** 2
        for i1, p in enumerate(br.phases):
            for q in br.phases[i1 + 1 :]:
                pt.lx[(br.key, (p, q))] = abs(sol.I[(br.key, p)]) * abs(sol.I[(br.key, q)])
    return pt


def lindistflow_solve(graph, *, mode="optimize", v_min=0.95, v_max=1.05, slack_v=1.0):
    """Loss-free linear initializer.

    Solves the model with every squared-current term dropped, then
    back-fills l from the resulting flows so both quadratic couplings
    hold exactly at the returned point (all remaining violation sits in
    the affine rows). ``mode='optimize'`` dispatches reactive power to
    minimize substation import; ``mode='zero'`` pins it to zero.
    """
    from dopf import conic

    if mode not in ("optimize", "zero"):
        raise ValueError(f"unknown mode {mode!r}")
    fix = None
    if mode == "zero":
        fix = {key: 0.0 for key in VariableIndex(graph).qdg_id}
    system = build_constraints(
        graph, None, v_min=v_min, v_max=v_max, slack_v=slack_v, fix_qdg=fix, include_losses=False
    )
    lb = system.lb.copy()
    ub = system.ub.copy()
    for idx in system.index.l_id.values():
        lb[idx] = ub[idx] = 0.0
    for idx in system.index.lx_id.values():
        lb[idx] = ub[idx] = 0.0
    prog = conic.ConicProgram(
        n=system.index.n,
        names=system.index.names,
        c=system.c_obj,
        c0=0.0,
        A_eq=system.A_eq,
        b_eq=system.b_eq,
        A_ub=None,
        b_ub=None,
        lb=lb,
        ub=ub,
        cones=[],
    )
    report = conic.solve(prog)
    if report.status != "optimal":
        raise InfeasibleInitialization(
            f"loss-free initializer ended {report.status}: no dispatch keeps voltages in "
            f"[{v_min}, {v_max}] under the linear model"
        )
    pt = system.index.to_point(report.x)
    for br in graph.branches:
        for p in br.phases:
            vfrom = pt.v[(br.from_bus, p)]
            pt.l[(br.key, p)] = (pt.P[(br.key, p)] ** 2 + pt.Q[(br.key, p)] ** 2) / vfrom
        for i1, p in enumerate(br.phases):
            for q in br.phases[i1 + 1 :]:
                pt.lx[(br.key, (p, q))] = math.sqrt(pt.l[(br.key, p)] * pt.l[(br.key, q)])
    return pt
