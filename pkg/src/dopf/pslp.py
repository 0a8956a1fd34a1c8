"""Sequential LP dispatch solver with elastic feasibility penalties.

Each outer iteration replaces the two quadratic couplings with their
first-order expansions around the incumbent point, wraps every equality
row in a nonnegative elastic pair priced into the objective, bounds the
step componentwise, and solves the resulting LP. The step bound adapts
to the sign of the objective change between iterates; convergence is
declared when that change stalls.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from dopf import conic
from dopf.bfm import build_constraints, lindistflow_solve, residuals
from dopf.powerflow import extract_angle_table


class DegenerateLinearization(RuntimeError):
    """Expansion point has a vanishing flow magnitude where a ratio needs it."""


@dataclass
class PslpSettings:
    tol: float = 1e-4  # objective-change stall threshold, per unit
    step0: float = 0.01  # initial componentwise step bound
    penalty: float = 1e4  # elastic price
    max_iters: int = 50
    adaptive_steps: bool = True  # False: plain sequential LP, fixed bound
    invert_step_rule: bool = False  # True: grow on improvement instead
    step_floor: float = 1e-8
    floor_limit: int = 5  # consecutive floored iterations before giving up
    regularize: bool = True  # rescue vanishing-flow ratio rows
    init_dispatch: str = "optimize"  # or "zero"
    v_min: float = 0.95
    v_max: float = 1.05
    slack_v: float = 1.0


@dataclass
class PslpIteration:
    k: int
    objective_pu: float
    objective_mw: float
    eps: float  # previous objective minus this one
    step: float
    elastic_mass: float
    quad_max: float
    lp_status: str
    solve_time: float


@dataclass
class PslpResult:
    converged: bool
    iterations: int
    point: object
    dispatch: dict
    objective_pu: float
    objective_mw: float
    initial_objective_mw: float
    trace: list
    regularized: set
    reason: str
    system: object = field(repr=False, default=None)

    @property
    def final_eps(self):
        return self.trace[-1].eps if self.trace else 0.0


def linearize_quadratics(x, system, regularize=False):
    """First-order rows for both quadratic couplings at expansion point x.

    Per branch phase, the squared current is expanded as an affine
    function of its own flows and sending voltage; per phase pair, the
    cross product as an affine combination of the two squared currents
    whose weights are flow-magnitude ratios. Every row is homogeneous
    (coefficients dot the full variable vector to zero) and tangent: at
    the expansion point it reproduces the quadratic's own value.

    Returns (rows, flagged): rows as (coeffs dict, label) and the set of
    branch pairs whose ratios needed the small-flow rescue. Without
    ``regularize`` a vanishing flow magnitude raises
    :class:`DegenerateLinearization`.
    """
    idx = system.index
    rows = []
    flagged = set()
    for qd in system.quad_pp:
        P0, Q0, v0 = x[qd.iP], x[qd.iQ], x[qd.iv]
        if v0 < 1e-9:
            raise DegenerateLinearization(
                f"vanishing sending voltage on branch {qd.branch} phase {qd.phase!r}"
            )
        s0sq = P0**2 + Q0**2
        coeffs = {
            qd.il: 1.0,
            qd.iP: -2.0 * P0 / v0,
            qd.iQ: -2.0 * Q0 / v0,
            qd.iv: s0sq / v0**2,
        }
        rows.append((coeffs, f"lin_l[{qd.branch[0]}-{qd.branch[1]}.{qd.phase}]"))
    for qd in system.quad_pq:
        ipP = next(q for q in system.quad_pp if q.branch == qd.branch and q.phase == qd.pair[0])
        ipQ = next(q for q in system.quad_pp if q.branch == qd.branch and q.phase == qd.pair[1])
        s0p = math.hypot(x[ipP.iP], x[ipP.iQ])
        s0q = math.hypot(x[ipQ.iP], x[ipQ.iQ])
        v0p, v0q = x[ipP.iv], x[ipQ.iv]
        if min(v0p, v0q) < 1e-9:
            raise DegenerateLinearization(
                f"vanishing sending voltage on branch {qd.branch} pair {qd.pair}"
            )
        if min(s0p, s0q) < 1e-9:
            if not regularize:
                raise DegenerateLinearization(
                    f"vanishing flow magnitude on branch {qd.branch} pair {qd.pair}"
                )
            flagged.add((qd.branch, qd.pair))
            s0p = max(s0p, 1e-6)
            s0q = max(s0q, 1e-6)
        r_p = (s0q / s0p) * math.sqrt(v0p / v0q)
        r_q = (s0p / s0q) * math.sqrt(v0q / v0p)
        coeffs = {
            qd.ilx: 1.0,
            qd.ilp: -0.5 * r_p,
            qd.ilq: -0.5 * r_q,
        }
        rows.append(
            (coeffs, f"lin_lx[{qd.branch[0]}-{qd.branch[1]}.{qd.pair[0]}{qd.pair[1]}]")
        )
    return rows, flagged


def build_pslp_lp(system, x_k, step, penalty, regularize=True):
    """Assemble one elastic LP around x_k with componentwise step bound.

    Variables are [dx, m, n] where m, n >= 0 absorb the signed residual
    of every equality row (affine rows and linearized quadratics alike):
    row(x_k) + grad . dx = m - n. The step box intersects the variable
    boxes shifted to the incumbent.
    """
    idx = system.index
    n = idx.n
    if np.any(x_k < system.lb - 1e-6) or np.any(x_k > system.ub + 1e-6):
        worst = int(np.argmax(np.maximum(system.lb - x_k, x_k - system.ub)))
        raise ValueError(f"incumbent outside its box at {idx.names[worst]}")
    x_k = np.clip(x_k, system.lb, system.ub)

    lin_rows, flagged = linearize_quadratics(x_k, system, regularize=regularize)
    m_aff = system.A_eq.shape[0]
    m_all = m_aff + len(lin_rows)

    A_aff = sparse.hstack(
        [system.A_eq, -sparse.eye(m_aff, m_all, k=0), sparse.eye(m_aff, m_all, k=0)],
        format="csr",
    )
    rhs_aff = -(system.A_eq @ x_k - system.b_eq)

    data, ri, ci = [], [], []
    rhs_lin = np.zeros(len(lin_rows))
    labels = list(system.row_labels)
    for r, (coeffs, label) in enumerate(lin_rows):
        labels.append(label)
        val0 = 0.0
        for j, a in coeffs.items():
            ri.append(r)
            ci.append(j)
            data.append(a)
            val0 += a * x_k[j]
        rhs_lin[r] = -val0
    A_lin_dx = sparse.csr_matrix((data, (ri, ci)), shape=(len(lin_rows), n))
    A_lin = sparse.hstack(
        [
            A_lin_dx,
            -sparse.eye(len(lin_rows), m_all, k=m_aff),
            sparse.eye(len(lin_rows), m_all, k=m_aff),
        ],
        format="csr",
    )

    A_eq = sparse.vstack([A_aff, A_lin], format="csr")
    b_eq = np.concatenate([rhs_aff, rhs_lin])

    lb = np.concatenate([np.maximum(-step, system.lb - x_k), np.zeros(2 * m_all)])
    ub = np.concatenate(
        [np.minimum(step, system.ub - x_k), np.full(2 * m_all, np.inf)]
    )
    c = np.concatenate([system.c_obj, np.full(2 * m_all, penalty)])

    names = [f"d.{nm}" for nm in idx.names]
    names += [f"m[{i}]" for i in range(m_all)] + [f"n[{i}]" for i in range(m_all)]
    prog = conic.ConicProgram(
        n=n + 2 * m_all,
        names=names,
        c=c,
        c0=0.0,
        A_eq=A_eq,
        b_eq=b_eq,
        A_ub=None,
        b_ub=None,
        lb=lb,
        ub=ub,
        cones=[],
    )
    meta = {"n_vars": n, "n_rows": m_all, "labels": labels, "flagged": flagged}
    return prog, meta


def run_pslp(graph, settings=None, *, fix_qdg=None, system=None, x0=None):
    """Full solver loop from the loss-free initializer.

    Convergence: absolute objective change below ``settings.tol``. The
    step bound halves after an improving iteration and doubles otherwise
    (``invert_step_rule`` swaps the orientation, ``adaptive_steps=False``
    freezes it). Hitting the step floor ``floor_limit`` times in a row
    aborts as non-converged.
    """
    settings = settings or PslpSettings()
    if system is None:
        angles = extract_angle_table(graph)
        system = build_constraints(
            graph,
            angles,
            v_min=settings.v_min,
            v_max=settings.v_max,
            slack_v=settings.slack_v,
            fix_qdg=fix_qdg,
        )
    idx = system.index
    if x0 is None:
        x0 = lindistflow_solve(
            graph,
            mode=settings.init_dispatch,
            v_min=settings.v_min,
            v_max=settings.v_max,
            slack_v=settings.slack_v,
        )
        if fix_qdg:
            for key, val in fix_qdg.items():
                x0.q_dg[key] = val
    x = x0 if isinstance(x0, np.ndarray) else idx.to_vector(x0)
    x = np.clip(x, system.lb, system.ub)

    f_prev = system.objective_pu(x)
    initial_mw = f_prev * graph.s_base / 1e6
    step = settings.step0
    trace = []
    regularized = set()
    converged = False
    reason = "iteration limit"
    floor_hits = 0

    for k in range(1, settings.max_iters + 1):
        t0 = time.perf_counter()
        prog, meta = build_pslp_lp(
            system, x, step, settings.penalty, regularize=settings.regularize
        )
        report = conic.solve(prog)
        dt = time.perf_counter() - t0
        regularized |= meta["flagged"]
        if report.status != "optimal":
            reason = f"LP ended {report.status} at iteration {k}"
            trace.append(
                PslpIteration(k, f_prev, f_prev * graph.s_base / 1e6, math.nan, step, math.nan, math.nan, report.status, dt)
            )
            break
        nvar = meta["n_vars"]
        dx = report.x[:nvar]
        elastic_mass = float(np.sum(report.x[nvar:]))
        x_new = np.clip(x + dx, system.lb, system.ub)
        f_new = system.objective_pu(x_new)
        eps = f_prev - f_new
        quad_max = residuals(x_new, system).quad_max
        trace.append(
            PslpIteration(
                k=k,
                objective_pu=f_new,
                objective_mw=f_new * graph.s_base / 1e6,
                eps=eps,
                step=step,
                elastic_mass=elastic_mass,
                quad_max=quad_max,
                lp_status=report.status,
                solve_time=dt,
            )
        )
        x = x_new
        f_prev = f_new
        if abs(eps) < settings.tol:
            converged = True
            reason = "objective change below tolerance"
            break
        if settings.adaptive_steps:
            halve = (eps > 0) if not settings.invert_step_rule else (eps <= 0)
            step = step / 2.0 if halve else step * 2.0
            if step < settings.step_floor:
                step = settings.step_floor
                floor_hits += 1
                if floor_hits >= settings.floor_limit:
                    reason = "step bound pinned at floor"
                    break
            else:
                floor_hits = 0

    point = idx.to_point(x)
    dispatch = {key: point.q_dg[key] for key in idx.qdg_id}
    return PslpResult(
        converged=converged,
        iterations=len(trace),
        point=point,
        dispatch=dispatch,
        objective_pu=f_prev,
        objective_mw=f_prev * graph.s_base / 1e6,
        initial_objective_mw=initial_mw,
        trace=trace,
        regularized=regularized,
        reason=reason,
        system=system,
    )
