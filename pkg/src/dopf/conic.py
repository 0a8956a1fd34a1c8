"""Minimal deterministic solver layer for LPs and rotated-cone programs.

One program container feeds two backends: pure LPs go to HiGHS through
scipy, anything with cone memberships goes to the Clarabel interior
point solver, with each rotated cone u*w >= sum(s^2) rewritten as the
standard second-order cone ||(u - w, 2s)|| <= u + w. ``verify_primal``
re-checks a reported solution with plain numpy arithmetic so tests never
have to take a backend's word for feasibility.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse
from scipy.optimize import linprog


@dataclass
class RotatedCone:
    """Membership u*w >= sum_k s_k^2 with u, w >= 0, by variable index."""

    u: int
    w: int
    s: tuple


@dataclass
class ConicProgram:
    """min c@x + c0  s.t.  A_eq x = b_eq, A_ub x <= b_ub, lb <= x <= ub, cones."""

    n: int
    names: list = field(repr=False, default=None)
    c: np.ndarray = field(repr=False, default=None)
    c0: float = 0.0
    A_eq: sparse.spmatrix = field(repr=False, default=None)
    b_eq: np.ndarray = field(repr=False, default=None)
    A_ub: sparse.spmatrix = field(repr=False, default=None)
    b_ub: np.ndarray = field(repr=False, default=None)
    lb: np.ndarray = field(repr=False, default=None)
    ub: np.ndarray = field(repr=False, default=None)
    cones: list = field(default_factory=list)

    def name_of(self, idx):
        if self.names is not None:
            return self.names[idx]
        return f"x[{idx}]"


@dataclass
class SolveReport:
    status: str  # optimal | infeasible | unbounded | iteration-limit | numeric-failure
    x: np.ndarray = field(repr=False, default=None)
    objective: float = None
    solve_time: float = 0.0
    iterations: int = None
    solver: str = ""
    raw_status: str = ""


class SolverError(RuntimeError):
    pass


def _solve_lp(prog):
    bounds = list(zip(prog.lb, prog.ub))
    t0 = time.perf_counter()
    res = linprog(
        prog.c,
        A_ub=prog.A_ub,
        b_ub=prog.b_ub,
        A_eq=prog.A_eq,
        b_eq=prog.b_eq,
        bounds=bounds,
        method="highs",
    )
    dt = time.perf_counter() - t0
    status_map = {0: "optimal", 1: "iteration-limit", 2: "infeasible", 3: "unbounded", 4: "numeric-failure"}
    status = status_map.get(res.status, "numeric-failure")
    x = np.asarray(res.x) if res.x is not None else None
    obj = float(res.fun) + prog.c0 if res.fun is not None else None
    return SolveReport(
        status=status,
        x=x,
        objective=obj,
        solve_time=dt,
        iterations=getattr(res, "nit", None),
        solver="highs",
        raw_status=str(res.message).strip(),
    )


def _solve_socp(prog):
    # canonical form: Ax + s = b, s in K, ordered zero cone then
    # nonnegative cone then one second-order cone per rotated cone
    rows_data, rows_i, rows_j, b = [], [], [], []
    nrow = 0

    def add_row(coeffs, rhs):
        nonlocal nrow
        for j, a in coeffs:
            rows_i.append(nrow)
            rows_j.append(j)
            rows_data.append(a)
        b.append(rhs)
        nrow += 1

    n_eq = 0
    if prog.A_eq is not None and prog.A_eq.shape[0]:
        eq = sparse.coo_matrix(prog.A_eq)
        for i, j, a in zip(eq.row, eq.col, eq.data):
            rows_i.append(int(i))
            rows_j.append(int(j))
            rows_data.append(float(a))
        b.extend(np.asarray(prog.b_eq, dtype=float))
        n_eq = eq.shape[0]
        nrow = n_eq
    # pinned variables join the zero cone
    for j in range(prog.n):
        if np.isfinite(prog.lb[j]) and prog.lb[j] == prog.ub[j]:
            add_row([(j, 1.0)], prog.lb[j])
            n_eq += 1

    n_ub = 0
    if prog.A_ub is not None and prog.A_ub.shape[0]:
        ubm = sparse.coo_matrix(prog.A_ub)
        for i, j, a in zip(ubm.row, ubm.col, ubm.data):
            rows_i.append(nrow + int(i))
            rows_j.append(int(j))
            rows_data.append(float(a))
        b.extend(np.asarray(prog.b_ub, dtype=float))
        nrow += ubm.shape[0]
        n_ub += ubm.shape[0]
    for j in range(prog.n):
        lo, hi = prog.lb[j], prog.ub[j]
        if np.isfinite(lo) and lo == hi:
            continue
        if np.isfinite(hi):
            add_row([(j, 1.0)], float(hi))
            n_ub += 1
        if np.isfinite(lo):
            add_row([(j, -1.0)], -float(lo))
            n_ub += 1

    cone_spec = [clarabel.ZeroConeT(n_eq), clarabel.NonnegativeConeT(n_ub)]
    for cone in prog.cones:
        # u*w >= ||s||^2  <=>  (u + w, u - w, 2s) in SOC
        add_row([(cone.u, -1.0), (cone.w, -1.0)], 0.0)
        add_row([(cone.u, -1.0), (cone.w, 1.0)], 0.0)
        for sj in cone.s:
            add_row([(sj, -2.0)], 0.0)
        cone_spec.append(clarabel.SecondOrderConeT(2 + len(cone.s)))

    A = sparse.csc_matrix(
        (rows_data, (rows_i, rows_j)), shape=(nrow, prog.n), dtype=float
    )
    P = sparse.csc_matrix((prog.n, prog.n))
    q = np.asarray(prog.c, dtype=float)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    solver = clarabel.DefaultSolver(P, q, A, np.asarray(b, dtype=float), cone_spec, settings)
    t0 = time.perf_counter()
    sol = solver.solve()
    dt = time.perf_counter() - t0

    raw = str(sol.status)
    if raw in ("SolverStatus.Solved", "Solved", "SolverStatus.AlmostSolved", "AlmostSolved"):
        status = "optimal"
    elif "PrimalInfeasible" in raw:
        status = "infeasible"
    elif "DualInfeasible" in raw:
        status = "unbounded"
    elif "MaxIterations" in raw:
        status = "iteration-limit"
    else:
        status = "numeric-failure"
    x = np.asarray(sol.x) if status == "optimal" else None
    obj = float(sol.obj_val) + prog.c0 if status == "optimal" else None
    return SolveReport(
        status=status,
        x=x,
        objective=obj,
        solve_time=dt,
        iterations=getattr(sol, "iterations", None),
        solver="clarabel",
        raw_status=raw,
    )


def solve(prog):
    """Dispatch to the LP or cone backend; deterministic for fixed input."""
    if prog.lb is None or prog.ub is None:
        raise SolverError("program must carry explicit box bounds")
    if prog.cones:
        return _solve_socp(prog)
    return _solve_lp(prog)


@dataclass
class Violation:
    kind: str  # eq | ub | box | cone
    label: str
    amount: float


def verify_primal(prog, x, tol=1e-6):
    """Independent feasibility audit of a candidate point."""
    x = np.asarray(x, dtype=float)
    out = []
    if prog.A_eq is not None and prog.A_eq.shape[0]:
        r = prog.A_eq @ x - prog.b_eq
        for i in np.flatnonzero(np.abs(r) > tol):
            out.append(Violation("eq", f"eq[{i}]", float(abs(r[i]))))
    if prog.A_ub is not None and prog.A_ub.shape[0]:
        r = prog.A_ub @ x - prog.b_ub
        for i in np.flatnonzero(r > tol):
            out.append(Violation("ub", f"ub[{i}]", float(r[i])))
    for j in range(prog.n):
        if x[j] < prog.lb[j] - tol:
            out.append(Violation("box", prog.name_of(j), float(prog.lb[j] - x[j])))
        elif x[j] > prog.ub[j] + tol:
            out.append(Violation("box", prog.name_of(j), float(x[j] - prog.ub[j])))
    for k, cone in enumerate(prog.cones):
        u, w = x[cone.u], x[cone.w]
        ssum = float(sum(x[j] ** 2 for j in cone.s))
        if u < -tol:
            out.append(Violation("cone", f"cone[{k}].u", float(-u)))
        if w < -tol:
            out.append(Violation("cone", f"cone[{k}].w", float(-w)))
        gap = ssum - u * w
        if gap > tol:
            out.append(Violation("cone", f"cone[{k}]", gap))
    return out
