"""Three-phase unbalanced distribution OPF toolkit.

Solves reactive-dispatch OPF on radial feeders with a linearized
branch-flow model, via either a penalized sequential LP or an
iteratively tightened second-order cone program, and validates every
dispatch against an exact forward-backward-sweep power flow.
"""

from dopf.feeder import (
    Branch,
    Bus,
    DgSpec,
    FeederError,
    FeederGraph,
    FeederSemanticError,
    FeederSyntaxError,
    FeederTopologyError,
    LoadSpec,
    PhaseMatrix,
    count_opf_variables,
    parse_feeder,
    serialize_feeder,
    topological_order,
)
from dopf.powerflow import (
    AngleTable,
    DispatchReport,
    PhasorSolution,
    PowerFlowDiverged,
    approximation_error_report,
    extract_angle_table,
    sweep_powerflow,
    validate_dispatch,
)
from dopf.bfm import (
    ConstraintSystem,
    LoadModelCoefficients,
    OperatingPoint,
    build_constraints,
    lindistflow_solve,
    operating_point_from_phasors,
    residuals,
)
from dopf.conic import ConicProgram, RotatedCone, SolveReport, solve, verify_primal
from dopf.pslp import PslpSettings, PslpResult, run_pslp
from dopf.isocp import IsocpSettings, IsocpResult, compute_gap, run_isocp

__version__ = "0.1.0"
