"""Radial feeder model and plain-text network format.

A feeder file has five sections. ``[bases]`` declares the power base in
VA and the line-to-neutral voltage base in volts; every other section is
given in physical units (ohms, watts, vars, VA, amps) and is normalized
to per-unit on those bases at parse time. ``[bus]`` lists bus names with
their phase sets, ``[branch]`` gives the series impedance of each line
section as the row-major lower triangle of its symmetric phase matrix,
``[load]`` and ``[dg]`` attach voltage-dependent loads and inverter
units to bus phases. ``#`` starts a comment anywhere on a line.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

PHASES = "abc"

# nominal phase displacement, radians
NOMINAL_ANGLE = {"a": 0.0, "b": -2.0 * math.pi / 3.0, "c": 2.0 * math.pi / 3.0}

DEFAULT_POWER_BASE = 1.0e6  # VA
DEFAULT_VOLTAGE_BASE = 1000.0  # V line-to-neutral

# squared-current box used when a branch declares no ampacity
AMPACITY_SENTINEL_SQ = 1.0e3


class FeederError(ValueError):
    """Base class for feeder file problems."""


class FeederSyntaxError(FeederError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class FeederSemanticError(FeederError):
    pass


class FeederTopologyError(FeederError):
    pass


def _norm_phases(token, line_no=None):
    seen = []
    for ch in token:
        if ch not in PHASES:
            raise FeederSyntaxError(f"invalid phase {ch!r} in {token!r}", line_no)
        if ch in seen:
            raise FeederSyntaxError(f"duplicate phase {ch!r} in {token!r}", line_no)
        seen.append(ch)
    if not seen:
        raise FeederSyntaxError("empty phase set", line_no)
    return "".join(p for p in PHASES if p in seen)


_COMPLEX_RE = re.compile(
    r"^(?P<re>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?"
    r"(?:(?P<sign>[+-])j(?P<im>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?))?$"
)


def parse_complex(token, line_no=None):
    """Parse an ``r+jx`` impedance token into a complex number."""
    m = _COMPLEX_RE.match(token)
    if not m or (m.group("re") is None and m.group("im") is None):
        raise FeederSyntaxError(f"bad complex value {token!r}", line_no)
    re_part = float(m.group("re")) if m.group("re") is not None else 0.0
    im_part = 0.0
    if m.group("im") is not None:
        im_part = float(m.group("im"))
        if m.group("sign") == "-":
            im_part = -im_part
    return complex(re_part, im_part)


def format_complex(z):
    sign = "+" if z.imag >= 0 else "-"
    return f"{z.real!r}{sign}j{abs(z.imag)!r}"


class PhaseMatrix:
    """Symmetric complex impedance matrix over a branch's phase set."""

    def __init__(self, phases, entries):
        self.phases = phases
        self._z = {}
        for (p, q), z in entries.items():
            if p not in phases or q not in phases:
                raise FeederSemanticError(f"impedance entry ({p},{q}) outside phases {phases!r}")
            key = (p, q) if PHASES.index(p) <= PHASES.index(q) else (q, p)
            self._z[key] = z
        for p in phases:
            for q in phases:
                if self.at(p, q) is None:
                    raise FeederSemanticError(f"missing impedance entry ({p},{q})")
        for p in phases:
            if abs(self._z[(p, p)]) == 0.0:
                raise FeederSemanticError(f"zero self impedance on phase {p!r}")

    def at(self, p, q):
        key = (p, q) if PHASES.index(p) <= PHASES.index(q) else (q, p)
        return self._z.get(key)

    def lower_triangle(self):
        """Row-major lower-triangle entries, the file order."""
        out = []
        for i, p in enumerate(self.phases):
            for q in self.phases[: i + 1]:
                out.append(self.at(p, q))
        return out

    def scaled(self, factor):
        return PhaseMatrix(self.phases, {k: z * factor for k, z in self._z.items()})

    @classmethod
    def from_lower_triangle(cls, phases, values):
        k = len(phases)
        if len(values) != k * (k + 1) // 2:
            raise FeederSemanticError(
                f"expected {k * (k + 1) // 2} impedance entries for phases {phases!r}, got {len(values)}"
            )
        entries = {}
        pos = 0
        for i, p in enumerate(phases):
            for q in phases[: i + 1]:
                entries[(q, p)] = values[pos]
                pos += 1
        return cls(phases, entries)


@dataclass
class LoadSpec:
    """Spot load: constant part plus a voltage-dependent slope.

    ``p0``/``q0`` are the drawn powers at nominal voltage (per unit);
    ``cvr_p``/``cvr_q`` scale how consumption follows the squared
    voltage magnitude.
    """

    p0: float
    q0: float
    cvr_p: float = 0.0
    cvr_q: float = 0.0


@dataclass
class DgSpec:
    """Inverter-based generator: fixed active output, dispatchable q."""

    p_out: float
    s_rated: float

    def q_max(self):
        return math.sqrt(max(self.s_rated**2 - self.p_out**2, 0.0))


@dataclass
class Bus:
    name: str
    phases: str
    is_substation: bool = False
    loads: dict = field(default_factory=dict)  # phase -> LoadSpec
    dgs: dict = field(default_factory=dict)  # phase -> DgSpec


@dataclass
class Branch:
    from_bus: str
    to_bus: str
    phases: str
    z: PhaseMatrix
    ampacity: dict | None = None  # phase -> pu current bound, None when undeclared

    @property
    def key(self):
        return (self.from_bus, self.to_bus)

    def ampacity_sq(self, phase):
        """Squared-current box for one phase (sentinel when undeclared)."""
        if self.ampacity is None or phase not in self.ampacity:
            return AMPACITY_SENTINEL_SQ
        return self.ampacity[phase] ** 2


class FeederGraph:
    """Validated radial feeder: one substation, branches oriented downstream."""

    def __init__(self, buses, branches, s_base=DEFAULT_POWER_BASE, v_base=DEFAULT_VOLTAGE_BASE):
        self.buses = {b.name: b for b in buses}
        if len(self.buses) != len(buses):
            raise FeederSemanticError("duplicate bus name")
        self.branches = list(branches)
        self.s_base = float(s_base)
        self.v_base = float(v_base)
        self._validate()
        self.children = {name: [] for name in self.buses}
        self.parent = {}
        for br in self.branches:
            self.children[br.from_bus].append(br)
            self.parent[br.to_bus] = br

    @property
    def substation(self):
        return self._substation

    def bus_order(self):
        return list(self.buses)

    def branch(self, key):
        return self._branch_index[key]

    def total_load_p0(self):
        return sum(ld.p0 for bus in self.buses.values() for ld in bus.loads.values())

    def _validate(self):
        subs = [b.name for b in self.buses.values() if b.is_substation]
        if len(subs) != 1:
            raise FeederTopologyError(f"expected exactly one substation, found {len(subs)}")
        self._substation = subs[0]
        if self.s_base <= 0 or self.v_base <= 0:
            raise FeederSemanticError("bases must be positive")

        self._branch_index = {}
        incoming = {name: 0 for name in self.buses}
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self.buses:
                    raise FeederSemanticError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end!r}")
            if br.from_bus == br.to_bus:
                raise FeederTopologyError(f"self-loop at bus {br.from_bus!r}")
            if br.to_bus == self._substation:
                raise FeederTopologyError(f"branch {br.from_bus}-{br.to_bus} flows into the substation")
            pair = frozenset((br.from_bus, br.to_bus))
            if pair in {frozenset(k) for k in self._branch_index}:
                raise FeederTopologyError(f"duplicate branch between {br.from_bus!r} and {br.to_bus!r}")
            self._branch_index[br.key] = br
            incoming[br.to_bus] += 1
            for p in br.phases:
                for end in (br.from_bus, br.to_bus):
                    if p not in self.buses[end].phases:
                        raise FeederSemanticError(
                            f"branch {br.from_bus}-{br.to_bus} carries phase {p!r} missing at bus {end!r}"
                        )
            if br.z.phases != br.phases:
                raise FeederSemanticError(f"impedance phases mismatch on branch {br.from_bus}-{br.to_bus}")
            if br.ampacity is not None:
                for p, a in br.ampacity.items():
                    if p not in br.phases:
                        raise FeederSemanticError(
                            f"ampacity on phase {p!r} not carried by branch {br.from_bus}-{br.to_bus}"
                        )
                    if a <= 0:
                        raise FeederSemanticError(f"nonpositive ampacity on branch {br.from_bus}-{br.to_bus}")

        if len(self.branches) != len(self.buses) - 1:
            raise FeederTopologyError(
                f"radial feeder needs {len(self.buses) - 1} branches for {len(self.buses)} buses, got {len(self.branches)}"
            )
        for name, cnt in incoming.items():
            if name == self._substation:
                continue
            if cnt != 1:
                raise FeederTopologyError(f"bus {name!r} has {cnt} feeding branches, expected 1")

        # reachability (with the edge count this certifies a tree)
        reached = {self._substation}
        frontier = [self._substation]
        adjacency = {}
        for br in self.branches:
            adjacency.setdefault(br.from_bus, []).append(br.to_bus)
        while frontier:
            nxt = []
            for b in frontier:
                for c in adjacency.get(b, ()):
                    if c not in reached:
                        reached.add(c)
                        nxt.append(c)
            frontier = nxt
        missing = set(self.buses) - reached
        if missing:
            raise FeederTopologyError(f"buses unreachable from substation: {sorted(missing)}")

        # every phase of a downstream bus must arrive through its feeding branch
        for br in self.branches:
            bus = self.buses[br.to_bus]
            dead = set(bus.phases) - set(br.phases)
            if dead:
                raise FeederTopologyError(
                    f"phases {sorted(dead)} of bus {bus.name!r} not energized by branch {br.from_bus}-{br.to_bus}"
                )

        for bus in self.buses.values():
            for p, ld in bus.loads.items():
                if p not in bus.phases:
                    raise FeederSemanticError(f"load on phase {p!r} missing at bus {bus.name!r}")
                if ld.p0 < 0:
                    raise FeederSemanticError(f"negative active load at bus {bus.name!r} phase {p!r}")
                if ld.cvr_p < 0 or ld.cvr_q < 0:
                    raise FeederSemanticError(f"negative voltage-dependence factor at bus {bus.name!r}")
            for p, dg in bus.dgs.items():
                if p not in bus.phases:
                    raise FeederSemanticError(f"generator on phase {p!r} missing at bus {bus.name!r}")
                if dg.s_rated <= 0:
                    raise FeederSemanticError(f"nonpositive inverter rating at bus {bus.name!r}")
                if dg.p_out < 0 or dg.p_out > dg.s_rated:
                    raise FeederSemanticError(
                        f"generator output outside [0, rating] at bus {bus.name!r} phase {p!r}"
                    )


def parse_feeder(text):
    """Parse feeder text into a validated :class:`FeederGraph` in per-unit."""
    sections = {"bases": [], "bus": [], "branch": [], "load": [], "dg": []}
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in sections:
                raise FeederSyntaxError(f"unknown section [{name}]", line_no)
            current = name
            continue
        if current is None:
            raise FeederSyntaxError("record before any section header", line_no)
        sections[current].append((line_no, line.split()))

    s_base = DEFAULT_POWER_BASE
    v_base = DEFAULT_VOLTAGE_BASE
    for line_no, tok in sections["bases"]:
        if len(tok) != 2:
            raise FeederSyntaxError("bases record needs: <power|voltage> <value>", line_no)
        key, val = tok
        try:
            value = float(val)
        except ValueError:
            raise FeederSyntaxError(f"bad number {val!r}", line_no) from None
        if key == "power":
            s_base = value
        elif key == "voltage":
            v_base = value
        else:
            raise FeederSyntaxError(f"unknown base {key!r}", line_no)
    if s_base <= 0 or v_base <= 0:
        raise FeederSemanticError("bases must be positive")
    z_base = v_base**2 / s_base
    i_base = s_base / v_base

    buses = []
    byname = {}
    for line_no, tok in sections["bus"]:
        if len(tok) not in (2, 3):
            raise FeederSyntaxError("bus record needs: <name> <phases> [substation]", line_no)
        name = tok[0]
        phases = _norm_phases(tok[1], line_no)
        is_sub = False
        if len(tok) == 3:
            if tok[2].lower() != "substation":
                raise FeederSyntaxError(f"unknown bus flag {tok[2]!r}", line_no)
            is_sub = True
        if name in byname:
            raise FeederSemanticError(f"duplicate bus {name!r}")
        bus = Bus(name=name, phases=phases, is_substation=is_sub)
        byname[name] = bus
        buses.append(bus)
    if not buses:
        raise FeederSemanticError("no buses declared")

    branches = []
    for line_no, tok in sections["branch"]:
        if len(tok) < 4:
            raise FeederSyntaxError("branch record needs: <from> <to> <phases> <z entries...>", line_no)
        from_bus, to_bus = tok[0], tok[1]
        phases = _norm_phases(tok[2], line_no)
        rest = tok[3:]
        ampacity = None
        if rest and rest[-1].startswith("ampacity="):
            amp_tok = rest[-1][len("ampacity=") :]
            rest = rest[:-1]
            try:
                amps = [float(a) for a in amp_tok.split(",")]
            except ValueError:
                raise FeederSyntaxError(f"bad ampacity list {amp_tok!r}", line_no) from None
            if len(amps) == 1:
                amps = amps * len(phases)
            if len(amps) != len(phases):
                raise FeederSyntaxError(
                    f"ampacity list has {len(amps)} entries for {len(phases)} phases", line_no
                )
            ampacity = {p: a / i_base for p, a in zip(phases, amps)}
        need = len(phases) * (len(phases) + 1) // 2
        if len(rest) != need:
            raise FeederSyntaxError(
                f"expected {need} impedance entries for phases {phases!r}, got {len(rest)}", line_no
            )
        values = [parse_complex(t, line_no) / z_base for t in rest]
        try:
            zmat = PhaseMatrix.from_lower_triangle(phases, values)
        except FeederSemanticError as exc:
            raise FeederSemanticError(f"branch {from_bus}-{to_bus}: {exc}") from None
        branches.append(Branch(from_bus, to_bus, phases, zmat, ampacity))

    for line_no, tok in sections["load"]:
        if len(tok) not in (4, 6):
            raise FeederSyntaxError(
                "load record needs: <bus> <phase> <p_watts> <q_vars> [<cvr_p> <cvr_q>]", line_no
            )
        name, phase = tok[0], _norm_phases(tok[1], line_no)
        if len(phase) != 1:
            raise FeederSyntaxError("load record attaches to a single phase", line_no)
        if name not in byname:
            raise FeederSemanticError(f"load references unknown bus {name!r}")
        try:
            p0 = float(tok[2]) / s_base
            q0 = float(tok[3]) / s_base
            cvr_p = float(tok[4]) if len(tok) == 6 else 0.0
            cvr_q = float(tok[5]) if len(tok) == 6 else 0.0
        except ValueError:
            raise FeederSyntaxError("bad number in load record", line_no) from None
        if phase in byname[name].loads:
            raise FeederSemanticError(f"duplicate load at bus {name!r} phase {phase!r}")
        byname[name].loads[phase] = LoadSpec(p0=p0, q0=q0, cvr_p=cvr_p, cvr_q=cvr_q)

    for line_no, tok in sections["dg"]:
        if len(tok) != 4:
            raise FeederSyntaxError("dg record needs: <bus> <phase> <p_watts> <s_rated_va>", line_no)
        name, phase = tok[0], _norm_phases(tok[1], line_no)
        if len(phase) != 1:
            raise FeederSyntaxError("dg record attaches to a single phase", line_no)
        if name not in byname:
            raise FeederSemanticError(f"dg references unknown bus {name!r}")
        try:
            p_out = float(tok[2]) / s_base
            s_rated = float(tok[3]) / s_base
        except ValueError:
            raise FeederSyntaxError("bad number in dg record", line_no) from None
        if phase in byname[name].dgs:
            raise FeederSemanticError(f"duplicate generator at bus {name!r} phase {phase!r}")
        byname[name].dgs[phase] = DgSpec(p_out=p_out, s_rated=s_rated)

    return FeederGraph(buses, branches, s_base=s_base, v_base=v_base)


def serialize_feeder(graph):
    """Render a graph back to feeder text (physical units, full precision)."""
    out = ["[bases]", f"power {graph.s_base!r}", f"voltage {graph.v_base!r}", "", "[bus]"]
    for bus in graph.buses.values():
        flag = " substation" if bus.is_substation else ""
        out.append(f"{bus.name} {bus.phases}{flag}")
    z_base = graph.v_base**2 / graph.s_base
    i_base = graph.s_base / graph.v_base
    out += ["", "[branch]"]
    for br in graph.branches:
        ztoks = " ".join(format_complex(z * z_base) for z in br.z.lower_triangle())
        amp = ""
        if br.ampacity is not None:
            amp = " ampacity=" + ",".join(repr(br.ampacity[p] * i_base) for p in br.phases)
        out.append(f"{br.from_bus} {br.to_bus} {br.phases} {ztoks}{amp}")
    loads = [
        (bus.name, p, ld)
        for bus in graph.buses.values()
        for p, ld in bus.loads.items()
    ]
    if loads:
        out += ["", "[load]"]
        for name, p, ld in loads:
            out.append(
                f"{name} {p} {ld.p0 * graph.s_base!r} {ld.q0 * graph.s_base!r} {ld.cvr_p!r} {ld.cvr_q!r}"
            )
    dgs = [(bus.name, p, dg) for bus in graph.buses.values() for p, dg in bus.dgs.items()]
    if dgs:
        out += ["", "[dg]"]
        for name, p, dg in dgs:
            out.append(f"{name} {p} {dg.p_out * graph.s_base!r} {dg.s_rated * graph.s_base!r}")
    return "\n".join(out) + "\n"


def topological_order(graph):
    """Branches ordered parent-first from the substation outward."""
    order = []
    stack = list(reversed(graph.children[graph.substation]))
    while stack:
        br = stack.pop()
        order.append(br)
        stack.extend(reversed(graph.children[br.to_bus]))
    return order


def count_opf_variables(graph):
    """Decision-variable count of the branch-flow OPF.

    Per branch and phase: one active flow, one reactive flow, one squared
    current; per branch and unordered phase pair: one current cross
    product; per non-substation bus and phase: one squared voltage; plus
    one reactive dispatch per generator phase.
    """
    n = 0
    for br in graph.branches:
        k = len(br.phases)
        n += 3 * k + k * (k - 1) // 2
    for bus in graph.buses.values():
        if not bus.is_substation:
            n += len(bus.phases)
        n += len(bus.dgs)
    return n


def scale_loads(graph, factor):
    """New graph with every load's constant part scaled by ``factor``."""
    buses = []
    for bus in graph.buses.values():
        loads = {
            p: LoadSpec(ld.p0 * factor, ld.q0 * factor, ld.cvr_p, ld.cvr_q)
            for p, ld in bus.loads.items()
        }
        buses.append(Bus(bus.name, bus.phases, bus.is_substation, loads, dict(bus.dgs)))
    return FeederGraph(buses, graph.branches, graph.s_base, graph.v_base)


def with_dgs(graph, dg_map):
    """New graph whose generators are exactly ``dg_map``: (bus, phase) -> DgSpec."""
    buses = []
    for bus in graph.buses.values():
        dgs = {p: spec for (name, p), spec in dg_map.items() if name == bus.name}
        buses.append(Bus(bus.name, bus.phases, bus.is_substation, dict(bus.loads), dgs))
    return FeederGraph(buses, graph.branches, graph.s_base, graph.v_base)
