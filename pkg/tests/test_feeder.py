import math

import pytest

from dopf.feeder import (
    AMPACITY_SENTINEL_SQ,
    Bus,
    DgSpec,
    FeederGraph,
    FeederSemanticError,
    FeederSyntaxError,
    FeederTopologyError,
    LoadSpec,
    PhaseMatrix,
    count_opf_variables,
    format_complex,
    parse_complex,
    parse_feeder,
    scale_loads,
    serialize_feeder,
    topological_order,
    with_dgs,
)

from conftest import TWO_BUS


MINI = """
[bases]
power 2000000
voltage 2400

[bus]
sub abc substation
n1 abc
n2 ab

[branch]
sub n1 abc 0.2+j0.5 0.05+j0.1 0.2+j0.5 0.05+j0.1 0.05+j0.1 0.2+j0.5 ampacity=300
n1 n2 ab 0.1+j0.3 0.02+j0.08 0.1+j0.3 ampacity=250,220

[load]
n1 a 100000 30000
n2 b 80000 20000 1.8 2.2

[dg]
n2 a 40000 50000
"""


def test_parse_bases_and_per_unit():
    g = parse_feeder(MINI)
    assert g.s_base == 2e6 and g.v_base == 2400.0
    z_base = 2400.0**2 / 2e6  # 2.88 ohm
    br = g.branches[0]
    assert br.z.at("a", "a") == pytest.approx((0.2 + 0.5j) / z_base)
    assert br.z.at("a", "b") == pytest.approx((0.05 + 0.1j) / z_base)
    # watts scale by the power base
    assert g.buses["n1"].loads["a"].p0 == pytest.approx(100000 / 2e6)
    assert g.buses["n2"].loads["b"].q0 == pytest.approx(20000 / 2e6)
    assert g.buses["n2"].dgs["a"].s_rated == pytest.approx(50000 / 2e6)


def test_parse_ampacity_broadcast_and_per_phase():
    g = parse_feeder(MINI)
    i_base = 2e6 / 2400.0
    br0, br1 = g.branches
    assert set(br0.ampacity) == {"a", "b", "c"}
    assert br0.ampacity["b"] == pytest.approx(300 / i_base)
    assert br1.ampacity["a"] == pytest.approx(250 / i_base)
    assert br1.ampacity["b"] == pytest.approx(220 / i_base)
    assert br1.ampacity_sq("a") == pytest.approx((250 / i_base) ** 2)


def test_ampacity_sentinel_when_undeclared():
    g = parse_feeder(TWO_BUS)
    assert g.branches[0].ampacity is None
    assert g.branches[0].ampacity_sq("a") == AMPACITY_SENTINEL_SQ


def test_default_bases_read_as_per_unit():
    g = parse_feeder(TWO_BUS)
    assert g.branches[0].z.at("a", "a") == pytest.approx(0.01 + 0.02j)
    assert g.buses["b"].loads["a"].p0 == pytest.approx(0.1)


def test_load_defaults_to_constant_power_coefficients():
    g = parse_feeder(MINI)
    ld = g.buses["n1"].loads["a"]
    assert ld.cvr_p == 0.0 and ld.cvr_q == 0.0
    ld2 = g.buses["n2"].loads["b"]
    assert (ld2.cvr_p, ld2.cvr_q) == (1.8, 2.2)


def test_serialize_round_trip():
    g = parse_feeder(MINI)
    g2 = parse_feeder(serialize_feeder(g))
    assert g2.s_base == g.s_base and g2.v_base == g.v_base
    assert set(g2.buses) == set(g.buses)
    for b2, b in zip(g2.branches, g.branches):
        assert b2.key == b.key and b2.phases == b.phases
        for p in b.phases:
            for q in b.phases:
                assert b2.z.at(p, q) == pytest.approx(b.z.at(p, q), abs=0, rel=1e-15)
        assert b2.ampacity.keys() == b.ampacity.keys()
        for p in b.ampacity:
            assert b2.ampacity[p] == pytest.approx(b.ampacity[p], rel=1e-15)
    for name, bus in g.buses.items():
        assert g2.buses[name].loads.keys() == bus.loads.keys()
        for p, ld in bus.loads.items():
            assert g2.buses[name].loads[p] == pytest.approx(
                (ld.p0, ld.q0, ld.cvr_p, ld.cvr_q)
            ) or g2.buses[name].loads[p] == ld
        assert g2.buses[name].dgs.keys() == bus.dgs.keys()


def test_parse_complex_forms():
    assert parse_complex("0.01+j0.02") == 0.01 + 0.02j
    assert parse_complex("1.5-j0.3") == 1.5 - 0.3j
    assert parse_complex("2e-3+j1e-4") == 0.002 + 0.0001j
    with pytest.raises(FeederSyntaxError):
        parse_complex("banana")
    z = 0.012345678901234 + 0.98765432109876j
    assert parse_complex(format_complex(z)) == z


def test_phase_matrix_symmetry_and_order():
    m = PhaseMatrix.from_lower_triangle(
        "abc", [1 + 1j, 2 + 2j, 3 + 3j, 4 + 4j, 5 + 5j, 6 + 6j]
    )
    assert m.at("a", "a") == 1 + 1j
    assert m.at("b", "a") == 2 + 2j
    assert m.at("a", "b") == 2 + 2j  # symmetric access
    assert m.at("c", "b") == 5 + 5j
    assert m.lower_triangle() == [1 + 1j, 2 + 2j, 3 + 3j, 4 + 4j, 5 + 5j, 6 + 6j]


def test_phase_matrix_rejects_zero_diagonal():
    with pytest.raises(FeederSemanticError):
        PhaseMatrix.from_lower_triangle("ab", [0j, 0.1j, 0.2j])


def test_phase_matrix_entry_count():
    with pytest.raises(FeederSemanticError):
        PhaseMatrix.from_lower_triangle("abc", [1 + 1j, 2 + 2j])


def test_syntax_error_carries_line_number():
    bad = TWO_BUS.replace("0.01+j0.02", "zap")
    with pytest.raises(FeederSyntaxError) as err:
        parse_feeder(bad)
    assert "line" in str(err.value)


def test_unknown_section_rejected():
    with pytest.raises(FeederSyntaxError):
        parse_feeder(TWO_BUS + "\n[transformer]\nfoo\n")


def test_comments_and_blank_lines_ignored():
    noisy = TWO_BUS.replace("[load]", "# a comment\n\n[load]")
    g = parse_feeder(noisy)
    assert g.buses["b"].loads["a"].p0 == pytest.approx(0.1)


def twobus_parts():
    g = parse_feeder(TWO_BUS)
    return list(g.buses.values()), list(g.branches)


def test_requires_exactly_one_substation():
    buses, branches = twobus_parts()
    buses[0] = Bus("sub", "a", is_substation=False)
    with pytest.raises(FeederTopologyError):
        FeederGraph(buses, branches)
    buses[0] = Bus("sub", "a", is_substation=True)
    buses[1] = Bus("b", "a", is_substation=True, loads=dict(buses[1].loads))
    with pytest.raises(FeederTopologyError):
        FeederGraph(buses, branches)


def test_branch_endpoints_must_exist():
    buses, branches = twobus_parts()
    z = PhaseMatrix.from_lower_triangle("a", [0.01 + 0.02j])
    with pytest.raises(FeederSemanticError):
        FeederGraph(buses, branches + [type(branches[0])("b", "ghost", "a", z)])


def test_radiality_rejects_extra_and_missing_branches():
    text = """
[bus]
sub a substation
x a
y a

[branch]
sub x a 0.01+j0.02
sub y a 0.01+j0.02
x y a 0.01+j0.02
"""
    with pytest.raises(FeederTopologyError):
        parse_feeder(text)
    with pytest.raises(FeederTopologyError):
        parse_feeder(
            "[bus]\nsub a substation\nx a\ny a\n\n[branch]\nsub x a 0.01+j0.02\n"
        )


def test_no_branch_into_substation():
    with pytest.raises(FeederTopologyError):
        parse_feeder("[bus]\nsub a substation\nx a\n\n[branch]\nx sub a 0.01+j0.02\n")


def test_duplicate_branch_rejected():
    text = (
        "[bus]\nsub a substation\nx a\n\n"
        "[branch]\nsub x a 0.01+j0.02\nsub x a 0.01+j0.02\n"
    )
    with pytest.raises((FeederTopologyError, FeederSemanticError)):
        parse_feeder(text)


def test_branch_phases_within_endpoints():
    text = "[bus]\nsub abc substation\nx a\n\n[branch]\nsub x ab 0.01+j0.02 0.0+j0.01 0.01+j0.02\n"
    with pytest.raises(FeederSemanticError):
        parse_feeder(text)


def test_energization_requires_parent_branch_phases():
    # bus has phase b but its feeding branch only carries a
    text = "[bus]\nsub abc substation\nx ab\n\n[branch]\nsub x a 0.01+j0.02\n"
    with pytest.raises((FeederSemanticError, FeederTopologyError)):
        parse_feeder(text)


def test_load_and_dg_phase_membership():
    with pytest.raises(FeederSemanticError):
        parse_feeder(TWO_BUS + "\n[load]\nb c 1000 0\n")
    with pytest.raises(FeederSemanticError):
        parse_feeder(TWO_BUS + "\n[dg]\nb c 1000 2000\n")


def test_dg_rating_must_cover_output():
    with pytest.raises(FeederSemanticError):
        parse_feeder(TWO_BUS + "\n[dg]\nb a 50000 40000\n")


def test_negative_load_and_cvr_rejected():
    with pytest.raises(FeederSemanticError):
        parse_feeder(TWO_BUS.replace("100000 50000", "-100000 50000"))
    with pytest.raises(FeederSemanticError):
        parse_feeder(TWO_BUS.replace("0.0 0.0", "-1.0 0.0"))


def test_dg_q_max():
    dg = DgSpec(p_out=0.04, s_rated=0.05)
    assert dg.q_max() == pytest.approx(0.03)
    assert DgSpec(p_out=0.05, s_rated=0.05).q_max() == 0.0


def test_topological_order_parent_first(any_case):
    order = topological_order(any_case)
    energized = {any_case.substation}
    for br in order:
        assert br.from_bus in energized
        energized.add(br.to_bus)
    assert len(order) == len(any_case.branches)


def test_count_opf_variables_case4(case4):
    # v: 3+3+1 (substation excluded), P/Q/l: 7 each, lx: 3+3+0, qdg: 1
    assert count_opf_variables(case4) == 7 + 21 + 6 + 1


def test_count_opf_variables_full_three_phase_chain():
    lines = ["[bus]", "sub abc substation"] + [f"n{i} abc" for i in range(1, 5)]
    lines.append("[branch]")
    tri = "0.01+j0.02 0.003+j0.006 0.01+j0.02 0.003+j0.006 0.003+j0.006 0.01+j0.02"
    prev = "sub"
    for i in range(1, 5):
        lines.append(f"{prev} n{i} abc {tri}")
        prev = f"n{i}"
    g = parse_feeder("\n".join(lines))
    assert count_opf_variables(g) == 15 * 4


def test_count_opf_variables_single_phase_chain(two_bus):
    assert count_opf_variables(two_bus) == 4


def test_count_opf_variables_matches_index(any_case):
    # the flat LP ordering also carries the pinned substation voltages
    from dopf.bfm import VariableIndex

    sub_phases = len(any_case.buses[any_case.substation].phases)
    assert count_opf_variables(any_case) + sub_phases == VariableIndex(any_case).n


def test_scale_loads(case4):
    g = scale_loads(case4, 0.5)
    for name, bus in g.buses.items():
        for p, ld in bus.loads.items():
            ref = case4.buses[name].loads[p]
            assert ld.p0 == pytest.approx(0.5 * ref.p0)
            assert ld.q0 == pytest.approx(0.5 * ref.q0)
            assert ld.cvr_p == ref.cvr_p  # slopes describe shape, not size
    # original untouched
    assert case4.buses["end"].loads["a"].p0 == pytest.approx(0.08)


def test_with_dgs_replaces_fleet(case4):
    g = with_dgs(case4, {("m2", "b"): DgSpec(0.02, 0.025)})
    assert set(g.buses["m2"].dgs) == {"b"}
    assert g.buses["end"].dgs == {}
    assert case4.buses["end"].dgs  # original untouched
