import os

import pytest

from dopf.feeder import parse_feeder

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")

FIXTURE_NAMES = ["case4", "case6", "case13"]


def fixture_path(name):
    return os.path.join(FIXTURE_DIR, f"{name}.feeder")


def load_fixture(name):
    with open(fixture_path(name)) as fh:
        return parse_feeder(fh.read())


@pytest.fixture(scope="session")
def case4():
    return load_fixture("case4")


@pytest.fixture(scope="session")
def case6():
    return load_fixture("case6")


@pytest.fixture(scope="session")
def case13():
    return load_fixture("case13")


@pytest.fixture(scope="session", params=FIXTURE_NAMES)
def any_case(request):
    return load_fixture(request.param)


# single-phase two-bus feeder with a constant-power-style load record
# (cvr factors 0 keep the draw voltage-independent)
TWO_BUS = """
[bases]
power 1000000
voltage 1000

[bus]
sub a substation
b a

[branch]
sub b a 0.01+j0.02

[load]
b a 100000 50000 0.0 0.0
"""

# balanced three-phase line: identical self and mutual impedance entries,
# identical loads, so the exact solution is a perfect +-120 degree set
BALANCED = """
[bases]
power 1000000
voltage 1000

[bus]
sub abc substation
mid abc
end abc

[branch]
sub mid abc 0.01+j0.03 0.003+j0.009 0.01+j0.03 0.003+j0.009 0.003+j0.009 0.01+j0.03
mid end abc 0.008+j0.02 0.002+j0.006 0.008+j0.02 0.002+j0.006 0.002+j0.006 0.008+j0.02

[load]
mid a 150000 60000 2.0 2.0
mid b 150000 60000 2.0 2.0
mid c 150000 60000 2.0 2.0
end a 200000 80000 2.0 2.0
end b 200000 80000 2.0 2.0
end c 200000 80000 2.0 2.0

[dg]
end a 50000 60000
end b 50000 60000
end c 50000 60000
"""


@pytest.fixture(scope="session")
def two_bus():
    return parse_feeder(TWO_BUS)


@pytest.fixture(scope="session")
def balanced():
    return parse_feeder(BALANCED)
