import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hevcs.admm import AdmmConfig, run  # noqa: E402
from hevcs.baselines import run_without_bes, uncontrolled_schedule  # noqa: E402
from hevcs.scenario import ieee13_scenario  # noqa: E402


# the shipped IEEE-13 case is solved once per session and shared by every module that needs it

@pytest.fixture(scope="session")
def ieee13():
    return ieee13_scenario()


@pytest.fixture(scope="session")
def ieee13_ucc(ieee13):
    return uncontrolled_schedule(ieee13)


@pytest.fixture(scope="session")
def ieee13_cc1(ieee13):
    res = run(ieee13, AdmmConfig())
    res.method = "cc1"
    return res


@pytest.fixture(scope="session")
def ieee13_cc2(ieee13):
    return run_without_bes(ieee13, AdmmConfig())


_SLOW_FIXTURES = {"ieee13_ucc", "ieee13_cc1", "ieee13_cc2", "ieee13_central"}


def pytest_collection_modifyitems(items):
    for item in items:
        if _SLOW_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
