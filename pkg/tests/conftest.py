import numpy as np
import pytest

from organseg.catalog import build_catalog, phantom_catalog_config
from organseg.phantom import default_phantom_spec, generate_case


@pytest.fixture(scope="session")
def catalog():
    return build_catalog(phantom_catalog_config())


@pytest.fixture(scope="session")
def spec():
    return default_phantom_spec()


@pytest.fixture(scope="session")
def corpus(catalog, spec):
    """3 sources x 7 cases."""
    return [generate_case(catalog, spec, r, s, case_id=f"r{r}_s{s:03d}")
            for r in range(3) for s in range(7)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
