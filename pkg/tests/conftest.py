import numpy as np
import pytest

from cnnforge.engine import DNL_KINDS, IntegrationConfig, TemplateSet


def random_template(rng, scale=1.0, name="rand", extended=True, t_final=None):
    """Random template with entries in [-scale, scale]; C and D zero unless ``extended``."""
    z = np.zeros((3, 3))
    return TemplateSet(
        name,
        A=rng.uniform(-scale, scale, (3, 3)),
        B=rng.uniform(-scale, scale, (3, 3)),
        C=rng.uniform(-scale, scale, (3, 3)) if extended else z,
        D=rng.uniform(-scale, scale, (3, 3)) if extended else z,
        d_nl=DNL_KINDS[rng.integers(3)],
        bias=rng.uniform(-scale, scale),
        t_final=t_final if t_final is not None else float(rng.choice([0.25, 0.5, 1.0])),
    )


def center_only(value):
    m = np.zeros((3, 3))
    m[1, 1] = value
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def rk4():
    return IntegrationConfig(dt=0.05, method="rk4")


# -- acceptance report ----------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed or (report.when == "setup" and report.skipped):
        previous = _CRITERIA.get(name)
        if previous != "FAIL":
            _CRITERIA[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda n: int(n.split("_")[2])
    for name in sorted(_CRITERIA, key=key):
        number, title = key(name), " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {number:2d} {_CRITERIA[name]}: {title}")
