import numpy as np
import pytest

from angioseg.synth import SynthConfig, generate_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sequence():
    """A short default synthetic sequence with its ground truth."""
    return generate_sequence(SynthConfig(seed=7))


def textured(shape, seed=0, sigma=2.0):
    """Smooth random texture in [0.1, 0.9] (flow and morphology tests)."""
    from scipy import ndimage
    r = np.random.default_rng(seed).random(shape)
    t = ndimage.gaussian_filter(r, sigma, mode="wrap")
    t = (t - t.min()) / (t.max() - t.min())
    return 0.1 + 0.8 * t


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the session

_criteria: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[props["criterion"]] = (report.outcome, props.get("summary", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, summary = _criteria[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"criterion {n:>2}: {verdict}  {summary}")
