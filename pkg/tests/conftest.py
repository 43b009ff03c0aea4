import numpy as np
import pytest

from fsqkd.model import ChannelParams, LinkParams, ReceiverParams, TransmitterParams


def link(mu=0.29, eta_opt=0.024, c=5.0, eta_trans=0.81, misalignment=0.0, clock=1_000_000):
    """LinkParams with eta_geo back-solved from a target eta_opt."""
    return LinkParams(
        TransmitterParams(mu, clock, misalignment),
        ReceiverParams(),
        ChannelParams(eta_trans=eta_trans, eta_geo=eta_opt / eta_trans, background_c=c),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
