import sys

import pytest

from sketchgait import synthetic


@pytest.fixture(scope="session")
def synthetic_small(tmp_path_factory):
    """10 identities, one sequence per condition, 4 frames; returns the manifest path."""
    out = tmp_path_factory.mktemp("synthetic")
    return synthetic.generate(out, identities=10, seqs_per_condition=1, frames=4, seed=0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS):
        terminalreporter.write_line(line)
