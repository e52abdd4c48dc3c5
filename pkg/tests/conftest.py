from __future__ import annotations

import numpy as np
import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_log(request):
    """Maps criterion number -> one-line PASS/FAIL summary, printed at the end."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
