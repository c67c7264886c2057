import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def row_scene():
    """Ten-tree two-side scene: 147 apples in 36 canopy and 4 ground clusters."""
    from applecount.synthbench.scene import SceneSpec, render_row_scene

    return render_row_scene(SceneSpec(seed=1), keep_ids=True)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines, which are otherwise captured."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines.items()):
            terminalreporter.write_line(line)
