import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def validation_params():
    from copula_fhmm.model import preset_params
    return preset_params("validation")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for i in range(1, 10):
        name = f"AC-{i}"
        if name in mod.RESULTS:
            ok, detail = mod.RESULTS[name]
            terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        else:
            terminalreporter.write_line(f"{name} NOT RUN")
