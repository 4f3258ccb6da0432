import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("TPSNET_THREADS", "1")))

# Acceptance criteria append (label, passed, detail) here; printed in the terminal summary.
CRITERIA: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(CRITERIA, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_pair():
    from tpsnet.dataset import generate_toy_domain_pair

    return generate_toy_domain_pair(5, 50, 32, 0)


@pytest.fixture(scope="session")
def small_pair():
    from tpsnet.dataset import generate_toy_domain_pair

    return generate_toy_domain_pair(3, 8, 16, 5)
