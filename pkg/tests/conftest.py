import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic capture shared by the integration tests."""
    from headavatar.faceproxy import SynthConfig, load_dataset, synth_dataset

    root = tmp_path_factory.mktemp("tiny")
    synth_dataset(SynthConfig(n_frames=6, n_test=2, image_size=32), 3, str(root))
    return load_dataset(str(root))


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record one 'criterion N: PASS|FAIL detail' line; all lines are repeated in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
