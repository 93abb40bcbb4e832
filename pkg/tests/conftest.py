import numpy as np
import pytest
import torch

from cascade_sct.phantom import PhantomSpec, generate_phantom

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(dims=(32, 32, 32), shell_thickness_vox=2)


@pytest.fixture(scope="session")
def default_case():
    return generate_phantom(PhantomSpec(), seed=3)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            for key, value in getattr(rep, "user_properties", ()):
                if key == "acceptance" and getattr(rep, "when", "call") == "call":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines)):
            terminalreporter.write_line(line)
