import sys

import numpy as np
import pytest

from subconcepts.synthetic import GeneratorSpec, generate_synthetic_scene


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene(GeneratorSpec(n_classes=4, d_seg=8, d_q=8, n_samples=600,
                                                  seed=11))


@pytest.fixture(scope="session")
def ray_scene():
    return generate_synthetic_scene(GeneratorSpec(n_classes=3, d_seg=8, d_q=8, n_viewpoints=4,
                                                  rays_per_view=16, samples_per_ray=24, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
