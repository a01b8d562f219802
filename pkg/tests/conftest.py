import os
import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

warnings.filterwarnings("ignore", message="The TBB threading layer")

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def small_sphere():
    from teso.synthetic import sphere

    return sphere(radius=34)


@pytest.fixture(scope="session")
def small_tree(small_sphere):
    """Quantized, textured tree of the small sphere."""
    from teso.builder import BuildConfig, build_teso
    from teso.quant import quantize_tree
    from teso.texture import sample_patches

    t = build_teso(small_sphere, BuildConfig.for_depth(10, tau=64))
    return sample_patches(quantize_tree(t), small_sphere)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
