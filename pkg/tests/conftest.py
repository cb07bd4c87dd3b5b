import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rigsplat.synth import SynthConfig, generate

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

# acceptance results, criterion number -> (passed, detail); printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


SMALL = dict(width=32, height=32, n_train=6, n_setting1=2, n_setting2=2)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    """A few 32x32 frames; cheap enough for unit tests."""
    return generate(SynthConfig(**SMALL), tmp_path_factory.mktemp("small") / "data")


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    from rigsplat.dataset import load_dataset

    return load_dataset(small_dataset_dir)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """The default 64x64 synthetic fixture (200 training frames, 20 + 20 held out)."""
    return generate(SynthConfig(), tmp_path_factory.mktemp("fixture") / "data")


@pytest.fixture(scope="session")
def fixture_dataset(fixture_dir):
    from rigsplat.dataset import load_dataset

    return load_dataset(fixture_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
