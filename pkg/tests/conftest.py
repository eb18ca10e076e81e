import os

import numpy as np
import pytest
from hypothesis import settings

from feataug import autodiff as ad

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _restore_precision():
    previous = ad.get_dtype()
    yield
    ad.set_precision("float32" if previous is np.float32 else "float64")


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    item.config.stash.setdefault(_ACCEPTANCE, []).append(f"[{status}] {marker.args[0]}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
