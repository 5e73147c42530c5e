import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcapvision import synth
from pcapvision.trainer import LabeledSet, TrainConfig, train_and_calibrate

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = dict(item.user_properties).get("detail", "")
        _criteria.append((mark.args[0], mark.args[1], rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    grouped = {}
    for n, title, outcome, detail in _criteria:
        g = grouped.setdefault(n, [title, True, []])
        g[1] = g[1] and outcome == "passed"
        if detail:
            g[2].append(detail)
    for n in sorted(grouped):
        title, ok, details = grouped[n]
        line = f"criterion {n:>2}  {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(details)}]" if details else ""))


@pytest.fixture(scope="session")
def desk():
    profile, spec = synth.scaled_profile(0)
    return profile, spec


@pytest.fixture(scope="session")
def desk_sets(desk):
    profile, _ = desk
    train = LabeledSet(synth.generate(profile, 100, 100, day=0, stream=0), "train")
    val = LabeledSet(synth.generate(profile, 25, 25, day=0, stream=1), "validation")
    test = LabeledSet(synth.generate(profile, 25, 25, day=0, stream=2), "test")
    return train, val, test


@pytest.fixture(scope="session")
def desk_trained(desk, desk_sets):
    """Scratch-trained desk model (100-epoch cap) plus wall time."""
    _, spec = desk
    train, val, _ = desk_sets
    t0 = time.perf_counter()
    model, history = train_and_calibrate(spec, train, val, TrainConfig(max_epochs=100, patience=16, seed=0))
    return model, history, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
