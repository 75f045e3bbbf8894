"""Shared, expensive fixtures: datasets and trained surrogates are built once per session."""

import time
from dataclasses import dataclass

import pytest

from meshrl import datagen, surrogate


@dataclass
class SurrogateBundle:
    model: surrogate.SurrogateModel
    result: surrogate.TrainResult
    train: list
    test: list
    seconds: float


def build_surrogate(profile: str, size: int, seed: int, epochs: int, lr: float = 1e-5,
                    batch: int = 64) -> SurrogateBundle:
    t0 = time.perf_counter()
    records = datagen.generate_dataset(datagen.get_profile(profile), size, seed)
    train, test = datagen.split_dataset(records, 0.8, seed)
    res = surrogate.train_surrogate(train, test, learning_rate=lr, epochs=epochs, batch_size=batch,
                                    seed=seed, profile=profile)
    return SurrogateBundle(res.model, res, train, test, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def s1_bundle():
    """Seed-7 S1 reference: 4000 records, 80/20 split, lr 1e-5, 200 epochs, batch 64."""
    return build_surrogate("s1", 4000, 7, 200)


@pytest.fixture(scope="session")
def s2_model():
    return build_surrogate("s2", 2000, 11, 60).model


@pytest.fixture(scope="session")
def s2_models():
    """Five S2 surrogates from independently seeded datasets, one per collaborating service."""
    return [build_surrogate("s2", 1000, 21 + k, 30).model for k in range(5)]


# --- acceptance summary ----------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.setdefault(mark.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok = all(p for _, p, _ in _CRITERIA[n])
        details = " | ".join(d for _, _, d in _CRITERIA[n] if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  ({details})" if details else ""))
