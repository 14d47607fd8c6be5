import time

import numpy as np
import pytest

from omnifuse import tensor as T
from omnifuse.adapters import AdapterVariant
from omnifuse.decoder import DecoderConfig, Vocabulary
from omnifuse.model import TilingConfig, build_model
from omnifuse.vision import TOY_ENCODERS

_acceptance: dict[int, dict] = {}


def _entry(number, title):
    return _acceptance.setdefault(number, {"title": title, "passed": True, "tests": 0,
                                           "seconds": 0.0, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    entry = _entry(*marker.args)
    if report.when == "call":
        entry["tests"] += 1
        entry["seconds"] += report.duration
    if report.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        status = "PASS" if e["passed"] and e["tests"] else "FAIL"
        terminalreporter.write_line(
            f"AC{number:>2} {status}  {e['title']}  ({e['tests']} tests, {e['seconds']:.1f}s)"
        )
        for text in e["notes"]:
            terminalreporter.write_line(f"      {text}")


@pytest.fixture(autouse=True)
def _f64():
    T.set_precision("f64")
    yield
    T.set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def toy_model(vocab):
    """Small end-to-end model: cliplike encoder, MLP projector, 2-layer width-16 decoder."""
    def make(variant=None, encoders=("cliplike",), width=16, layers=2, tiling=None, seed=0):
        variant = variant or AdapterVariant("mlp_projector")
        cfg = DecoderConfig(layers, width, 4, len(vocab), 2048)
        return build_model([TOY_ENCODERS[e] for e in encoders], variant, cfg,
                           tiling or TilingConfig(), seed)
    return make


@pytest.fixture
def note(request):
    """Attach an observation to the acceptance summary of the current test."""
    marker = request.node.get_closest_marker("acceptance")

    def add(text):
        if marker is not None:
            _entry(*marker.args)["notes"].append(text)
    return add


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


@pytest.fixture
def timer():
    return Timer
