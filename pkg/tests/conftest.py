import numpy as np
import pytest

from ilgnet.imageio import compute_channel_means, preprocess
from ilgnet.synth import synth_dataset

_criteria: dict[str, str] = {}
_outcomes: dict[str, str] = {}
_measured: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            _criteria[item.nodeid] = mark.args[0]


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    for key, value in report.user_properties:
        if key == "measured":
            _measured[report.nodeid] = value
    if report.when == "call" or report.outcome != "passed":
        prev = _outcomes.get(report.nodeid)
        if prev in (None, "PASS"):
            _outcomes[report.nodeid] = "PASS" if report.outcome == "passed" else report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, label in _criteria.items():
        if nodeid in _outcomes:
            extra = f"  ({_measured[nodeid]})" if nodeid in _measured else ""
            terminalreporter.write_line(f"[{_outcomes[nodeid]:>6}] {label}{extra}")


@pytest.fixture(scope="session")
def brightness_corpus():
    """64-image brightness corpus preprocessed to 64x64."""
    records, images, labels = synth_dataset(64, 0, "brightness")
    means = compute_channel_means(images)
    x = np.concatenate([preprocess(img, 64, means) for img in images])
    return x, np.array(labels), means
