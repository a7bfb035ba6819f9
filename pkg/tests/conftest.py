from __future__ import annotations

import numpy as np
import pytest

from ppegate.classes import PERSON, PpeClass
from ppegate.detector import Detection, FixtureBackend, Frame
from ppegate.geometry import BoundingBox


def pattern_image(width: int, height: int, seed: int = 0) -> np.ndarray:
    """Deterministic non-constant RGB test image."""
    y, x = np.mgrid[0:height, 0:width]
    chans = [(x * 17 + y * 29 + c * 71 + seed * 13) % 256 for c in range(3)]
    return np.stack(chans, axis=-1).astype(np.uint8)


def blank_frame(image_id: str, width: int = 476, height: int = 476) -> Frame:
    return Frame(image_id, np.zeros((height, width, 3), dtype=np.uint8))


def det(label, conf, box) -> Detection:
    if isinstance(label, str) and label != PERSON:
        label = PpeClass.parse(label)
    return Detection(label, conf, BoundingBox(*box))


# PPE boxes laid out inside a person at (100, 40, 260, 440)
PERSON_BOX = (100, 40, 260, 440)
PPE_LAYOUT = {
    PpeClass.HARDHAT: (150, 40, 210, 80),
    PpeClass.SAFETY_GLASSES: (160, 90, 200, 105),
    PpeClass.HEARING_PROTECTION: (140, 85, 155, 110),
    PpeClass.SAFETY_VEST: (120, 150, 240, 300),
    PpeClass.SAFETY_GLOVES: (105, 300, 130, 330),
}


def person_with(classes, offset=(0, 0), conf=0.9):
    dx, dy = offset
    out = [det(PERSON, 0.95, (PERSON_BOX[0] + dx, PERSON_BOX[1] + dy, PERSON_BOX[2] + dx, PERSON_BOX[3] + dy))]
    for c in classes:
        b = PPE_LAYOUT[c]
        out.append(det(c, conf, (b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy)))
    return out


def fixture_backend(mapping) -> FixtureBackend:
    return FixtureBackend({k: list(v) for k, v in mapping.items()})


# --- acceptance criterion reporting ------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "tests": 0})
    entry["tests"] += rep.when == "call"
    entry["passed"] &= rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {e['title']} ({e['tests']} test{'s' if e['tests'] != 1 else ''})")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
