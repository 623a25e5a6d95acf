import os

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

os.environ.setdefault("LIFTCORE_THREADS", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()


def hamilton(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


# -- acceptance reporting ----------------------------------------------------

_ACCEPTANCE: dict = {}
_DETAILS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the current acceptance criterion."""
    m = request.node.get_closest_marker("acceptance")

    def note(text):
        if m is not None:
            _DETAILS.setdefault(m.args[0], []).append(str(text))

    return note


def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("acceptance")
    if m is None or call.when != "call" and not (call.when == "setup" and call.excinfo is not None):
        return
    n, title = m.args
    ok = call.excinfo is None
    prev = _ACCEPTANCE.get(n, (title, True))
    _ACCEPTANCE[n] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[n]
        line = f"{'PASS' if ok else 'FAIL'}  {n}. {title}"
        notes = _DETAILS.get(n)
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        terminalreporter.write_line(line)
