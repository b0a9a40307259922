import contextlib
import math

import numpy as np
import pytest
from hypothesis import settings

from normalgraph.reference import build_reference

settings.register_profile("repo", max_examples=25, deadline=None, derandomize=True)
settings.load_profile("repo")

TWO_PI = 2 * math.pi


@pytest.fixture(scope="session")
def sphere16():
    return build_reference("sphere", {"r": 1.0}, (16, 8))


@pytest.fixture(scope="session")
def sphere64():
    return build_reference("sphere", {"r": 1.0}, (64, 32))


@pytest.fixture(scope="session")
def torus32():
    return build_reference("torus", {"R": 2.0, "r": 1.0}, (32, 32))


@pytest.fixture(scope="session")
def cylinder32():
    return build_reference("cylinder", {"r": 1.0, "length": TWO_PI}, (32, 16))


def rel_err(a, b):
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE = {}


@contextlib.contextmanager
def _criterion(number, title):
    """Record one acceptance line; ``rec["ok"]`` and ``rec["detail"]`` are set by the body."""
    rec = {"ok": False, "detail": "did not complete"}
    try:
        yield rec
    except BaseException as exc:
        rec["ok"], rec["detail"] = False, f"{type(exc).__name__}: {exc}"
        raise
    finally:
        ACCEPTANCE[number] = (title, bool(rec["ok"]), rec["detail"])
        print(f"criterion {number:>2} {'PASS' if rec['ok'] else 'FAIL'}  {title}: {rec['detail']}")


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
