from contextlib import contextmanager

import numpy as np
import pytest

from ecn.tensor import set_precision

# criterion number -> (passed, title, details); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str, dict]] = {}


@contextmanager
def criterion(number: int, title: str):
    details: dict = {}
    try:
        yield details
    except BaseException:
        ACCEPTANCE[number] = (False, title, details)
        print(f"criterion {number}: FAIL {title} {details}")
        raise
    ACCEPTANCE[number] = (True, title, details)
    print(f"criterion {number}: PASS {title} {details}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, details = ACCEPTANCE[n]
        extra = " ".join(f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  {extra}".rstrip())


@pytest.fixture(autouse=True)
def _float32_default():
    set_precision("float32")
    yield
    set_precision("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
