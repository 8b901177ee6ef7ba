import hashlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cosfairnet.linalg import Rng
from cosfairnet.model import init_mlp

settings.register_profile(
    "ci", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("ci")


def layer_hash(layer) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(layer.weight).tobytes())
    h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


def model_hashes(model) -> list[str]:
    return [layer_hash(layer) for layer in model.layers]


@pytest.fixture
def small_model():
    return init_mlp([5, 4, 3], Rng(123))


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
