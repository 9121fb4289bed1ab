import numpy as np
import pytest

from flsim.data import ClientSpec, generate_client_data
from flsim.model import build_model
from flsim.tensor_nn import Batch


@pytest.fixture
def mini64():
    return build_model("mini", 7, np.float64)


@pytest.fixture
def mini_batch():
    ds = generate_client_data(ClientSpec(1, 3, 3), (16, 8, 8), seed=11)
    return Batch(ds.inputs.astype(np.float64), ds.labels)


@pytest.fixture
def toy_client():
    """A small two-class client dataset at mini-model dims."""
    return generate_client_data(ClientSpec(1, 24, 24), (16, 8, 8), seed=5)


def bitwise_equal(a: dict, b: dict) -> bool:
    return list(a) == list(b) and all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
