import numpy as np
import pytest

from gseunet.tensor import Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_of(fn, *arrays, dtype=np.float64):
    """Tape gradients of ``fn(*tensors)`` (a scalar) w.r.t. each input array."""
    leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    return [t.grad for t in leaves]


# acceptance criteria append (criterion, passed, detail) here; summarized at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion}: {status} - {detail}")
