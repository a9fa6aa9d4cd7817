import numpy as np
import pytest

from expertnas.data import DatasetSpec, generate
from expertnas.numerics import Tape, Tensor, backward, grad_error, no_grad, numeric_grad


def fd_check(loss_fn, tensors: list[Tensor], rng: np.random.Generator, n_per_tensor: int | None = None,
             h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)

    def value():
        with no_grad():
            return loss_fn().item()

    worst = 0.0
    for t in tensors:
        idx = range(t.size) if n_per_tensor is None else rng.choice(t.size, min(n_per_tensor, t.size), replace=False)
        for i in idx:
            worst = max(worst, grad_error(float(t.grad.reshape(-1)[i]), numeric_grad(value, t, int(i), h)))
    return worst


@pytest.fixture(scope="session")
def small_dataset():
    return generate(DatasetSpec(n_train=300, n_val=200, n_test=400, seed=3))


# acceptance criterion -> (passed, detail), printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
