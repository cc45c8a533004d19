import numpy as np
import pytest

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def central_difference(f, arr: np.ndarray, index, step: float = FD_STEP) -> float:
    """Central difference of the scalar ``f()`` with respect to ``arr[index]``, in place."""
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2.0 * step)


def grad_mismatch(analytic, numeric) -> float:
    """Worst elementwise relative error, with an absolute floor for near-zero derivatives."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_ATOL / FD_RTOL)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_tensor_grads(loss_fn, tensors, rng, coords_per_tensor: int = 10) -> float:
    """Compare reverse-mode gradients with central differences on sampled coordinates.

    ``loss_fn()`` must rebuild the graph and return a scalar Tensor.
    Returns the worst relative error found.
    """
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        numeric = [central_difference(lambda: loss_fn().item(), flat, i) for i in picks]
        worst = max(worst, grad_mismatch(g.reshape(-1)[picks], numeric))
    return worst


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
