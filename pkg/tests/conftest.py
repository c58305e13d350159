import numpy as np
import pytest

from gradleak import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_op(fn, *arrays, seed=0):
    """Compare tape gradients of sum(w * fn(*xs)) against finite differences for every input.

    Returns the worst relative error.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with T.no_grad():
        out = fn(*[T.Tensor(a) for a in arrays])
    w = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(*xs):
        with T.no_grad():
            return float(np.sum(w * fn(*[T.Tensor(a) for a in xs]).data))

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        y = T.sum(fn(*leaves) * w)
        tape.backward(y)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(v, k=k):
            xs = list(arrays)
            xs[k] = v
            return scalar(*xs)

        fd = numeric_grad(f, arrays[k])
        got = leaf.grad.data if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_err(got, fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
