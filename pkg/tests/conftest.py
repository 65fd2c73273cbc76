import numpy as np
import pytest

from stbr import tensor as tn
from stbr.tensor import Param, Tape


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build, params: list[Param], rng: np.random.Generator, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build()`` returns the op output; it is reduced to a scalar through a
    random offset, ``sum((out + c)^2)``, so every output entry carries a
    distinct random weight in the gradient.
    """
    with tn.no_grad():
        shape = build().shape
    c = rng.uniform(-1, 1, size=shape)

    def scalar_np():
        with tn.no_grad():
            return float(np.sum((build().data + c) ** 2))

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = build()
        flat = tn.reshape(tn.add(out, c), (1, -1) if out.data.ndim else (1, 1))
        loss = tn.mean(tn.sq_norm(flat))
    tn.backward(loss, tape)
    worst = 0.0
    for p in params:
        worst = max(worst, rel_err(p.grad, numeric_grad(scalar_np, p.data, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register one line each; printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
