import numpy as np
import pytest

from hoirefine.nn import Tensor, backward


def numeric_grad(fn, arrays, idx, h=1e-5):
    """Central finite difference of scalar ``fn(*arrays)`` w.r.t. arrays[idx]."""
    base = arrays[idx]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[i]
        base[i] = old + h
        fp = fn(*arrays)
        base[i] = old - h
        fm = fn(*arrays)
        base[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn, *arrays, h=1e-5):
    """Max elementwise relative error between autodiff and central differences (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    backward(out)

    def scalar(*arrs):
        return float(fn(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        worst = max(worst, float((np.abs(ana - num) / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_record(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
