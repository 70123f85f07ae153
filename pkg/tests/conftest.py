import numpy as np
import pytest

from affectkit import numkit as nk
from affectkit.gradcheck import numeric_gradients, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def grad_of(fn, arrays, dtype=np.float32):
    """Analytic gradients of ``fn`` at ``arrays`` via one tape pass."""
    with nk.precision(dtype):
        leaves = {k: nk.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        with nk.Tape() as tape:
            loss = fn(leaves)
        tape.backward(loss)
    return {k: t.grad for k, t in leaves.items()}


def assert_grads_match(fn, arrays, tol=1e-3, dtype=np.float64, eps=1e-3):
    analytic = grad_of(fn, arrays, dtype)
    numeric = numeric_gradients(fn, arrays, eps)
    for k in arrays:
        err = relative_error(analytic[k], numeric[k])
        assert err < tol, f"{k}: relative error {err:.3e}"


@pytest.fixture(scope="session")
def lsd_dataset(tmp_path_factory):
    from affectkit.data import generate_synthetic

    root = tmp_path_factory.mktemp("lsd")
    return generate_synthetic(root, "lsd", per_class=40, size=16, seed=0)


@pytest.fixture(scope="session")
def mtl_dataset(tmp_path_factory):
    from affectkit.data import generate_synthetic

    root = tmp_path_factory.mktemp("mtl")
    return generate_synthetic(root, "mtl", per_class=30, size=16, seed=0, unlabeled_rate=0.2)


# acceptance reporting -------------------------------------------------------------

ACCEPTANCE_COUNT = 10
_VERDICTS: dict[int, tuple[str, bool, str]] = {}


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    """Record one acceptance criterion's outcome for the session summary."""
    _VERDICTS[number] = (title, bool(ok), detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for reps in terminalreporter.stats.values() for r in reps if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in _VERDICTS:
            title, ok, detail = _VERDICTS[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        else:
            terminalreporter.write_line(f"criterion {n:2d} FAIL: did not reach a verdict (errored or not run)")
