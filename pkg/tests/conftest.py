import numpy as np
import pytest

from dyra import _kernels_py, _accel


def _backends():
    out = [_kernels_py]
    try:
        out.append(_accel.load_backend("cython"))
    except ImportError:
        pass
    return out


BACKENDS = _backends()


@pytest.fixture(params=BACKENDS, ids=lambda k: k.NAME)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_acceptance(num, name, passed, detail=""):
    """Store a criterion outcome; printed immediately and again in the summary."""
    ACCEPTANCE[num] = (name, bool(passed), detail)
    print(f"\nACCEPTANCE {num:>2} {'PASS' if passed else 'FAIL'}  {name}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2} {name}: {detail}")
