import numpy as np
import pytest

from relocreg import _kernels_py
from relocreg.core import RigidTransform, axis_angle

try:
    from relocreg import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

KERNEL_MODULES = [pytest.param(_kernels_py, id="python")]
if _compiled is not None:
    KERNEL_MODULES.append(pytest.param(_compiled, id="cython"))

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture(params=KERNEL_MODULES)
def kernel_module(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rigid(rng, max_angle_deg=180.0, max_shift=10.0):
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0, max_angle_deg))
    return RigidTransform(axis_angle(axis, angle), rng.uniform(-max_shift, max_shift, 3))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
