import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy import ndimage

from vtgan.config import preset
from vtgan.data import FundusAngioPair

settings.register_profile(
    "vtgan", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("vtgan")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def smooth_pairs(n=2, size=64, seed=0):
    """Registered synthetic pairs whose angiogram is a fixed smooth function of the fundus."""
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        f = np.tanh(ndimage.gaussian_filter(r.normal(0, 1, (size, size, 3)), (3, 3, 0)) * 3)
        a = np.tanh(1.5 * f.mean(-1, keepdims=True) - 0.3 * f[..., :1])
        out.append(FundusAngioPair(f, a, ("Normal", "Abnormal")[i % 2], f"p{i}"))
    return out


@pytest.fixture
def desk_cfg():
    return preset("desk")


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
