import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from s4od.geometry import BBox

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_box(rng: np.random.Generator, W: float = 64, H: float = 64, lo: float = 1.0) -> BBox:
    w = rng.uniform(lo, W / 2)
    h = rng.uniform(lo, H / 2)
    return BBox(rng.uniform(0, W - w), rng.uniform(0, H - h), w, h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def directional_grad_errors(f, x0, grad, rng, n_dirs=3, eps=1e-6):
    """Relative errors between ``grad . v`` and the central difference of ``f`` along random unit ``v``."""
    errs = []
    for _ in range(n_dirs):
        v = rng.normal(size=x0.shape)
        v /= np.linalg.norm(v)
        fd = (f(x0 + eps * v) - f(x0 - eps * v)) / (2 * eps)
        an = float(grad @ v)
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return errs


# (criterion, passed, detail) lines, printed at the end of the session
ACCEPTANCE: list = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
