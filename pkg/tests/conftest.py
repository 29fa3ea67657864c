import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    """Two-spheres dataset at test size plus its reference NDC camera."""
    from ddrnerf import scenes

    spec = scenes.two_spheres(3)
    rig = scenes.scene_rig(spec, 48, 36)
    ds = scenes.generate(spec, rig)
    return spec, ds, scenes.reference_camera(rig)


_ACCEPTANCE = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.detail = ""
        self.ok = None

    def check(self, ok, detail):
        self.ok, self.detail = bool(ok), detail

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and self.ok is None:
            self.ok, self.detail = False, f"{exc_type.__name__}: {exc}"
        line = f"criterion {self.number:2d} [{'PASS' if self.ok else 'FAIL'}] {self.title}: {self.detail}"
        _ACCEPTANCE.append((self.number, line))
        print(line)
        if exc_type is None:
            assert self.ok, line
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
