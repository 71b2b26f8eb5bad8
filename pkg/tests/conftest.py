import time

import pytest

_LINES = []


class Criterion:
    """Times one acceptance criterion and records a PASS/FAIL line for the summary."""

    def __init__(self, number, title, budget=None):
        self.number, self.title, self.budget = number, title, budget
        self.checks = []

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.elapsed = time.perf_counter() - self._t0
        if self.budget is not None:
            self.check(self.elapsed < self.budget, f"runtime {self.elapsed:.3g}s < {self.budget:g}s")
        ok = exc_type is None and all(c for c, _ in self.checks)
        details = "; ".join(f"{'ok' if c else 'FAILED'}: {d}" for c, d in self.checks)
        if exc_type is not None:
            details += f"; raised {exc_type.__name__}: {exc}"
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number} ({self.title}) [{self.elapsed:.2f}s] {details}"
        _LINES.append((self.number, line))
        print(line)
        return False

    def assert_all(self):
        failed = [d for c, d in self.checks if not c]
        assert not failed, "; ".join(failed)


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
