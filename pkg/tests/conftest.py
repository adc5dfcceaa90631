import pytest

_LINES: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool]] = []
        self.finished = False

    def check(self, label: str, ok) -> bool:
        self.checks.append((label, bool(ok)))
        return bool(ok)

    def verdict(self) -> None:
        self.finished = True
        assert self.passed, self.line()

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok in self.checks)

    def line(self) -> str:
        detail = "; ".join(f"{label}{'' if ok else ' [FAIL]'}" for label, ok in self.checks)
        return f"criterion {self.number:>2} {'PASS' if self.passed else 'FAIL'}  {self.title}: {detail}"


@pytest.fixture
def criterion(request):
    """Collects named checks for one acceptance criterion, then asserts them all."""
    made = []

    def make(number: int, title: str) -> Criterion:
        c = Criterion(number, title)
        made.append(c)
        return c

    yield make
    for c in made:
        if not c.finished:
            c.checks.append(("did not finish", False))
        _LINES[c.number] = c.line()
        print(c.line())


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
