import pytest

_RESULTS: dict[int, tuple[bool, str, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def check(self, ok: bool, detail: str) -> None:
        ok = bool(ok)
        _RESULTS[self.number] = (ok, self.title, detail)
        line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}: {detail}"
        print(line)
        assert ok, line


@pytest.fixture()
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
