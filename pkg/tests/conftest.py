import pytest

_LINES = []


class CriterionRecorder:
    """Collects one PASS/FAIL line per acceptance criterion and asserts the verdict."""

    def __call__(self, name, ok, detail):
        line = f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line, flush=True)
        assert ok, line


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: [int(t) if t.isdigit() else t
                                                  for t in s.split(":")[0].split()[1].replace(".", " ").split()]):
            terminalreporter.write_line(line)
