from pathlib import Path

import pytest

REPORT = Path(__file__).resolve().parents[1] / "acceptance_report.txt"
_lines: dict[str, str] = {}


class Recorder:
    def __call__(self, criterion: str, passed: bool, detail: str) -> None:
        _lines[criterion] = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        print(_lines[criterion])


@pytest.fixture(scope="session")
def record():
    return Recorder()


def _key(name: str) -> int:
    return int(name[1:]) if name[1:].isdigit() else 99


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    lines = [_lines[k] for k in sorted(_lines, key=_key)]
    for line in lines:
        terminalreporter.write_line(line)
    REPORT.write_text("\n".join(lines) + "\n")
