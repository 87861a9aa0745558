from pathlib import Path

import pytest

from radabench.corpus import load_bundled_corpus

FIXTURES = Path(__file__).parent / "fixtures" / "case_studies"


@pytest.fixture(scope="session")
def corpus():
    return load_bundled_corpus()


@pytest.fixture(scope="session")
def sinusitis(corpus):
    return next(e for e in corpus if e.record.disease == "Sinusitis")


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


# One line per acceptance criterion, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number:>2}: {status} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
