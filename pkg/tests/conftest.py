import sys
from pathlib import Path

import pytest

# make the oracle module importable from every test file
sys.path.insert(0, str(Path(__file__).parent))

from cvformer.ingest import gen_synth, load_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """40 subjects, 16 RoIs: big enough for every split, quick to train on."""
    out = tmp_path_factory.mktemp("small")
    return gen_synth(out, num_subjects=40, m=16, t=64, effect=0.8, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_manifest):
    return load_dataset(small_manifest)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion."""
    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
