import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bowg.bench.synth import WordModel  # noqa: E402


@pytest.fixture(scope="session")
def word_model():
    return WordModel(4, 3, seed=0)


@pytest.fixture(scope="session")
def tree(word_model):
    return word_model.train_vocabulary(seed=0)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
