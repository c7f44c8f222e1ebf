import pytest

from asatse.data import gen_dataset


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    """The default synthetic corpus (8 speakers, 60 mixtures, seed 0)."""
    root = tmp_path_factory.mktemp("corpus_default")
    gen_dataset(root, seed=0)
    return root


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 12-mixture corpus for quick harness and CLI checks."""
    root = tmp_path_factory.mktemp("corpus_small")
    gen_dataset(root, utts_per_speaker=12, num_mixtures=12, seed=3)
    return root


CRITERIA = [f"A{i}" for i in range(1, 11)]


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion, then assert it."""

    def _verdict(criterion: str, ok: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config._acceptance_lines[criterion] = line
        print(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config._acceptance_lines
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for crit in CRITERIA:
        terminalreporter.write_line(lines.get(crit, f"{crit} NOT RUN: no verdict recorded (deselected or errored before the check)"))
