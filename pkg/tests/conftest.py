import pytest

from suremed.lab.synth import SynthConfig, generate_corpus

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SynthConfig(n_studies=120, seed=11))


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(SynthConfig())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """A 100-study synthetic corpus written to disk (corpus.jsonl plus EMB1 files)."""
    from suremed.lab.synth import write_synth

    out = tmp_path_factory.mktemp("synth")
    write_synth(generate_corpus(SynthConfig(n_studies=100, seed=5)), out)
    return out
