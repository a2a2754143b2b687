import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_net():
    """A T3 net trained briefly on the 2-class set, with its train and test data."""
    from equimap.featnet import TrainConfig, build_t3, train
    from equimap.imaging import synth_classification_set

    tr = synth_classification_set(0, 1000, 2, 32)
    te = synth_classification_set(0, 300, 2, 32, "test")
    net = build_t3(2, seed=0)
    train(net, tr, TrainConfig(lr=0.02, epochs=8))
    assert net.error(te.images, te.labels) < 0.1
    return net, tr, te


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} -- {detail}"
        ACCEPTANCE_LINES.append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
