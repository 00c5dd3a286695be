import numpy as np
import pytest
from hypothesis import settings

from probgnn.data import SyntheticSpec, generate, make_splits
from probgnn.graphs import build_adjacency
from probgnn.training import prepare

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny():
    """Five stations, a bit over two weeks of hourly steps."""
    syn = generate(SyntheticSpec(n_stations=5, n_steps=400, seed=3))
    adj = build_adjacency(syn.stations)
    splits = make_splits(syn.demand, fractions=(0.6, 0.2, 0.2), lookback=2, end=syn.main_end)
    data = prepare(syn.demand, syn.features, splits, adj, 2)
    return syn, adj, splits, data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance verdicts -----------------------------------------------------

_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, title, checks):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{text} [{'ok' if passed else 'MISS'}]" for text, passed in checks)
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} | {detail}"
        _VERDICTS.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
