from dataclasses import dataclass

import pytest

from glyrag import data, trainer
from glyrag.synth import generate_synthetic_cohort, split_chronological


@dataclass
class SmallCohort:
    train: list
    test: list
    stats: dict
    summaries: dict


@pytest.fixture(scope="session")
def small_cohort():
    """Two patients, three days; training windows every 12 samples, test every 6."""
    tr, te = split_chronological(generate_synthetic_cohort(2, 3, 7), 0.25)
    ws = data.prepare(tr, stride=12)
    wt = data.prepare(te, stride=6, stats=ws.stats)
    summaries = trainer.contextualize(ws.windows + wt.windows)
    return SmallCohort(ws.windows, wt.windows, ws.stats, summaries)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    import contextlib
    import time

    @contextlib.contextmanager
    def check(label, soft=False):
        t0 = time.perf_counter()
        note = []
        try:
            yield note
        except BaseException:
            _ACCEPTANCE.append(f"FAIL  {label}  ({time.perf_counter() - t0:.1f}s) {' '.join(note)}".rstrip())
            raise
        status = "PASS" if not soft or not note or note[0] != "diagnostic" else "SOFT"
        _ACCEPTANCE.append(f"{status}  {label}  ({time.perf_counter() - t0:.1f}s) {' '.join(note)}".rstrip())

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
