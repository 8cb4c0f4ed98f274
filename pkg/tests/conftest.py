from pathlib import Path

import pytest

from fbst.imaging import load_pgm, normalize_unit_norm
from fbst.learning import LearnConfig, TrainingSet, learn, scale_nu_for_size

DATA = Path(__file__).parent / "data"

_results_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_results_key] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance verdict; the lines are printed in the session summary."""
    results = request.config.stash[_results_key]

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" ({detail})"
        results.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_results_key, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def trained_bank():
    """64 filters of size 8x8 after 100 outer iterations on the 128x128 training crop."""
    x, _ = normalize_unit_norm(load_pgm(DATA / "camera_crop128.pgm"))
    cfg = LearnConfig(num_channels=64, filter_size=8, outer_iterations=100, seed=0,
                      nu=scale_nu_for_size(5.5e-3, x.size))
    H, trace = learn(TrainingSet(images=[x]), cfg)
    return H, trace
