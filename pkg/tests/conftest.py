import numpy as np
import pytest

from stpair.video_store import synth_dataset


@pytest.fixture(scope="session")
def desk_ds(tmp_path_factory):
    """The 4-class, 8-videos-per-class, 32x32x16 synthetic fixture."""
    return synth_dataset(tmp_path_factory.mktemp("desk"), seed=0)


@pytest.fixture(scope="session")
def wide_ds(tmp_path_factory):
    """Videos large enough that disjoint volumes are easy to find."""
    return synth_dataset(
        tmp_path_factory.mktemp("wide"), num_classes=3, videos_per_class=2, width=64, height=48, frames=24, seed=1
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request, capsys):
    """``record(n, ok, detail)`` prints and remembers one criterion line."""

    def record(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
        request.config.stash[_ACCEPTANCE].append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
