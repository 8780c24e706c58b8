import numpy as np
import pytest
import torch

from flwnet import imaging


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_image(rng, h, w, lo=0.0, hi=1.0):
    return lo + (hi - lo) * rng.random((h, w, 3))


@pytest.fixture
def small_pair(rng):
    """A dark/bright aligned pair of byte-exact images (32x40)."""
    high = np.round(random_image(rng, 32, 40, 0.2, 0.9) * 255) / 255
    low = np.round(high * 0.2 * 255) / 255
    return imaging.make_pair(low, high, "small.png")


@pytest.fixture
def pair_dirs(tmp_path, rng):
    """``low/`` and ``high/`` directories holding three small paired PNGs."""
    low_dir, high_dir = tmp_path / "low", tmp_path / "high"
    low_dir.mkdir()
    high_dir.mkdir()
    for i in range(3):
        high = random_image(rng, 24, 20, 0.3, 0.9)
        imaging.save_image(high, high_dir / f"img{i}.png")
        imaging.save_image(high * 0.15, low_dir / f"img{i}.png")
    return low_dir, high_dir


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """``report(criterion, status, detail)``: one line per criterion, repeated in the summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(criterion: int, status: bool | str, detail: str) -> None:
        word = status if isinstance(status, str) else ("PASS" if status else "FAIL")
        line = f"{word}  criterion {criterion:>2}: {detail}"
        lines.append((criterion, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
