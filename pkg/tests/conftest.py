import numpy as np
import pytest

from augmetrics.data import LabeledDataset, fit_stats, make_synthetic_images, split_balanced, with_stats


@pytest.fixture(scope="session")
def small_task():
    """A small 4-class shape task split 512/256 with training statistics attached."""
    ds = make_synthetic_images(4, 192, 16, seed=3)
    train, val = split_balanced(ds, 512, 256, seed=0)
    stats = fit_stats(train)
    return with_stats(train, stats), with_stats(val, stats)


@pytest.fixture
def rgb_image():
    rng = np.random.default_rng(0)
    return rng.random((12, 12, 3)).astype(np.float32)


def tiny_dataset(n=8, side=12, channels=1, seed=0, num_classes=2):
    rng = np.random.default_rng(seed)
    imgs = rng.random((n, side, side, channels)).astype(np.float32)
    return LabeledDataset(imgs, np.arange(n) % num_classes, num_classes)


# --------------------------------------------------------------------------
# acceptance reporting: one line per criterion, printed after the run

CRITERIA: dict[int, tuple[str, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = ("PASS" if passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {title} :: {detail}")
