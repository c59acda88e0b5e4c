import numpy as np
import pytest

from augmetrics.rng import stream, subseed


def test_streams_are_reproducible():
    a = stream(5, "x", 3, 4).random(8)
    b = stream(5, "x", 3, 4).random(8)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [(6, "x", 3, 4), (5, "y", 3, 4), (5, "x", 4, 3), (5, "x", 3), (5, "x")])
def test_streams_differ_by_any_component(other):
    assert not np.array_equal(stream(5, "x", 3, 4).random(8), stream(*other).random(8))


def test_index_streams_do_not_overlap():
    # consecutive indices must not yield shifted copies of one another
    a = stream(1, "t", 0).random(1000)
    b = stream(1, "t", 1).random(1000)
    assert not np.intersect1d(a, b).size


def test_too_many_indices():
    with pytest.raises(ValueError):
        stream(0, "t", 1, 2, 3)


def test_subseed_range():
    s = subseed(0, "x")
    assert 0 <= s < 2**63 and s == subseed(0, "x")
