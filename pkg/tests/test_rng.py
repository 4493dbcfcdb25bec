"""Named random stream tests."""

import numpy as np

from mute_lab.rng import stream


def test_same_triple_same_draws():
    a = stream(7, "noise", 3).random(8)
    b = stream(7, "noise", 3).random(8)
    assert np.array_equal(a, b)


def test_streams_are_independent():
    base = stream(7, "noise", 3).random(8)
    assert not np.array_equal(stream(8, "noise", 3).random(8), base)
    assert not np.array_equal(stream(7, "dropout", 3).random(8), base)
    assert not np.array_equal(stream(7, "noise", 4).random(8), base)
    assert not np.array_equal(stream(7, "noise").random(8), base)


def test_call_order_does_not_matter():
    first = stream(1, "a").random(4)
    stream(1, "b").random(100)  # unrelated consumption in between
    second = stream(1, "a").random(4)
    assert np.array_equal(first, second)


def test_distinct_names_cover_many_streams():
    seen = set()
    for name in ("noise", "dropout", "init", "cipher", "pairs.train",
                 "pairs.eval"):
        seen.add(stream(5, name).random())
    assert len(seen) == 6
