"""
Test the seeded generator and the Fisher-Yates shuffle.
"""

from collections import Counter

import pytest

from cattle_ensemble.prng import Xoshiro256, fisher_yates_shuffle, splitmix64


def test_splitmix64_reference():
    _, out = splitmix64(0)
    assert out == 0xE220A8397B1DCDAF


def test_xoshiro256_reference_outputs():
    rng = Xoshiro256.from_state([1, 2, 3, 4])
    assert [rng.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_from_state_rejects_bad_state():
    with pytest.raises(ValueError):
        Xoshiro256.from_state([0, 0, 0, 0])
    with pytest.raises(ValueError):
        Xoshiro256.from_state([1, 2, 3])


def test_streams_reproducible():
    a = Xoshiro256(42)
    b = Xoshiro256(42)
    assert [a.next_u64() for _ in range(10)] == [b.next_u64() for _ in range(10)]
    c = Xoshiro256(43)
    assert Xoshiro256(42).next_u64() != c.next_u64()


def test_substreams_independent():
    a = Xoshiro256.substream(42, "augment/a")
    b = Xoshiro256.substream(42, "augment/b")
    assert a.next_u64() != b.next_u64()
    assert Xoshiro256.substream(42, "x").random() == Xoshiro256.substream(42, "x").random()


def test_uniform_bounds():
    rng = Xoshiro256(1)
    values = [rng.uniform(-35.0, 35.0) for _ in range(1000)]
    assert all(-35.0 <= v <= 35.0 for v in values)
    assert rng.uniform(1.4, 1.4) == 1.4


def test_degenerate_uniform_consumes_a_draw():
    a = Xoshiro256(5)
    b = Xoshiro256(5)
    a.uniform(0.0, 0.0)
    b.random()
    assert a.next_u64() == b.next_u64()


def test_randbelow():
    rng = Xoshiro256(9)
    counts = Counter(rng.randbelow(6) for _ in range(6000))
    assert set(counts) == set(range(6))
    assert all(abs(n - 1000) < 150 for n in counts.values())
    with pytest.raises(ValueError):
        rng.randbelow(0)


def test_shuffle():
    assert fisher_yates_shuffle([], 3) == []
    items = list(range(50))
    first = fisher_yates_shuffle(items, 7)
    assert first == fisher_yates_shuffle(items, 7)
    assert sorted(first) == items
    assert first != items
    assert items == list(range(50))


def test_shuffle_uniform_over_permutations():
    n_seeds = 60000
    counts = Counter(tuple(fisher_yates_shuffle("abc", seed)) for seed in range(n_seeds))
    assert len(counts) == 6
    for n in counts.values():
        assert n / n_seeds == pytest.approx(1 / 6, abs=0.01)
