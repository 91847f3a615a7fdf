import numpy as np
from hypothesis import given, strategies as st

from randombsde.checks import compensator_suite, girsanov_suite, kernel_suite
from randombsde.streams import blocks, generator, map_blocks


def test_compensator_suite_small_run():
    results = compensator_suite(4000, 1)
    assert {r.name for r in results} >= {"compensator/poisson", "compensator/superposition",
                                         "perturbation-invariants-8"}
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_girsanov_suite_small_run():
    results = girsanov_suite(4000, 2)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_kernel_suite_small_run():
    results = kernel_suite(4000, 3)
    assert len(results) == 6
    assert all(r.passed for r in results), [r for r in results if not r.passed]


@given(st.integers(0, 2**63), st.integers(0, 50))
def test_keyed_streams_are_reproducible_and_distinct(seed, key):
    a = generator(seed, key).random(4)
    b = generator(seed, key).random(4)
    c = generator(seed, key + 1).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@given(st.integers(1, 50_000), st.integers(1, 9000))
def test_blocks_cover_the_range_in_order(n, size):
    spans = list(blocks(n, size))
    assert spans[0][1] == 0 and spans[-1][2] == n
    assert all(s[2] == t[1] for s, t in zip(spans, spans[1:]))


def test_block_map_keeps_block_order_with_threads():
    out = map_blocks(lambda b, lo, hi: (b, lo, hi), 50_000, workers=3, size=7000)
    assert [o[0] for o in out] == list(range(len(out)))
