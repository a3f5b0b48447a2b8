from __future__ import annotations

import math
from collections import Counter

from hypothesis import given
from hypothesis import strategies as st

from skillroute.text import bucket, hashed_cosine, jaccard, tokenize


def test_tokenize_lowercases_and_keeps_tags():
    assert tokenize("[q1-2] Needs:Search foo_bar, BAZ") == ["q1", "2", "needs:search", "foo_bar", "baz"]


def test_bucket_is_stable():
    assert bucket("alpha") == bucket("alpha")
    assert 0 <= bucket("alpha") < 1 << 20


def test_cosine_against_plain_counts():
    a, b = "x y y z", "y z z w"
    ca, cb = Counter(a.split()), Counter(b.split())
    dot = sum(ca[t] * cb[t] for t in ca)
    expect = dot / (math.sqrt(sum(v * v for v in ca.values())) * math.sqrt(sum(v * v for v in cb.values())))
    assert abs(hashed_cosine(a, b) - expect) < 1e-12


def test_cosine_edge_cases():
    assert hashed_cosine("", "x") == 0.0
    assert hashed_cosine("x", "y") == 0.0
    assert abs(hashed_cosine("x y", "y x") - 1.0) < 1e-12


def test_jaccard():
    assert jaccard([], []) == 1.0
    assert jaccard("ab", "bc") == 1 / 3


@given(st.text(alphabet="abc xyz", max_size=30), st.text(alphabet="abc xyz", max_size=30))
def test_cosine_symmetric_and_bounded(a, b):
    c = hashed_cosine(a, b)
    assert 0.0 <= c <= 1.0 + 1e-12
    assert c == hashed_cosine(b, a)
