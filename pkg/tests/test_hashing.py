import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from qamine.hashing import (
    fnv1a_64,
    ngram_bucket_ids,
    ngram_bucket_ids_py,
    token_fnv64,
    window_key_py,
    window_keys,
)

# Published FNV-1a 64-bit test vectors.
KNOWN = {
    b"": 0xCBF29CE484222325,
    b"a": 0xAF63DC4C8601EC8C,
    b"foobar": 0x85944171F73967E8,
}


def test_fnv_known_vectors():
    for data, expected in KNOWN.items():
        assert fnv1a_64(data) == expected


token = st.text(
    alphabet=st.characters(blacklist_categories=("Zs", "Zl", "Zp", "Cc", "Cs")),
    min_size=1,
    max_size=8,
)
token_lists = st.lists(token, min_size=0, max_size=30)


@given(token_lists, st.integers(min_value=2, max_value=5), st.integers(min_value=1, max_value=10_000))
@settings(max_examples=200, deadline=None)  # first call pays numba JIT cost
def test_ngram_ids_match_brute_force(tokens, max_ngram, buckets):
    fast = ngram_bucket_ids(tokens, max_ngram, buckets).tolist()
    slow = ngram_bucket_ids_py(tokens, max_ngram, buckets)
    assert fast == slow


@given(token_lists)
@settings(max_examples=200, deadline=None)
def test_token_hashes_match_reference(tokens):
    fast = token_fnv64(tokens)
    assert fast.tolist() == [fnv1a_64(t.encode("utf-8")) for t in tokens]


@given(token_lists, st.integers(min_value=1, max_value=12))
@settings(max_examples=200, deadline=None)
def test_window_keys_match_python_twin(tokens, n):
    keys = window_keys(token_fnv64(tokens), n)
    expected = [window_key_py(tokens[i : i + n]) for i in range(max(0, len(tokens) - n + 1))]
    assert [int(k) for k in keys] == expected


def test_empty_inputs():
    assert ngram_bucket_ids([], 3, 100).size == 0
    assert ngram_bucket_ids(["one"], 3, 100).size == 0
    assert token_fnv64([]).size == 0
    assert window_keys(np.empty(0, np.uint64), 4).size == 0
