import gzip
import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nystrom_tron.data import (ConfigurationError, ParseError, SparseExample, UnsupportedLabelError,
                               chunk_bounds, format_example, load_dataset, parse_dataset,
                               shard_random, to_csr, write_dataset)


def parse(text):
    return parse_dataset(io.StringIO(text))


def test_parse_basic_line():
    (ex,) = parse("+1 3:0.5 7:1.0\n")
    assert ex.label == 1
    assert list(ex.indices) == [2, 6]  # 0-based internally
    assert list(ex.values) == [0.5, 1.0]
    assert ex.dim == 7


def test_parse_label_only():
    (ex,) = parse("-1\n")
    assert ex.label == -1 and ex.indices.size == 0 and ex.dim == 0


def test_parse_skips_comments_and_blanks():
    exs = parse("# header\n\n+1 1:2 # trailing\n-1 2:3\n")
    assert [e.label for e in exs] == [1, -1]


def test_parse_drops_explicit_zeros():
    (ex,) = parse("+1 1:0 2:5\n")
    assert list(ex.indices) == [1]


@pytest.mark.parametrize("line,lineno", [
    ("+1 3:0.5\n+1 abc\n", 2),
    ("+1 3:x\n", 1),
    ("+1 3:1 2:1\n", 1),   # not increasing
    ("+1 0:1\n", 1),       # 1-based
    ("foo 1:1\n", 1),
])
def test_parse_errors_carry_line_number(line, lineno):
    with pytest.raises(ParseError) as err:
        parse(line)
    assert err.value.lineno == lineno
    assert f"line {lineno}" in str(err.value)


def test_non_binary_label():
    with pytest.raises(UnsupportedLabelError):
        parse("+1 1:1\n2 1:1\n")


def test_zero_one_labels_remapped(caplog):
    with caplog.at_level(logging.WARNING):
        exs = parse("1 1:1\n0 1:2\n")
    assert [e.label for e in exs] == [1, -1]
    assert "remapping" in caplog.text


def test_mixed_zero_and_minus_one_rejected():
    with pytest.raises(UnsupportedLabelError):
        parse("0 1:1\n-1 1:2\n")


def test_gzip_sniffing(tmp_path):
    text = "+1 1:1.5\n-1 2:2.5\n"
    plain = tmp_path / "a.svm"
    plain.write_text(text)
    gz = tmp_path / "a.svm.data"  # extension deliberately uninformative
    with gzip.open(gz, "wt") as fh:
        fh.write(text)
    assert load_dataset(plain) == load_dataset(gz)


def test_example_invariants():
    with pytest.raises(ValueError):
        SparseExample(np.array([2, 1]), np.array([1.0, 1.0]), 1)
    with pytest.raises(ValueError):
        SparseExample(np.array([0]), np.array([1.0]), 0)
    ex = SparseExample(np.array([0, 4]), np.array([0.0, 2.0]), -1)
    assert list(ex.indices) == [4] and ex.sq_norm() == 4.0


floats = st.floats(allow_nan=False, allow_infinity=False, width=64).filter(lambda v: v != 0)


@st.composite
def examples(draw):
    idx = sorted(draw(st.sets(st.integers(0, 50), max_size=8)))
    vals = [draw(floats) for _ in idx]
    return SparseExample(np.array(idx, dtype=np.int64), np.array(vals), draw(st.sampled_from([1, -1])))


@given(st.lists(examples(), max_size=10))
def test_libsvm_round_trip(exs):
    buf = io.StringIO()
    write_dataset(exs, buf)
    back = parse(buf.getvalue())
    assert back == exs
    assert all(format_example(a) == format_example(b) for a, b in zip(exs, back))


def _dummy(n):
    return [SparseExample(np.array([0]), np.array([float(i + 1)]), 1) for i in range(n)]


def test_shard_single_worker():
    (s,) = shard_random(_dummy(10), 1, 3)
    assert len(s) == 10 and sorted(s.global_ids) == list(range(10))
    assert [e.values[0] - 1 for e in s.examples] == list(s.global_ids)


def test_shard_sizes_and_partition():
    shards = shard_random(_dummy(10), 4, 7)
    assert [len(s) for s in shards] == [3, 3, 2, 2]
    ids = np.concatenate([s.global_ids for s in shards])
    assert sorted(ids) == list(range(10))
    assert [s.worker_id for s in shards] == [0, 1, 2, 3]


def test_shard_deterministic():
    a = shard_random(_dummy(10), 4, 7)
    b = shard_random(_dummy(10), 4, 7)
    assert all(np.array_equal(x.global_ids, y.global_ids) for x, y in zip(a, b))


def test_shard_errors():
    with pytest.raises(ConfigurationError):
        shard_random(_dummy(3), 4, 0)
    with pytest.raises(ConfigurationError):
        shard_random(_dummy(3), 0, 0)


@settings(max_examples=50)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_shard_partition_and_p_invariance(n, p, seed):
    if p > n:
        return
    shards = shard_random(_dummy(n), p, seed)
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1
    cat = np.concatenate([s.global_ids for s in shards])
    assert sorted(cat) == list(range(n))
    # concatenation in worker order is the same permutation for every p
    ref = shard_random(_dummy(n), 1, seed)[0].global_ids
    assert np.array_equal(cat, ref)


def test_chunk_bounds():
    assert list(chunk_bounds(10, 4)) == [0, 3, 6, 8, 10]


def test_to_csr_dimension_check():
    with pytest.raises(ValueError):
        to_csr(_dummy(2), 0)
