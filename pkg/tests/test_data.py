import io
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldmi.data import (
    RawEvent,
    apply_k_core,
    build_log,
    check_k_core,
    parse_interactions,
    read_canonical_log,
    read_split_manifest,
    split_chronological,
    write_canonical_log,
    write_split_manifest,
)


def ev(u, i, t, title=""):
    return RawEvent(str(u), str(i), t, title)


def test_parse_jsonl_record():
    line = '{"user":"A","item":"I1","ts":100,"title":"Rose Shampoo"}'
    rep = parse_interactions([line])
    assert rep.events == [RawEvent("A", "I1", 100, "Rose Shampoo")]
    assert rep.malformed == 0


def test_parse_empty_stream():
    rep = parse_interactions(io.StringIO(""))
    assert rep.events == [] and rep.malformed == 0


def test_parse_missing_item_is_skipped():
    lines = ['{"user":"A","ts":1}', '{"user":"A","item":"x","ts":2}']
    rep = parse_interactions(lines)
    assert rep.malformed == 1
    assert [e.item_key for e in rep.events] == ["x"]


def test_parse_csv():
    text = "user,item,ts,title,rating\nA,I1,5,Rose Shampoo,4\nB,,6,,\n"
    rep = parse_interactions(io.StringIO(text), fmt="csv")
    # the second row has an empty item key
    assert len(rep.events) == 1 and rep.malformed == 1
    assert rep.events[0].rating == 4.0


def test_k_core_already_satisfied():
    events = [ev(u, i, 10 * u + i) for u in range(5) for i in range(5)]
    assert apply_k_core(events, 5) == events


def test_k_core_cascade():
    # user 5 has 4 events; removing it leaves item 9 with 4 users, which in
    # turn drops below 5 and is removed from the others too
    events = [ev(u, i, i) for u in range(5) for i in range(5)]
    events += [ev(u, 9, 50) for u in range(4)]
    events += [ev(5, i, 60 + i) for i in (0, 1, 2, 9)]
    out = apply_k_core(events, 5)
    assert {e.user_key for e in out} == {"0", "1", "2", "3", "4"}
    assert "9" not in {e.item_key for e in out}


@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 15), st.integers(0, 1000)), max_size=300),
       st.integers(1, 6))
def test_k_core_fixpoint(rows, k):
    events = [ev(u, i, t) for u, i, t in rows]
    out = apply_k_core(events, k)
    uc = Counter(e.user_key for e in out)
    ic = Counter(e.item_key for e in out)
    assert all(c >= k for c in uc.values())
    assert all(c >= k for c in ic.values())
    # a fixpoint: filtering again changes nothing
    assert apply_k_core(out, k) == out


def test_k_core_modes():
    events = [ev(0, i, i) for i in range(5)] + [ev(1, 0, 9)]
    assert {e.user_key for e in apply_k_core(events, 5, "user")} == {"0"}
    assert apply_k_core(events, 2, "item") == [ev(0, 0, 0), ev(1, 0, 9)]
    with pytest.raises(ValueError):
        apply_k_core(events, 5, "sideways")


def test_build_log_two_users_three_items():
    log = build_log([ev("b", "y", 5), ev("a", "x", 3), ev("b", "x", 1), ev("a", "z", 2)])
    assert (log.n_users, log.n_items) == (2, 3)
    # b appears first, so b is user 0; its sequence is ordered by time
    assert log.user_keys == ["b", "a"]
    assert log.sequences[0] == [log.item_keys.index("x"), log.item_keys.index("y")]
    assert log.timestamps[1] == [2, 3]


def test_build_log_later_title_wins():
    log = build_log([ev("a", "x", 1, "Old"), ev("b", "x", 2, "New")])
    assert log.titles == ["New"]


@pytest.mark.parametrize("n,sizes", [(10, (6, 2, 2)), (5, (3, 1, 1)), (30, (12, 4, 4))])
def test_split_sizes(n, sizes):
    log = build_log([ev("u", i, i) for i in range(n)])
    s = split_chronological(log).users[0]
    assert (len(s.train), len(s.valid), len(s.test)) == sizes
    if n == 10:
        assert s.train == list(range(6)) and s.valid == [6, 7] and s.test == [8, 9]
    if n == 30:
        assert s.start == 10 and s.train[0] == 10


@given(st.lists(st.integers(5, 60), min_size=1, max_size=20), st.integers(5, 40))
def test_split_is_a_partition_of_the_window(lengths, max_len):
    events = [ev(u, f"{u}-{j}", j) for u, n in enumerate(lengths) for j in range(n)]
    log = build_log(events)
    for s in split_chronological(log, max_len).users:
        window = log.sequences[s.user][s.start:]
        assert len(window) == min(max_len, len(log.sequences[s.user]))
        assert s.train + s.valid + s.test == window
        assert s.prefix == s.train + s.valid


def test_split_rejects_tiny_window():
    with pytest.raises(ValueError):
        split_chronological(build_log([ev("u", 1, 1)]), max_len=4)


def test_canonical_round_trip(tmp_path, small_log):
    log, splits = small_log
    buf = io.StringIO()
    write_canonical_log(log, buf)
    path = tmp_path / "log.tsv"
    path.write_text(buf.getvalue())
    back = read_canonical_log(path)
    assert back.sequences == log.sequences
    assert back.titles == log.titles
    assert back.timestamps == log.timestamps
    buf2 = io.StringIO()
    write_canonical_log(back, buf2)
    assert buf2.getvalue() == buf.getvalue()
    assert check_k_core(back, 5)

    m = io.StringIO()
    write_split_manifest(splits, m)
    (tmp_path / "splits.tsv").write_text(m.getvalue())
    again = read_split_manifest(tmp_path / "splits.tsv", back)
    assert [(s.train, s.valid, s.test) for s in again.users] == [(s.train, s.valid, s.test) for s in splits.users]


def test_canonical_log_tolerates_tabs_in_titles(tmp_path):
    log = build_log([ev("a", "x", 1, "Tab\there"), ev("a", "y", 2, "plain")])
    buf = io.StringIO()
    write_canonical_log(log, buf)
    (tmp_path / "l.tsv").write_text(buf.getvalue())
    assert read_canonical_log(tmp_path / "l.tsv").titles == ["Tab here", "plain"]


def test_raw_event_validation():
    with pytest.raises((ValueError, TypeError)):
        RawEvent("", "x", 1)
