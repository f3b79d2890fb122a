import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmatch.core import FormatError, Prefix, ip_to_int
from cdmatch.ingest import (CleanTrace, RawTrace, cleanse_bgp, cleanse_bgp_path, cleanse_trace, cleanse_traces,
                            discard_second_hop_bifurcation, load_pairs, load_traces, pair_paths, write_pairs,
                            write_traces)
from cdmatch.ribstore import MappingTable, RibEntry, RibTable

SRC = ip_to_int("192.0.2.1")
DST = ip_to_int("10.0.9.9")


def ips(*names):
    return [ip_to_int(f"10.{i}.0.1") for i in names]


def raw(hops, dst=DST, ts=100, vp="vp"):
    return RawTrace(ts, SRC, dst, tuple(tuple(h) if isinstance(h, (list, tuple)) else ((h,) if h else ())
                                        for h in hops), vp)


# ---------------------------------------------------------------- traces

def test_unresponsive_hop_kept_and_flagged():
    a, b = ips(1, 2)
    t, why = cleanse_trace(raw([a, None, b, DST]))
    assert why is None and t.unresp and t.reached
    assert t.hops == (a, None, b, DST)


def test_loop_discarded():
    a, b = ips(1, 2)
    t, why = cleanse_trace(raw([a, b, a]))
    assert t is None and why == "loop"


def test_adjacent_repeat_collapses():
    a, b = ips(1, 2)
    t, why = cleanse_trace(raw([a, a, b]))
    assert why is None and t.hops == (a, b)


def test_multi_response_discarded():
    a, b, c = ips(1, 2, 3)
    t, why = cleanse_trace(raw([a, (b, c), DST]))
    assert t is None and why == "mul-resp"


def test_loop_takes_precedence_over_mul_resp():
    a, b, c = ips(1, 2, 3)
    assert cleanse_trace(raw([a, (b, c), a]))[1] == "loop"


def test_unreached_is_incomplete():
    a, b = ips(1, 2)
    t, _ = cleanse_trace(raw([a, b, None]))
    assert not t.reached and t.hops == (a, b)


def _loop_corpus(n, n_loop, seed=0):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        hs = ips(*rng.sample(range(1, 200), 5))
        if i < n_loop:
            hs = hs[:3] + [hs[0]] + hs[3:]
        out.append(raw(hs + [DST]))
    rng.shuffle(out)
    return out


def test_loop_ratio_on_crafted_corpus():
    _, rep = cleanse_traces(_loop_corpus(1000, 46))
    assert rep.loop == 46
    assert rep.ratios()["loop"] == pytest.approx(0.046)
    assert rep.retained == 954


hop = st.one_of(st.just(()), st.sampled_from(ips(*range(1, 9))).map(lambda x: (x,)),
                st.lists(st.sampled_from(ips(*range(1, 9))), min_size=2, max_size=2, unique=True).map(tuple))
traces = st.lists(hop, max_size=10).map(lambda hs: RawTrace(1, SRC, DST, tuple(hs)))


@settings(max_examples=200)
@given(st.lists(traces, max_size=20))
def test_cleansing_idempotent_and_counts_partition(corpus):
    kept, rep = cleanse_traces(corpus)
    again, rep2 = cleanse_traces(kept)
    assert again == kept
    assert rep2.loop == rep2.mul_resp == 0
    assert rep.loop + rep.mul_resp + rep.retained == rep.raw_total == len(corpus)
    for t in kept:
        concrete = t.ips()
        assert len(concrete) == len(set(concrete))


def test_trace_file_round_trip(tmp_path):
    a, b, c = ips(1, 2, 3)
    corpus = [raw([a, None, (b, c), DST]), raw([a])]
    write_traces(corpus, tmp_path / "vp.txt")
    assert [t.hops for t in load_traces(tmp_path / "vp.txt")] == [t.hops for t in corpus]


def test_trace_parse_error_line(tmp_path):
    f = tmp_path / "vp.txt"
    f.write_text("1|192.0.2.1|10.0.0.1|10.0.0.1\n1|192.0.2.1|10.0.0.1|10.0.0.x\n")
    with pytest.raises(FormatError) as e:
        load_traces(f)
    assert e.value.lineno == 2


# ------------------------------------------------------------------- BGP

def test_bgp_prepending_collapsed():
    path, flags = cleanse_bgp_path([1, 1, 1, 2])
    assert path == (1, 2) and "dup-ASN" in flags


def test_bgp_loop_discarded():
    assert cleanse_bgp_path([1, 2, 1])[0] is None


def test_bgp_private_and_set():
    assert cleanse_bgp_path([1, 64512, 2])[0] is None
    assert cleanse_bgp_path(["1", "{2,3}"])[0] is None


def test_bgp_route_server_removed():
    path, flags = cleanse_bgp_path([1, 9, 2], ixp_asns={9})
    assert path == (1, 2) and "IXP" in flags


def test_bgp_report_counts():
    _, rep = cleanse_bgp([[1, 1, 2], [1, 2, 1], [1, 64512], [1, 2]])
    assert (rep.total, rep.loop, rep.priv_asn, rep.dup_asn, rep.retained) == (4, 1, 1, 1, 2)


# --------------------------------------------------------------- pairing

def _clean(dst, ts=100, hops=()):
    return CleanTrace(ts, SRC, dst, tuple(hops), True, "vp")


def test_pairing_uses_covering_prefix():
    rib = RibTable([RibEntry(Prefix.parse("10.0.0.0/16"), (1, 2), 100)])
    pairs, no_bgp = pair_paths([_clean(DST), _clean(ip_to_int("11.0.0.1"))], rib)
    assert no_bgp == 1 and len(pairs) == 1
    assert pairs[0].dst_prefix == Prefix.parse("10.0.0.0/16")


def test_pairing_picks_closer_snapshot():
    p = Prefix.parse("10.0.0.0/16")
    rib = RibTable([RibEntry(p, (1, 2), 100), RibEntry(p, (1, 3), 1000)])
    pairs, _ = pair_paths([_clean(DST, ts=900), _clean(DST, ts=200)], rib)
    assert [q.c.as_path for q in pairs] == [(1, 3), (1, 2)]


@given(st.lists(st.integers(0, 2**24 - 1), max_size=40))
def test_pairs_always_cover_destination(hosts):
    rib = RibTable([RibEntry(Prefix.parse("10.0.0.0/16"), (1, 2), 0),
                    RibEntry(Prefix.parse("10.0.128.0/17"), (1, 3), 0)])
    pairs, _ = pair_paths([_clean((10 << 24) | h) for h in hosts], rib)
    for p in pairs:
        assert p.dst_prefix.covers(p.d.dst)


def _pair(c_path, hop_ips):
    rib = RibTable([RibEntry(Prefix.parse("10.0.0.0/16"), tuple(c_path), 100)])
    pairs, _ = pair_paths([_clean(DST, hops=hop_ips)], rib)
    return pairs[0]


def test_second_hop_filter():
    a, b = ips(1, 2)
    pair = _pair([1, 2, 3], [a, b, DST])
    agree = MappingTable("m1", {a: 1, b: 2, DST: 3})
    differ = MappingTable("m2", {a: 1, b: 7, DST: 3})
    wild = MappingTable("m3", {a: 1, b: None, DST: 3})
    assert discard_second_hop_bifurcation([pair], [differ, agree, differ])[1] == 0
    assert discard_second_hop_bifurcation([pair], [differ, differ])[1] == 1
    assert discard_second_hop_bifurcation([pair], [wild, wild])[1] == 0
    with pytest.raises(ValueError):
        discard_second_hop_bifurcation([pair], [])


def test_pair_file_round_trip(tmp_path):
    a, b = ips(1, 2)
    pair = _pair([1, 2, 3], [a, None, b, DST])
    write_pairs([pair], tmp_path / "pairs.txt")
    assert load_pairs(tmp_path / "pairs.txt") == [pair]
