"""Translate traceroute paths to AS level and compare them with BGP paths
segment by segment."""
from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .core import IxpDb

WILDCARD = "*"
END = "$"


class Label(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class AsPath:
    """AS-level hops; ``groups[k]`` holds the IP-hop indices that produced
    hop ``k`` (empty for the end mark and for a synthetic source anchor)."""

    hops: tuple
    groups: tuple = ()

    @property
    def terminated(self) -> bool:
        return bool(self.hops) and self.hops[-1] == END

    def __len__(self):
        return len(self.hops)


@dataclass(frozen=True)
class SegmentPair:
    c_lo: int
    c_hi: int
    d_lo: int
    d_hi: int
    c_seg: tuple
    d_seg: tuple
    label: Optional[Label] = None

    @property
    def c_interior(self) -> tuple:
        return self.c_seg[1:-1]

    @property
    def d_interior(self) -> tuple:
        return self.d_seg[1:-1]


def is_concrete(h) -> bool:
    return h != WILDCARD and h != END


# ---------------------------------------------------------------- translate

def ip_to_hop(asn, ixp: Optional[IxpDb]):
    if asn is None or asn == WILDCARD:
        return WILDCARD
    if ixp is not None and asn in ixp.ixp_asns:
        return WILDCARD
    if not isinstance(asn, int):
        return WILDCARD  # e.g. the "ixp" marker from RIB+IXP lookups
    return asn


def translate_hops(ip_hops: Sequence[Optional[int]], lookup: Callable[[int], Optional[int]],
                   ixp: Optional[IxpDb] = None) -> tuple[list, list]:
    """Core of :func:`translate` over a raw IP hop list; returns parallel
    ``(hops, groups)`` lists including the end mark."""
    hops: list = []
    groups: list = []
    for k, ip in enumerate(ip_hops):
        h = WILDCARD if ip is None else ip_to_hop(lookup(ip), ixp)
        if h != WILDCARD and hops and hops[-1] == h:
            groups[-1].append(k)
            continue
        hops.append(h)
        groups.append([k])
    hops.append(END)
    groups.append([])
    return hops, groups


def translate(d, m, ixp: Optional[IxpDb] = None) -> AsPath:
    get = m.get if hasattr(m, "get") else m
    hops, groups = translate_hops(d.hops, get, ixp)
    return AsPath(tuple(hops), tuple(tuple(g) for g in groups))


def c_as_path(as_path: Sequence[int]) -> tuple:
    return tuple(as_path) + (END,)


def anchor_source(c: Sequence, hops: list, groups: Optional[list] = None):
    """Prefix the D-path with the VP's own AS (the C-path head). The probe
    leaves from inside that AS, so this is the implicit first hop; it also
    gives leading wildcards and a wrongly mapped first hop an anchor."""
    src = c[0]
    if hops and hops[0] == src:
        return hops, groups
    hops = [src] + list(hops)
    if groups is not None:
        groups = [[]] + list(groups)
    return hops, groups


# ------------------------------------------------------------------ segment

def segment_bounds(c: Sequence, d: Sequence) -> list[tuple[int, int, int, int]]:
    """Greedy left-to-right tiling; returns ``(c_lo, c_hi, d_lo, d_hi)``
    inclusive bounds of each segment pair."""
    if not any(is_concrete(h) for h in d):
        raise DegenerateInput("D-path has no concrete AS hop")
    if not c or not d or c[0] != d[0] or not is_concrete(c[0]):
        raise DegenerateInput("paths do not start at the same AS")
    if c[-1] != END or d[-1] != END:
        raise DegenerateInput("paths must carry the end mark")
    pos = {h: k for k, h in enumerate(c)}
    out = []
    i = j = 0
    nd = len(d)
    while i < len(c) - 1 or j < nd - 1:
        for jj in range(j + 1, nd):
            h = d[jj]
            if h == WILDCARD:
                continue
            ii = pos.get(h)
            if ii is not None and ii >= i:
                break
        else:  # pragma: no cover - END always terminates the scan
            raise DegenerateInput("unterminated path")
        out.append((i, ii, j, jj))
        i, j = ii, jj
    return out


def label_bounds(c: Sequence, d: Sequence, b, is_last: bool) -> Label:
    c_lo, c_hi, d_lo, d_hi = b
    d_int = d_hi - d_lo - 1
    c_int = c_hi - c_lo - 1
    if d_int <= 0 and c_int <= 0:
        return Label.MATCH
    if d_int > 0 and all(d[k] == WILDCARD for k in range(d_lo + 1, d_hi)) and d_hi - d_lo >= c_hi - c_lo:
        return Label.MATCH
    if is_last and d_int <= 0:
        return Label.MATCH
    return Label.MISMATCH


def label_segment(s: SegmentPair, is_last: bool) -> Label:
    return label_bounds(s.c_seg, s.d_seg, (0, len(s.c_seg) - 1, 0, len(s.d_seg) - 1), is_last)


def segment(c: Sequence, d: Sequence) -> list[SegmentPair]:
    c = tuple(c.hops if isinstance(c, AsPath) else c)
    d = tuple(d.hops if isinstance(d, AsPath) else d)
    bounds = segment_bounds(c, d)
    out = []
    for k, b in enumerate(bounds):
        lab = label_bounds(c, d, b, k == len(bounds) - 1)
        out.append(SegmentPair(b[0], b[1], b[2], b[3], c[b[0]:b[1] + 1], d[b[2]:b[3] + 1], lab))
    return out


def hops_match(c: Sequence, d: Sequence) -> bool:
    """Pair-level match test with early exit; raises DegenerateInput like
    :func:`segment`."""
    bounds = segment_bounds(c, d)
    last = len(bounds) - 1
    return all(label_bounds(c, d, b, k == last) is Label.MATCH for k, b in enumerate(bounds))


# ---------------------------------------------------------------- pair level

@dataclass
class PairComparison:
    label: Label
    c: tuple
    d: tuple
    groups: list
    segments: list[SegmentPair]


def compare_hops(c_path: Sequence[int], d_hops: Sequence, d_groups=None) -> PairComparison:
    c = c_as_path(c_path)
    hops = list(d_hops)
    if not hops or hops[-1] != END:
        hops.append(END)
        if d_groups is not None:
            d_groups = list(d_groups) + [[]]
    if not any(is_concrete(h) for h in hops):
        raise DegenerateInput("D-path has no concrete AS hop")
    hops, groups = anchor_source(c, hops, None if d_groups is None else list(d_groups))
    segs = segment(c, hops)
    label = Label.MISMATCH if any(s.label is Label.MISMATCH for s in segs) else Label.MATCH
    return PairComparison(label, c, tuple(hops), groups, segs)


def compare_pair(pair, m, ixp: Optional[IxpDb] = None) -> tuple[Label, list[SegmentPair]]:
    path = translate(pair.d, m, ixp)
    res = compare_hops(pair.c.as_path, path.hops, [list(g) for g in path.groups])
    return res.label, res.segments


def compare_pair_full(pair, m, ixp: Optional[IxpDb] = None) -> PairComparison:
    path = translate(pair.d, m, ixp)
    return compare_hops(pair.c.as_path, path.hops, [list(g) for g in path.groups])


@dataclass
class CompareReport:
    dataset: str
    total: int = 0
    matched: int = 0
    mismatched: int = 0
    degenerate: int = 0
    segments: Counter = field(default_factory=Counter)
    mismatched_ids: list = field(default_factory=list)

    @property
    def ratio(self) -> Optional[float]:
        return self.mismatched / self.total if self.total else None


def compare_corpus(pairs: Iterable, m, ixp: Optional[IxpDb] = None, dataset: str = "all") -> CompareReport:
    """Compare every pair. Pairs whose D-path has no concrete hop carry no
    evidence either way; they are counted as degenerate and excluded from
    the ratio."""
    rep = CompareReport(dataset)
    for pair in pairs:
        try:
            label, segs = compare_pair(pair, m, ixp)
        except DegenerateInput:
            rep.degenerate += 1
            continue
        rep.total += 1
        if label is Label.MATCH:
            rep.matched += 1
        else:
            rep.mismatched += 1
            rep.mismatched_ids.append(pair.pair_id)
        for s in segs:
            rep.segments[s.label.value] += 1
    return rep


def write_compare_reports(reports: Sequence[CompareReport], path, hist_path=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "total", "matched", "mismatched", "ratio"])
        for r in reports:
            w.writerow([r.dataset, r.total, r.matched, r.mismatched,
                        "" if r.ratio is None else f"{r.ratio:.6f}"])
    if hist_path is not None:
        with open(hist_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "label", "count"])
            for r in reports:
                for lab in (Label.MATCH.value, Label.MISMATCH.value):
                    w.writerow([r.dataset, lab, r.segments.get(lab, 0)])
