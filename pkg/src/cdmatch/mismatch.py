"""Analytics over compared path pairs: which mismatches are real, what shape
they take, and two detectors built on them (hidden sub-prefix hijacks and
link detours that hint at forged BGP adjacencies)."""
from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .compare import END, DegenerateInput, Label, PairComparison, SegmentPair, compare_pair_full, is_concrete
from .core import IxpDb, Prefix, RelDb, RoaDb, RoaState
from .ribstore import RibTable


class Rule(enum.Enum):
    MORE_THAN_TWO_HOPS = "more-than-two-hops"
    VOTE_MAJORITY = "vote-majority"
    MULTI_PREFIX = "multi-prefix-corroboration"


class Pattern(enum.Enum):
    DETOURING = "detouring"
    BRANCHING = "branching"
    PROTRUDING = "protruding"
    OTHER = "other"


class LinkStatus(enum.Enum):
    SUSPICIOUS = "suspicious"
    PASSIVE_CLEARED = "passive-cleared"
    NEEDS_PROBE = "needs-probe"
    UNVERIFIABLE = "unverifiable"


class MissingRoaDb(ValueError):
    pass


class MissingAltVpRibs(ValueError):
    pass


@dataclass
class RealMismatchVerdict:
    segment: int
    is_real: bool
    rules: tuple = ()


# ------------------------------------------------------------ corpus stats

@dataclass
class SegmentStats:
    """Per IP: how many matched and mismatched segment pairs its hop sits in
    across the corpus."""
    matched: dict = field(default_factory=lambda: defaultdict(int))
    mismatched: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, pair, cmp: PairComparison) -> None:
        ips = pair.d.hops
        for s in cmp.segments:
            bucket = self.matched if s.label is Label.MATCH else self.mismatched
            for h in range(s.d_lo, s.d_hi + 1):
                for k in cmp.groups[h]:
                    ip = ips[k]
                    if ip is not None:
                        bucket[ip] += 1

    def majority_matched(self, ip: int) -> bool:
        return self.matched.get(ip, 0) > self.mismatched.get(ip, 0)


def compare_all(pairs: Iterable, m, ixp: Optional[IxpDb] = None) -> tuple[dict, SegmentStats]:
    """Compare every pair once; degenerate pairs are left out."""
    out = {}
    stats = SegmentStats()
    for p in pairs:
        try:
            cmp = compare_pair_full(p, m, ixp)
        except DegenerateInput:
            continue
        out[p.pair_id] = cmp
        stats.add(p, cmp)
    return out, stats


def rib_block_of(rib: Optional[RibTable]) -> Callable[[int], object]:
    """Address block of an IP: its covering announced prefix, or its /24."""
    cache: dict = {}

    def block(ip):
        b = cache.get(ip)
        if b is None:
            p = rib.covering_prefix(ip) if rib is not None else None
            b = cache[ip] = p if p is not None else Prefix(ip & 0xFFFFFF00, 24)
        return b
    return block


# ------------------------------------------------------------ real mismatch

def identify_real_mismatch(pair, cmp: PairComparison, seg_index: int, stats: SegmentStats,
                           block_of: Callable[[int], object]) -> RealMismatchVerdict:
    """A mismatching segment is real when its D-interior carries more than
    two concrete AS hops, or one of those hops either has an IP that sits in
    more matched than mismatched segment pairs corpus-wide, or groups IPs
    from at least two address blocks."""
    s = cmp.segments[seg_index]
    if s.label is not Label.MISMATCH:
        return RealMismatchVerdict(seg_index, False)
    rules = []
    interior = range(s.d_lo + 1, s.d_hi)
    hops = [h for h in interior if is_concrete(cmp.d[h])]
    if len({cmp.d[h] for h in hops}) > 2:
        rules.append(Rule.MORE_THAN_TWO_HOPS)
    ips = pair.d.hops
    for h in hops:
        group = [ips[k] for k in cmp.groups[h] if ips[k] is not None]
        if Rule.VOTE_MAJORITY not in rules and any(stats.majority_matched(ip) for ip in group):
            rules.append(Rule.VOTE_MAJORITY)
        if Rule.MULTI_PREFIX not in rules and len({block_of(ip) for ip in group}) >= 2:
            rules.append(Rule.MULTI_PREFIX)
    return RealMismatchVerdict(seg_index, bool(rules), tuple(rules))


def _segment_kind(s: SegmentPair) -> Pattern:
    if s.c_seg[-1] != END:
        return Pattern.DETOURING
    if s.c_interior:
        return Pattern.BRANCHING
    return Pattern.PROTRUDING


def classify_pattern(segments: Sequence[SegmentPair]) -> Pattern:
    """Shape of a mismatched pair from its mismatching segments: rejoining
    the C-path is detouring, leaving it for good is branching, extra hops
    after a fully matched C-path is protruding; mixtures are other."""
    kinds = {_segment_kind(s) for s in segments if s.label is Label.MISMATCH}
    if len(kinds) == 1:
        return kinds.pop()
    return Pattern.OTHER


@dataclass
class PairAnalysis:
    pair_id: int
    vp: str
    label: Label
    real: bool
    verdicts: list
    pattern: Optional[Pattern]


def analyze_pairs(pairs: Sequence, m, ixp: Optional[IxpDb] = None,
                  block_of: Optional[Callable] = None) -> tuple[list[PairAnalysis], dict]:
    """Compare, then judge every mismatching segment. A pair counts as a real
    mismatch when at least one of its mismatching segments is real."""
    block_of = block_of or rib_block_of(None)
    cmps, stats = compare_all(pairs, m, ixp)
    out = []
    for p in pairs:
        cmp = cmps.get(p.pair_id)
        if cmp is None:
            continue
        verdicts = [identify_real_mismatch(p, cmp, k, stats, block_of)
                    for k, s in enumerate(cmp.segments) if s.label is Label.MISMATCH]
        real = any(v.is_real for v in verdicts)
        pattern = classify_pattern(cmp.segments) if real else None
        out.append(PairAnalysis(p.pair_id, p.vp, cmp.label, real, verdicts, pattern))
    return out, cmps


def pattern_shares(analyses: Iterable[PairAnalysis]) -> dict[str, float]:
    real = [a for a in analyses if a.real]
    out = {}
    for pat in Pattern:
        n = sum(1 for a in real if a.pattern is pat)
        out[pat.value] = n / len(real) if real else 0.0
    return out


def write_analysis(analyses: Iterable[PairAnalysis], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "vp", "label", "real", "pattern", "rules"])
        for a in analyses:
            rules = sorted({r.value for v in a.verdicts for r in v.rules})
            w.writerow([a.pair_id, a.vp, a.label.value, int(a.real),
                        a.pattern.value if a.pattern else "", ";".join(rules)])


# ------------------------------------------------------------ hidden hijack

@dataclass
class HhCandidate:
    f_p: Prefix
    victim: int
    f_s: Prefix
    hijacker: int
    evidence: list = field(default_factory=list)


HH_STAGES = ("real_mismatch", "misses_origin", "alt_vp_subprefix", "roa", "not_sibling")


def detect_hidden_hijack(pairs: Sequence, cmps: dict, ribs: dict, roa: Optional[RoaDb],
                         reldb: RelDb) -> tuple[list[HhCandidate], dict]:
    """Funnel over real-mismatch pairs.

    ``cmps`` maps pair id to its comparison, ``ribs`` maps VP id to its RIB.
    Stages: the D-path never reaches the C-path origin V; another VP holds
    a more specific prefix covering the destination, originated by the AS
    the D-path ends in (H); V's ROA validates the covering prefix while H
    has none for the sub-prefix; V and H are not siblings.
    """
    if roa is None:
        raise MissingRoaDb("hidden-hijack detection needs ROA data")
    counts = dict.fromkeys(HH_STAGES, 0)
    counts["real_mismatch"] = len(pairs)
    s1 = []
    for p in pairs:
        cmp = cmps[p.pair_id]
        conc = [h for h in cmp.d[1:] if is_concrete(h)]  # skip the anchored source
        v = p.c.origin
        if conc and v not in conc:
            s1.append((p, v, conc[-1]))
    counts["misses_origin"] = len(s1)
    if s1 and len(ribs) < 2:
        raise MissingAltVpRibs("hidden-hijack detection needs RIBs from other VPs")
    s2 = []
    for p, v, h in s1:
        f_p = p.c.prefix
        hit = None
        for vp in sorted(ribs):
            if vp == p.vp:
                continue
            e = ribs[vp].lpm(p.d.dst, p.c.timestamp)
            if (e is not None and e.prefix.length > f_p.length and f_p.contains(e.prefix)
                    and e.origin == h):
                hit = e.prefix
                break
        if hit is not None:
            s2.append((p, v, h, hit))
    counts["alt_vp_subprefix"] = len(s2)
    s3 = [(p, v, h, fs) for p, v, h, fs in s2
          if roa.origin_state(p.c.prefix, v) is RoaState.VALID
          and roa.origin_state(fs, h) is not RoaState.VALID]
    counts["roa"] = len(s3)
    s4 = [(p, v, h, fs) for p, v, h, fs in s3 if v != h and not reldb.same_org(v, h)]
    counts["not_sibling"] = len(s4)
    found: dict = {}
    for p, v, h, fs in s4:
        key = (p.c.prefix, v, fs, h)
        c = found.get(key)
        if c is None:
            c = found[key] = HhCandidate(p.c.prefix, v, fs, h)
        c.evidence.append(p.pair_id)
    cands = [found[k] for k in sorted(found, key=lambda k: (k[0].base, k[0].length, k[1], k[2].base, k[3]))]
    return cands, counts


def write_hh_report(cands: Iterable[HhCandidate], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_p", "V", "f_s", "H", "evidence_pairs"])
        for c in cands:
            w.writerow([c.f_p, c.victim, c.f_s, c.hijacker, ";".join(map(str, sorted(c.evidence)))])


# ------------------------------------------------------------ link detour

@dataclass
class SuspiciousLink:
    a: int
    b: int
    evidence: list = field(default_factory=list)
    status: LinkStatus = LinkStatus.SUSPICIOUS

    @property
    def key(self) -> tuple[int, int]:
        return (self.a, self.b)


def _link(x: int, y: int) -> tuple[int, int]:
    return (x, y) if x < y else (y, x)


def detect_link_detour(items: Iterable[tuple[int, SegmentPair]]) -> list[SuspiciousLink]:
    """``items`` are (pair id, real mismatching segment). A segment whose
    C-side is a bare link while the D-side passes through at least one
    concrete AS marks that link."""
    links: dict = {}
    for pid, s in items:
        x, y = s.c_seg[0], s.c_seg[-1]
        if s.c_interior or not (is_concrete(x) and is_concrete(y)):
            continue
        if not any(is_concrete(h) for h in s.d_interior):
            continue
        k = _link(x, y)
        links.setdefault(k, SuspiciousLink(*k)).evidence.append(pid)
    return [links[k] for k in sorted(links)]


def real_segments(analyses: Iterable[PairAnalysis], cmps: dict):
    for a in analyses:
        if not a.real:
            continue
        segs = cmps[a.pair_id].segments
        for v in a.verdicts:
            if v.is_real:
                yield a.pair_id, segs[v.segment]


def data_plane_links(pairs: Iterable, m, ixp: Optional[IxpDb] = None) -> set[tuple[int, int]]:
    """AS adjacencies seen in traces. IXP fabric hops are transparent since
    the fabric is not an AS; unresponsive or unmapped hops break adjacency."""
    get = m.get if hasattr(m, "get") else m
    out = set()
    for p in pairs:
        d = p.d if hasattr(p, "d") else p
        prev = None
        for ip in d.hops:
            if ip is None:
                prev = None
                continue
            if ixp is not None and ixp.is_ixp_ip(ip):
                continue
            a = get(ip)
            if ixp is not None and a is not None and ixp.is_ixp_asn(a):
                continue
            if not isinstance(a, int):
                prev = None
                continue
            if prev is not None and prev != a:
                out.add(_link(prev, a))
            prev = a
    return out


def passive_filter(links: Sequence[SuspiciousLink], observed: set) -> list[SuspiciousLink]:
    for ln in links:
        ln.status = LinkStatus.PASSIVE_CLEARED if ln.key in observed else LinkStatus.NEEDS_PROBE
    return list(links)


def emit_probe_plan(links: Sequence[SuspiciousLink], probes: Sequence[tuple[str, int]],
                    rib_entries: Iterable) -> list[tuple[str, int, int, str]]:
    """Traceroute plan for links still in doubt: a probe inside either
    endpoint targets the other endpoint; otherwise probes in ASes on BGP
    paths through the link target the farther endpoint. Links with no
    usable probe become unverifiable."""
    by_asn: dict[int, list[str]] = defaultdict(list)
    for pid, asn in probes:
        by_asn[asn].append(pid)
    todo = [ln for ln in links if ln.status is LinkStatus.NEEDS_PROBE]
    need_scan = {ln.key for ln in todo if not (by_asn.get(ln.a) or by_asn.get(ln.b))}
    via: dict[tuple, set] = defaultdict(set)  # link -> {(asn, farther endpoint)}
    if need_scan:
        for e in rib_entries:
            path = e.as_path
            for i in range(len(path) - 1):
                k = _link(path[i], path[i + 1])
                if k not in need_scan:
                    continue
                for j, w in enumerate(path):
                    if w in by_asn:
                        far = path[i + 1] if abs(j - i) <= abs(j - (i + 1)) else path[i]
                        via[k].add((w, far))
    rows = []
    for ln in todo:
        got = []
        for src, dst in ((ln.a, ln.b), (ln.b, ln.a)):
            for pid in sorted(by_asn.get(src, ())):
                got.append((pid, src, dst, "endpoint-probe"))
        if not got:
            for w, far in sorted(via.get(ln.key, ())):
                for pid in sorted(by_asn[w]):
                    got.append((pid, w, far, "bgp-path-probe"))
        if not got:
            ln.status = LinkStatus.UNVERIFIABLE
        rows.extend(got)
    return rows


def write_link_report(links: Iterable[SuspiciousLink], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asx", "asy", "status", "evidence"])
        for ln in links:
            w.writerow([ln.a, ln.b, ln.status.value, ";".join(map(str, sorted(ln.evidence)))])


def write_probe_plan(rows: Iterable[tuple], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe_id", "src_asn", "dst_asn", "reason"])
        for r in rows:
            w.writerow(list(r))
